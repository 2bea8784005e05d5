"""Simulated hardware modules, their key trees and covenant storage.

Every signing key lives on exactly one device. Compromising a device copies
whatever it currently holds into the shared ``AdversaryKnowledge``; keys that
the device generates later are copied as they appear. Deleting a key erases
the device's copy but never the adversary's.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

from .script import Op, Script, multisig_script, small_int_value
from .txkit import KeyPair, SighashMode, Transaction, compute_txid, sha256, sign_input, tagged_hash

PURPOSE = "vault custody"
HD_WALLET_TYPES = ("active", "recovery", "fee")


class PolicyError(RuntimeError):
    pass


class DeviceFailure(RuntimeError):
    pass


class NotFound(KeyError):
    pass


class Lost(RuntimeError):
    """Every holder of a stored covenant transaction has failed."""


class Role(Enum):
    ACTIVE = "active"
    RECOVERY = "recovery"
    VAULT = "vault"
    FEE = "fee"


@dataclass(frozen=True)
class WalletTopology:
    j: int = 2
    k: int = 3
    m: int = 2
    n: int = 3
    p: int = 2
    t: int = 3
    a: int = 2
    b: int = 3
    R: int = 3
    S: int = 2
    W: int = 2
    T: int = 6

    def __post_init__(self):
        for thr, cnt in (("j", "k"), ("m", "n"), ("p", "t"), ("a", "b")):
            if not 1 <= getattr(self, thr) <= getattr(self, cnt):
                raise ValueError(f"topology: need 1 <= {thr} <= {cnt}")
        for name in ("R", "S", "W"):
            if getattr(self, name) < 1:
                raise ValueError(f"topology: {name} must be >= 1")
        if self.T < 0:
            raise ValueError("topology: T must be >= 0")
        # AVTs live on vault HMs that delete; at least t-p+1 of them must store
        if not self.t - self.p + 1 <= self.R <= self.t:
            raise ValueError("topology: need t-p+1 <= R <= t (AVTs are stored on deleting vault HMs)")

    @property
    def required_deletions(self) -> int:
        return self.t - self.p + 1

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: dict) -> "WalletTopology":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"topology: unknown field(s) {sorted(unknown)}")
        return cls(**data)


class DeletionReceipt(NamedTuple):
    hm_id: str
    key_id: str
    event_index: int
    effective: bool  # False when the device was already compromised


@dataclass
class AdversaryKnowledge:
    """What the attacker holds. Only ever grows."""
    keys: dict = field(default_factory=dict)           # public -> KeyPair copy
    transactions: dict = field(default_factory=dict)   # txid -> Transaction
    addresses: set = field(default_factory=set)
    channel_control: set = field(default_factory=set)
    seen_items: set = field(default_factory=set)

    def learn_key(self, kp: KeyPair) -> None:
        if kp.public not in self.keys:
            self.keys[kp.public] = kp.copy()

    def learn_tx(self, tx: Transaction) -> None:
        self.transactions.setdefault(compute_txid(tx), tx)

    def holds(self, public: bytes) -> bool:
        return public in self.keys

    def key_count(self, publics: Iterable[bytes]) -> int:
        return sum(1 for p in publics if p in self.keys)

    def can_sign(self, script: Script, group: int = -1) -> bool:
        threshold, publics = multisig_groups(script)[group]
        return self.key_count(publics) >= threshold

    def sign_multisig(self, tx: Transaction, index: int, script: Script, amount: int,
                      mode: SighashMode = SighashMode.ALL, group: int = -1) -> list[bytes]:
        """Threshold signatures for one CHECKMULTISIG group of ``script``."""
        threshold, publics = multisig_groups(script)[group]
        held = [self.keys[p] for p in publics if p in self.keys][:threshold]
        if len(held) < threshold:
            raise PolicyError("adversary lacks a signing threshold")
        return [sign_input(k, tx, index, script, amount, mode) for k in held]

    def size(self) -> int:
        return len(self.keys) + len(self.transactions) + len(self.addresses) + len(self.channel_control)


def multisig_groups(script: Script) -> list[tuple[int, list[bytes]]]:
    """(threshold, pubkeys) for every CHECKMULTISIG in ``script``, in order."""
    items = list(script.items)
    groups = []
    for end, item in enumerate(items):
        if item != Op.OP_CHECKMULTISIG:
            continue
        n = small_int_value(items[end - 1])
        publics = list(items[end - 1 - n:end - 1])
        groups.append((small_int_value(items[end - 2 - n]), publics))
    return groups


def multisig_params(script: Script) -> tuple[int, list[bytes]]:
    return multisig_groups(script)[-1]


def derivation_path(wallet_type: str, index: int) -> str:
    return f"m/{PURPOSE}/{wallet_type}/{index}"


def derive_key(seed: bytes, wallet_type: str, index: int, key_id: str | None = None) -> KeyPair:
    path = derivation_path(wallet_type, index)
    return KeyPair(tagged_hash("vaultlab/derive", seed + path.encode()), key_id or path)


class HardwareModule:
    def __init__(self, hm_id: str, role: Role, rng, adversary: AdversaryKnowledge | None = None):
        self.hm_id = hm_id
        self.role = role
        self._rng = rng
        self._seed = rng.randbytes(32) if role is not Role.VAULT else None
        self.key_tree: dict[str, KeyPair] = {}
        self.ephemeral: dict[str, KeyPair] = {}
        self.stored_addresses: set[str] = set()
        self.stored_acts: dict[bytes, bytes] = {}   # vault txid -> serialized AVT
        self.deleted_keys: dict[str, DeletionReceipt] = {}
        self.compromised_at: int | None = None
        self.failed = False
        self.access_log: list[str] = []
        self.adversary = adversary
        self._eph_counter = 0
        self._leak_keys = True
        self._leak_storage = True

    def __repr__(self):
        return f"HardwareModule({self.hm_id}, {self.role.value})"

    # -- state ------------------------------------------------------------

    def compromised(self, now: int) -> bool:
        return self.compromised_at is not None and self.compromised_at <= now

    def _check_alive(self) -> None:
        if self.failed:
            raise DeviceFailure(self.hm_id)

    def touch(self, action: str) -> None:
        self._check_alive()
        self.access_log.append(action)

    def compromise(self, now: int, adversary: AdversaryKnowledge, keys: bool = True,
                   storage: bool = True) -> None:
        first = self.compromised_at is None
        if first:
            self.compromised_at = now
        self.adversary = adversary
        self._leak_keys = keys if first else (self._leak_keys or keys)
        self._leak_storage = storage if first else (self._leak_storage or storage)
        if keys:
            for kp in list(self.key_tree.values()) + list(self.ephemeral.values()):
                if not kp.deleted:
                    adversary.learn_key(kp)
        if storage:
            adversary.addresses |= self.stored_addresses
            for raw in self.stored_acts.values():
                adversary.learn_tx(Transaction.from_bytes(raw))

    def fail(self) -> None:
        self.failed = True

    # -- keys -------------------------------------------------------------

    def derive_wallet_keys(self, wallet_type: str, count: int = 1, start: int = 0) -> list[bytes]:
        if self.role is Role.VAULT:
            raise PolicyError("vault wallet HMs hold no hierarchical key tree")
        if wallet_type not in HD_WALLET_TYPES:
            raise PolicyError(f"unknown wallet type {wallet_type!r}")
        self._check_alive()
        out = []
        for index in range(start, start + count):
            path = derivation_path(wallet_type, index)
            kp = self.key_tree.get(path)
            if kp is None:
                kp = derive_key(self._seed, wallet_type, index, f"{self.hm_id}:{path}")
                self.key_tree[path] = kp
                self._maybe_leak(kp)
            out.append(kp.public)
        return out

    def seed_backup(self) -> bytes:
        self._check_alive()
        return self._seed

    def key_for(self, public: bytes) -> KeyPair:
        for kp in list(self.key_tree.values()) + list(self.ephemeral.values()):
            if kp.public == public:
                return kp
        raise NotFound(public.hex())

    def gen_ephemeral_keypair(self) -> str:
        if self.role is not Role.VAULT:
            raise PolicyError("ephemeral covenant keys are generated on vault HMs only")
        self._check_alive()
        self._eph_counter += 1
        key_id = f"{self.hm_id}:eph/{self._eph_counter}"
        kp = KeyPair(self._rng.randbytes(32), key_id)
        self.ephemeral[key_id] = kp
        self._maybe_leak(kp)
        return key_id

    def _maybe_leak(self, kp: KeyPair) -> None:
        if self.compromised_at is not None and self.adversary is not None and self._leak_keys:
            self.adversary.learn_key(kp)

    def ephemeral_public(self, key_id: str) -> bytes:
        try:
            return self.ephemeral[key_id].public
        except KeyError:
            raise NotFound(key_id) from None

    def sign(self, public: bytes, tx: Transaction, index: int, script: Script, amount: int,
             mode: SighashMode = SighashMode.ALL) -> bytes:
        self.touch("sign")
        return sign_input(self.key_for(public), tx, index, script, amount, mode)

    def delete_key(self, key_id: str, now: int) -> DeletionReceipt:
        kp = self.ephemeral.get(key_id)
        if kp is None:
            raise NotFound(key_id)
        self._check_alive()
        kp.erase()
        receipt = DeletionReceipt(self.hm_id, key_id, now, not self.compromised(now))
        self.deleted_keys[key_id] = receipt
        return receipt

    def live_keys(self) -> list[str]:
        return [k for k, kp in self.ephemeral.items() if not kp.deleted]

    # -- storage ------------------------------------------------------------

    def store(self, vault_txid: bytes, avt: Transaction) -> None:
        self._check_alive()
        self.stored_acts[vault_txid] = avt.to_bytes()
        if self.compromised_at is not None and self.adversary is not None and self._leak_storage:
            self.adversary.learn_tx(avt)

    def load(self, vault_txid: bytes) -> Transaction:
        self._check_alive()
        raw = self.stored_acts.get(vault_txid)
        if raw is None:
            raise NotFound(vault_txid.hex())
        return Transaction.from_bytes(raw)

    def commitment(self, vault_txid: bytes, nonce: bytes) -> bytes:
        """Answer a possession challenge without revealing the stored bytes."""
        self.touch("challenge")
        return possession_commitment(self.stored_acts[vault_txid], nonce)

    def corrupt(self, vault_txid: bytes, bit: int) -> None:
        raw = bytearray(self.stored_acts[vault_txid])
        raw[bit // 8 % len(raw)] ^= 1 << (bit % 8)
        self.stored_acts[vault_txid] = bytes(raw)


def possession_commitment(raw: bytes, nonce: bytes) -> bytes:
    return sha256(nonce + sha256(raw))


class StorageDevice:
    """A plain storage device (computer-interface disk, backup) holding P2RWs."""

    def __init__(self, device_id: str):
        self.hm_id = device_id
        self.stored: dict[bytes, bytes] = {}
        self.failed = False
        self.compromised_at: int | None = None
        self.adversary: AdversaryKnowledge | None = None

    def store(self, key: bytes, tx: Transaction) -> None:
        if self.failed:
            raise DeviceFailure(self.hm_id)
        self.stored[key] = tx.to_bytes()
        if self.adversary is not None:
            self.adversary.learn_tx(tx)

    def load(self, key: bytes) -> Transaction:
        if self.failed:
            raise DeviceFailure(self.hm_id)
        return Transaction.from_bytes(self.stored[key])

    def compromise(self, now: int, adversary: AdversaryKnowledge) -> None:
        if self.compromised_at is None:
            self.compromised_at = now
        self.adversary = adversary
        for raw in self.stored.values():
            adversary.learn_tx(Transaction.from_bytes(raw))

    def fail(self) -> None:
        self.failed = True


# -- channels and the human check ---------------------------------------------


@dataclass
class Channel:
    channel_id: str
    kind: str = "in-band"   # or "oob"
    compromised: bool = False


class ChannelState(NamedTuple):
    in_band_compromised: bool = False
    oob_compromised: bool = False


class Payload(NamedTuple):
    intended: object
    presented: object

    @property
    def tampered(self) -> bool:
        return self.intended != self.presented


class CheckResult(Enum):
    PASS = "pass"
    FAIL = "fail"

    def __bool__(self):
        return self is CheckResult.PASS


def human_check(channels: ChannelState, payload: Payload) -> CheckResult:
    """A human compares what the HM shows with what they intended.

    Tampering goes unnoticed only when the attacker controls both channels,
    since then the display can be forged consistently.
    """
    if not payload.tampered:
        return CheckResult.PASS
    if channels.in_band_compromised and channels.oob_compromised:
        return CheckResult.PASS
    return CheckResult.FAIL


# -- the fleet ----------------------------------------------------------------


class Fleet:
    def __init__(self, topology: WalletTopology, rng):
        self.topology = topology
        self.rng = rng
        self.adversary = AdversaryKnowledge()
        self.clock = 0
        tp = topology
        self.hms: dict[str, HardwareModule] = {}
        for role, count in ((Role.ACTIVE, tp.k), (Role.RECOVERY, tp.n), (Role.VAULT, tp.t), (Role.FEE, tp.b)):
            for i in range(count):
                hm = HardwareModule(f"{role.value}-{i}", role, rng)
                self.hms[hm.hm_id] = hm
        self.p2rw_devices = [StorageDevice(f"p2rw-store-{i}") for i in range(tp.S)]
        self.avt_holders: dict[bytes, list[str]] = {}
        self.p2rw_holders: dict[bytes, list] = {}
        self.pairs: dict[bytes, object] = {}
        self.act_digests: dict[tuple[str, bytes], bytes] = {}
        self.channels = ChannelState()
        self.receipts: list[DeletionReceipt] = []
        self._generation = {r: 0 for r in Role}

    def tick(self) -> int:
        self.clock += 1
        return self.clock

    def by_role(self, role: Role, alive_only: bool = False) -> list[HardwareModule]:
        return [hm for hm in self.hms.values() if hm.role is role and not (alive_only and hm.failed)]

    # -- wallets ------------------------------------------------------------

    def wallet_keys(self, role: Role, index: int) -> list[bytes]:
        wallet_type = role.value
        return [hm.derive_wallet_keys(wallet_type, 1, index)[0] for hm in self.by_role(role)]

    def threshold(self, role: Role) -> int:
        tp = self.topology
        return {Role.ACTIVE: tp.j, Role.RECOVERY: tp.m, Role.VAULT: tp.p, Role.FEE: tp.a}[role]

    def wallet_script(self, role: Role, index: int) -> Script:
        return multisig_script(self.threshold(role), self.wallet_keys(role, index))

    def sign_wallet(self, role: Role, index: int, tx: Transaction, input_index: int,
                    script: Script, amount: int, mode: SighashMode = SighashMode.ALL,
                    exclude: Sequence[str] = ()) -> list[bytes]:
        """Threshold signatures from the first live devices of a wallet."""
        need = self.threshold(role)
        position = {item: i for i, item in enumerate(script.items) if isinstance(item, bytes)}
        sigs = []
        for hm in self.by_role(role):
            if len(sigs) == need:
                break
            if hm.failed or hm.hm_id in exclude:
                continue
            public = hm.derive_wallet_keys(role.value, 1, index)[0]
            if public in position:
                sigs.append((position[public], hm.sign(public, tx, input_index, script, amount, mode)))
        if len(sigs) < need:
            raise DeviceFailure(f"{role.value} wallet below threshold")
        return [s for _, s in sorted(sigs)]

    def can_sign(self, role: Role) -> bool:
        return len(self.by_role(role, alive_only=True)) >= self.threshold(role)

    def replace_device(self, hm_id: str) -> HardwareModule:
        old = self.hms[hm_id]
        self._generation[old.role] += 1
        new_id = f"{hm_id}r{self._generation[old.role]}"
        new = HardwareModule(new_id, old.role, self.rng)
        # keep ordering stable: the replacement takes the old slot
        self.hms = {(new_id if k == hm_id else k): (new if k == hm_id else v) for k, v in self.hms.items()}
        return new

    # -- covenant storage -----------------------------------------------------

    def store_act(self, holder: str, pair) -> None:
        hm = self.hms[holder]
        if hm.role is not Role.VAULT:
            raise PolicyError("AVTs are stored on vault wallet HMs")
        txid = pair.vault_txid
        hm.store(txid, pair.avt)
        self.pairs[txid] = pair
        holders = self.avt_holders.setdefault(txid, [])
        if holder not in holders:
            holders.append(holder)
        self.act_digests[(holder, txid)] = sha256(pair.avt.to_bytes())

    def store_p2rw(self, device, pair) -> None:
        device.store(pair.vault_txid, pair.p2rw)
        holders = self.p2rw_holders.setdefault(pair.vault_txid, [])
        if device not in holders:
            holders.append(device)

    def fetch_act(self, txid: bytes):
        for holder in self.avt_holders.get(txid, []):
            hm = self.hms.get(holder)
            if hm is None or hm.failed:
                continue
            avt = hm.load(txid)
            hm.access_log.append("fetch")
            pair = self.pairs[txid]
            if compute_txid(avt) != txid:
                continue
            return pair, avt
        if txid not in self.pairs:
            raise NotFound(txid.hex())
        raise Lost(f"all AVT holders failed for {txid.hex()}")

    def fetch_p2rw(self, txid: bytes) -> Transaction:
        for device in self.p2rw_holders.get(txid, []):
            if device.failed:
                continue
            return device.load(txid)
        raise Lost(f"all P2RW holders failed for {txid.hex()}")

    def redundancy(self, txid: bytes) -> int:
        return sum(1 for h in self.avt_holders.get(txid, []) if h in self.hms and not self.hms[h].failed)

    def record_receipt(self, receipt: DeletionReceipt) -> None:
        self.receipts.append(receipt)
