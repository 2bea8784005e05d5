"""Custody processes run as scripted flows over the fleet, watchtowers and chain.

A ``World`` owns one simulated deployment. Chain events are queued and
dispatched to watchtowers, the owner and any extra observers (attackers)
until nothing is left to react to. Blocks are mined only when a process or a
scenario asks for one.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from . import covenants as cv
from .chain import Chain, Visibility
from .covenants import Activation, CovenantPair, VaultTemplate
from .fleet import (
    DeviceFailure, Fleet, Lost, Payload, PolicyError, Role, WalletTopology, human_check,
)
from .interpreter import verify_input
from .script import Script, multisig_script
from .txkit import KeyPair, OutPoint, SighashMode, Transaction, TxInput, TxOutput, compute_txid, sha256
from .watchtower import Alert, BroadcastP2RW, Variant, WatchtowerNode

DELETED_KEY = "deleted-key"
CTV = "ctv"
MECHANISMS = (DELETED_KEY, CTV)

# size estimates for fees that are fixed before signing (deposits and the
# pre-signed covenant transactions); both mechanisms then pay identical fees
NOMINAL_VSIZE = {"deposit": 400, "vault": 360, "p2rw": 280}


class Status(Enum):
    COMPLETED = "completed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class TraceStep:
    index: int
    actor: str
    action: str
    result: str = "ok"

    def line(self) -> str:
        return f"{self.index} {self.actor} {self.action} {self.result}"


@dataclass
class ProcessTrace:
    name: str
    steps: list = field(default_factory=list)
    status: Status = Status.COMPLETED
    reason: str = ""
    world: "World | None" = field(default=None, repr=False, compare=False)
    broadcasts_after_abort: int = 0

    def add(self, actor: str, action: str, result: str = "ok") -> TraceStep:
        step = TraceStep(len(self.steps) + 1, actor, action, result)
        self.steps.append(step)
        if self.world is not None:
            self.world.tick()
        return step

    def abort(self, reason: str) -> "ProcessTrace":
        self.status = Status.ABORTED
        self.reason = reason
        self.add("engine", "abort", reason)
        return self

    @property
    def completed(self) -> bool:
        return self.status is Status.COMPLETED

    @property
    def terminal(self) -> str:
        return "Completed" if self.completed else f"Aborted({self.reason})"

    def lines(self) -> list[str]:
        return [f"[{self.name}] {s.line()}" for s in self.steps] + [f"[{self.name}] {self.terminal}"]

    def actions(self) -> list[str]:
        return [s.action for s in self.steps]


@dataclass(frozen=True)
class UnvaultPolicy:
    max_funds_in_flight: int | None = None
    min_blocks_between_unvaults: int = 0
    max_unvaults_in_flight: int = 1

    def __post_init__(self):
        if self.max_funds_in_flight is not None and self.max_funds_in_flight < 0:
            raise ValueError("policy: max_funds_in_flight must be >= 0")
        if self.min_blocks_between_unvaults < 0:
            raise ValueError("policy: min_blocks_between_unvaults must be >= 0")

    def to_dict(self) -> dict:
        return {"max_funds_in_flight": self.max_funds_in_flight,
                "min_blocks_between_unvaults": self.min_blocks_between_unvaults,
                "max_unvaults_in_flight": self.max_unvaults_in_flight}


@dataclass(frozen=True)
class Feerates:
    owner: int = 5
    attacker: int = 2
    bribe: int = 10
    recovery: int = 20

    def to_dict(self) -> dict:
        return {"owner": self.owner, "attacker": self.attacker, "bribe": self.bribe, "recovery": self.recovery}


class RecoveryKind(Enum):
    UNAUTHORIZED_UNVAULT = "unauthorized-unvault"
    ACTIVE_WALLET_COMPROMISE = "active-wallet-compromise"
    FULL = "full"


@dataclass
class HealthReport:
    entries: list = field(default_factory=list)   # (component, status, detail)
    non_destructive: bool = True
    por_txs: list = field(default_factory=list)

    def add(self, component: str, ok: bool, detail: str = "") -> None:
        self.entries.append((component, "Ok" if ok else "Fail", detail))

    @property
    def ok(self) -> bool:
        return self.non_destructive and all(status == "Ok" for _, status, _ in self.entries)

    def failures(self) -> list:
        return [e for e in self.entries if e[1] != "Ok"]

    def lines(self) -> list[str]:
        return [f"{c} {s} {d}".rstrip() for c, s, d in self.entries]


# -- the owner ------------------------------------------------------------------


class OwnerAgent:
    """Honest wallet owner: reacts to watchtower alerts and to failed spends."""

    def __init__(self, world: "World", suspects_recovery: bool = False, freeze_on_recovery_breach: bool = True):
        self.world = world
        self.inbox: list[Alert] = []
        self.authorized: set[bytes] = set()
        self.own_txids: set[bytes] = set()
        self.in_flight: dict[bytes, CovenantPair] = {}
        self.last_unvault_height: int | None = None
        self.frozen = False
        self.recovering = False
        self.halted = False
        self.recovery_compromised = False
        self.active_breached = False
        self.suspects_recovery = suspects_recovery
        self.freeze_on_recovery_breach = freeze_on_recovery_breach
        self.hold_sweeps: set[bytes] = set()
        self.privacy_events: list[str] = []
        self._seen_alerts: set = set()

    # alerts arrive through watchtower channels
    def on_alert(self, alert: Alert) -> None:
        key = (alert.kind, alert.txid)
        self.inbox.append(alert)
        if key in self._seen_alerts:
            return
        self._seen_alerts.add(key)
        world = self.world
        if alert.kind == "unauthorized-unvault":
            pair = world.pair_for_vault_txid(alert.txid)
            if pair is None or self.frozen:
                return
            if alert.txid in self.authorized:
                return
            self.privacy_events.append("avt-exposed")
            if self.suspects_recovery:
                # keep P2RWs private and leave through the timelocked path
                for node in world.watchtowers:
                    node.hold = True
                for p in world.custody_pairs():
                    self.hold_sweeps.add(p.vault_txid)
                    if world.pair_state(p) == "deposit":
                        world.broadcast(p.avt, owner=True)
                return
            if self.recovering:
                return
            self.recovering = True
            self.halted = True
            trace = world.new_trace("recovery (alert)")
            world.recovery_broadcast(trace, RecoveryKind.UNAUTHORIZED_UNVAULT, [pair])
            world.recovery_broadcast(trace, RecoveryKind.FULL)
        elif alert.kind == "deposit-spend":
            if self.frozen or self.recovering:
                return
            self.recovering = True
            self.halted = True
            trace = world.new_trace("race (deposit-spend)")
            for p in world.custody_pairs():
                if world.pair_state(p) == "deposit":
                    world.broadcast(p.avt, owner=True)
                    trace.add("owner", f"broadcast AVT {p.index}")

    def on_event(self, event) -> None:
        if event.kind in ("replaced", "evicted") and event.txid in self.own_txids:
            self.world.failed_txs.add(event.txid)

    def on_block(self, height: int) -> None:
        world = self.world
        for vault_txid in sorted(self.hold_sweeps):
            pair = world.pair_for_vault_txid(vault_txid)
            if pair is None or world.pair_state(pair) != "vault":
                continue
            if world.chain.is_mined(vault_txid) and world.chain.confirmations(vault_txid) >= world.topology.T:
                tx = world.active_spend(pair, world.active_script())
                if world.broadcast(tx, owner=True):
                    self.hold_sweeps.discard(vault_txid)

    def on_failed_spend(self, pair: CovenantPair, trace: ProcessTrace) -> None:
        """Own timelocked spend did not confirm: find out who took the output."""
        world = self.world
        spender = world.seen_spender(pair.vault_outpoint)
        if spender is None:
            trace.add("owner", "inspect vault output", "unspent")
            return
        if spender == compute_txid(pair.p2rw) or spender in {compute_txid(r) for r, _ in pair.revaults}:
            out = OutPoint(spender, 0)
            thief = world.seen_spender(out)
            if thief is not None and thief not in self.own_txids:
                trace.add("owner", "inspect recovery output", "stolen")
                self.recovery_compromised = True
                if self.freeze_on_recovery_breach:
                    self.freeze(trace)
            else:
                trace.add("owner", "inspect vault output", "pushed to recovery (denial of service)")
                self.privacy_events.append("p2rw-exposed")
            return
        trace.add("owner", "inspect vault output", "active-path theft")
        self.active_breached = True
        self.halted = True
        if not self.recovering and not self.frozen:
            self.recovering = True
            world.recovery_broadcast(trace, RecoveryKind.ACTIVE_WALLET_COMPROMISE)

    def freeze(self, trace: ProcessTrace) -> None:
        self.frozen = True
        self.halted = True
        for node in self.world.watchtowers:
            node.hold = True
        trace.add("owner", "freeze remaining vaults")


# -- the world --------------------------------------------------------------------


class World:
    def __init__(self, topology: WalletTopology | None = None, seed: int = 0, mechanism: str = DELETED_KEY,
                 policy: UnvaultPolicy | None = None, feerates: Feerates | None = None,
                 watchtower_variant: Variant = Variant.RESPONDER, revault_layers: int = 1,
                 confirm_depth: int = 1, suspects_recovery: bool = False, freeze_on_recovery_breach: bool = True,
                 vigilant: bool = False):
        if mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        if revault_layers not in (1, 2):
            raise ValueError("revault_layers must be 1 or 2")
        if revault_layers > 1 and mechanism != DELETED_KEY:
            raise ValueError("re-vault layers are built for the deleted-key mechanism")
        self.topology = topology or WalletTopology()
        self.seed = seed
        self.rng = random.Random(seed)
        self.mechanism = mechanism
        self.policy = policy or UnvaultPolicy()
        self.feerates = feerates or Feerates()
        self.revault_layers = revault_layers
        self.confirm_depth = confirm_depth
        self.chain = Chain(miner_bribe=self.feerates.bribe)
        self.fleet = Fleet(self.topology, self.rng)
        self.watchtowers = [WatchtowerNode(f"wt-{i}", watchtower_variant, rate_cap=self.policy.max_funds_in_flight)
                            for i in range(self.topology.W)]
        self.owner = OwnerAgent(self, suspects_recovery, freeze_on_recovery_breach)
        self.owner.vigilant = vigilant
        if suspects_recovery:
            for node in self.watchtowers:
                node.hold = True
        self._fresh_keys: list[KeyPair] = []
        self.observers: list = []
        self.tick_hooks: list[Callable[[int], None]] = []
        self.traces: list[ProcessTrace] = []
        self.pairs: list[CovenantPair] = []
        self.failed_txs: set[bytes] = set()
        self.order_violations: list[str] = []
        self.active_index = 0
        self.recovery_index = 0
        self.recovery_pubkeys: dict[int, list[bytes]] = {}
        self.recovery_override: dict[int, list[bytes]] = {}
        self.attacker_scripts: set[bytes] = set()
        self.payee_scripts: set[bytes] = set()
        self.payee = multisig_script(1, [KeyPair(self.rng.randbytes(32), "payee").public])
        self.payee_scripts.add(self.payee.to_bytes())
        self.interface_tamper: Callable | None = None
        self.role_rotations: list[str] = []
        self.coin_preference = "oldest-first"
        self.initial_funds = 0
        self._pending: deque = deque()
        self._alerts: deque = deque()
        self._settling = False
        self._vault_index: dict[bytes, CovenantPair] = {}
        self.chain.subscribe(self._pending.append)

    # -- clock and dispatch -------------------------------------------------

    def tick(self) -> int:
        now = self.fleet.tick()
        for hook in list(self.tick_hooks):
            hook(now)
        return now

    def new_trace(self, name: str) -> ProcessTrace:
        trace = ProcessTrace(name, world=self)
        self.traces.append(trace)
        return trace

    def settle(self) -> None:
        if self._settling:
            return
        self._settling = True
        try:
            while self._pending or self._alerts:
                if self._alerts:
                    self.owner.on_alert(self._alerts.popleft())
                    continue
                event = self._pending.popleft()
                for node in self.watchtowers:
                    for action in node.observe(event, self.chain):
                        self._node_action(node, action)
                self.owner.on_event(event)
                for obs in list(self.observers):
                    obs.on_event(event)
        finally:
            self._settling = False

    def _node_action(self, node: WatchtowerNode, action) -> None:
        if isinstance(action, BroadcastP2RW):
            self.chain.submit(action.tx, Visibility.PUBLIC)
        elif isinstance(action, Alert):
            self.deliver_alert(node, action)

    def deliver_alert(self, node: WatchtowerNode, alert: Alert) -> bool:
        if not node.alive or not any(not c.compromised for c in node.channels):
            return False
        self._alerts.append(alert)
        return True

    def mine(self, n: int = 1) -> None:
        for _ in range(n):
            self.chain.mine_block()
            self.settle()
            self.refresh_activation()
            self.owner.on_block(self.chain.height)
            for obs in list(self.observers):
                if hasattr(obs, "on_block"):
                    obs.on_block(self.chain.height)
            self.settle()

    def broadcast(self, tx: Transaction, owner: bool = False, visibility: Visibility = Visibility.PUBLIC):
        result = self.chain.submit(tx, visibility)
        if owner and result:
            self.owner.own_txids.add(result.txid)
        self.settle()
        return result

    # -- wallets and fees ---------------------------------------------------

    def fee(self, kind: str, feerate: int | None = None) -> int:
        rate = self.feerates.owner if feerate is None else feerate
        if kind == "p2rw" and feerate is None:
            rate = self.feerates.recovery
        return rate * NOMINAL_VSIZE[kind]

    def active_script(self, index: int | None = None) -> Script:
        return self.fleet.wallet_script(Role.ACTIVE, self.active_index if index is None else index)

    def active_keys(self, index: int | None = None) -> list[bytes]:
        return self.fleet.wallet_keys(Role.ACTIVE, self.active_index if index is None else index)

    def recovery_keys(self, index: int | None = None) -> list[bytes]:
        index = self.recovery_index if index is None else index
        if index in self.recovery_override:
            return list(self.recovery_override[index])
        if index in self.recovery_pubkeys:
            return list(self.recovery_pubkeys[index])
        return self.fleet.wallet_keys(Role.RECOVERY, index)

    def recovery_script(self, index: int | None = None) -> Script:
        return multisig_script(self.topology.m, self.recovery_keys(index))

    def fee_script(self) -> Script:
        return self.fleet.wallet_script(Role.FEE, 0)

    def active_scripts(self) -> dict[bytes, int]:
        return {self.active_script(i).to_bytes(): i for i in range(self.active_index + 1)}

    def owner_coins(self, role: Role = Role.ACTIVE) -> list:
        if role is Role.ACTIVE:
            scripts = self.active_scripts()
        else:
            scripts = {self.fee_script().to_bytes(): 0}
        coins = self.chain.spendable(lambda s: s.to_bytes() in scripts)
        # old address generations first (a rotated-out device can still co-sign them)
        coins.sort(key=lambda oc: (scripts[oc[1].script.to_bytes()], oc[1].created_height < 0,
                                   oc[1].created_height, oc[0]))
        return [(op, coin, scripts[coin.script.to_bytes()]) for op, coin in coins]

    def sign_owner_inputs(self, tx: Transaction, coins, role: Role = Role.ACTIVE) -> Transaction:
        for i, (op, coin, index) in enumerate(coins):
            sigs = self.fleet.sign_wallet(role, index, tx, i, coin.script, coin.amount)
            tx = tx.with_witness(i, cv.witness(sigs, [], coin.script))
        return tx

    # -- covenant bookkeeping -------------------------------------------------

    def register_pair(self, pair: CovenantPair) -> None:
        self.pairs.append(pair)
        self._vault_index[pair.vault_txid] = pair
        for rv, _ in pair.revaults:
            self._vault_index[compute_txid(rv)] = pair

    def seen_spender(self, op: OutPoint) -> bytes | None:
        """Spender as the owner sees it: mined or in the public mempool."""
        return self.chain.spender_of(op, public_only=True)

    def pair_for_vault_txid(self, txid: bytes) -> CovenantPair | None:
        return self._vault_index.get(txid)

    def pair_state(self, pair: CovenantPair) -> str:
        """deposit | vault | revaulted | done"""
        chain = self.chain
        if chain.coin(pair.deposit_outpoint) is not None or chain.in_mempool(pair.deposit_outpoint.txid):
            spender = self.seen_spender(pair.deposit_outpoint)
            if spender is None:
                return "deposit"
        if chain.coin(pair.vault_outpoint) is not None and self.seen_spender(pair.vault_outpoint) is None:
            return "vault"
        if chain.in_mempool(pair.vault_txid) and self.seen_spender(pair.vault_outpoint) is None:
            return "vault"
        for rv, _ in pair.revaults:
            op = OutPoint(compute_txid(rv), 0)
            if self.seen_spender(op) is None and (chain.coin(op) is not None or chain.in_mempool(op.txid)):
                return "revaulted"
        return "done"

    def custody_pairs(self) -> list[CovenantPair]:
        return [p for p in self.pairs if self.pair_state(p) in ("deposit", "vault", "revaulted")]

    def refresh_activation(self) -> None:
        for pair in self.pairs:
            if not pair.deposit_confirmed and self.chain.is_mined(pair.deposit_outpoint.txid):
                if self.chain.confirmations(pair.deposit_outpoint.txid) >= self.confirm_depth:
                    pair.deposit_confirmed = True

    def vault_stage_scripts(self) -> set[bytes]:
        out = set()
        for pair in self.pairs:
            out.add(pair.template.deposit_script.to_bytes())
            out.add(pair.vault_script.to_bytes())
            if pair.next_template is not None:
                out.add(pair.next_template.vault_script.to_bytes())
        return out

    def active_spend(self, pair: CovenantPair, destination: Script, fee: int | None = None,
                     source: Transaction | None = None, template: VaultTemplate | None = None) -> Transaction:
        """Signed timelocked spend of a vault (or layer-2) output by the active wallet.

        Without an explicit fee it pays the owner feerate on the signed size.
        """
        if fee is None:
            probe = self.active_spend(pair, destination, 0, source, template)
            fee = cv.fee_for(probe, self.feerates.owner)
        template = template or pair.template
        src = source or pair.avt
        src_txid = compute_txid(src)
        amount = src.outputs[0].amount
        tx = cv.build_active_spend(src_txid, template, amount, destination, fee)
        index = self._active_index_for(template)
        sigs = self.fleet.sign_wallet(Role.ACTIVE, index, tx, 0, template.vault_script, amount)
        return cv.finalize_active_spend(tx, template, sigs)

    def _active_index_for(self, template: VaultTemplate) -> int:
        for i in range(self.active_index + 1):
            if set(self.active_keys(i)) == set(template.active_keys):
                return i
        raise PolicyError("vault commits to an unknown active address")

    # -- recovery broadcasts (no mining) -----------------------------------------

    def recovery_broadcast(self, trace: ProcessTrace, kind: RecoveryKind, pairs=None) -> int:
        if pairs is None:
            pairs = self.custody_pairs()
        done = 0
        for pair in pairs:
            state = self.pair_state(pair)
            if state in ("done", "revaulted"):
                continue
            if state == "deposit":
                try:
                    _, avt = self.fleet.fetch_act(pair.vault_txid)
                except Lost:
                    trace.add("owner", f"fetch AVT {pair.index}", "lost")
                    continue
                self.broadcast(avt, owner=True)
                trace.add("interface", f"broadcast AVT {pair.index}")
            if self.revault_layers > 1 and pair.revaults:
                rv = pair.revaults[-1][0]
                for node in self.watchtowers:
                    node.authorize_unvault(compute_txid(rv))
                res = self.broadcast(rv, owner=True)
                trace.add("interface", f"broadcast re-vault {pair.index}", res.reason or "accepted")
            else:
                try:
                    p2rw = self.fleet.fetch_p2rw(pair.vault_txid)
                except Lost:
                    trace.add("owner", f"fetch P2RW {pair.index}", "lost")
                    trace.abort("p2rw-lost")
                    return done
                res = self.broadcast(p2rw, owner=True)
                trace.add("interface", f"broadcast P2RW {pair.index}", res.reason or "accepted")
            done += 1
        if self.owner.vigilant:
            self.sweep_recovered(trace)
        if kind is not RecoveryKind.UNAUTHORIZED_UNVAULT and done:
            trace.add("owner", "instantiate new recovery wallet")
            trace.add("owner", "old recovery wallet becomes active wallet")
            self.role_rotations.append(kind.value)
        return done

    def fresh_recovery_script(self) -> Script:
        """A recovery wallet on brand new devices, outside the current fleet."""
        if not self._fresh_keys:
            self._fresh_keys = [KeyPair(self.rng.randbytes(32), f"fresh-recovery-{i}")
                                for i in range(self.topology.n)]
        return multisig_script(self.topology.m, [k.public for k in self._fresh_keys])

    def sweep_recovered(self, trace: ProcessTrace | None = None) -> int:
        """Move pushed-to-recovery outputs on to a fresh wallet (racing any thief)."""
        swept = 0
        for pair in self.pairs:
            p2rw_txid = compute_txid(pair.p2rw)
            if not (self.chain.is_mined(p2rw_txid) or self.chain.in_mempool(p2rw_txid, Visibility.PUBLIC)):
                continue
            op = OutPoint(p2rw_txid, 0)
            if self.seen_spender(op) is not None:
                continue
            out = pair.p2rw.outputs[0]
            index = self._recovery_index_for(out.script)

            def sweep(fee: int) -> Transaction:
                tx = Transaction(cv.TX_VERSION, cv.PAST_LOCKTIME, [TxInput(op, 0)],
                                 [TxOutput(out.amount - fee, self.fresh_recovery_script())])
                sigs = self.fleet.sign_wallet(Role.RECOVERY, index, tx, 0, out.script, out.amount)
                return tx.with_witness(0, cv.witness(sigs, [], out.script))

            res = self.broadcast(sweep(cv.fee_for(sweep(0), self.feerates.owner)), owner=True)
            if trace is not None:
                trace.add("recovery-hms", f"sweep recovered {pair.index}", res.reason or "accepted")
            swept += bool(res)
        return swept

    def _recovery_index_for(self, script: Script) -> int:
        items = set(i for i in script.items if isinstance(i, bytes))
        for i in range(self.recovery_index, -1, -1):
            if set(self.recovery_keys(i)) <= items:
                return i
        raise PolicyError("recovery output does not match any recovery address")

    # -- accounting ---------------------------------------------------------------

    def distribution(self) -> dict:
        attacker = owner = frozen = owner_vault = 0
        vault_scripts = self.vault_stage_scripts()
        for coin in self.chain.utxo.values():
            raw = coin.script.to_bytes()
            if raw in self.attacker_scripts:
                attacker += coin.amount
            elif self.owner.frozen and raw in vault_scripts:
                frozen += coin.amount
            else:
                owner += coin.amount
                if raw not in self.payee_scripts and raw != self.fee_script().to_bytes():
                    owner_vault += coin.amount
        return {"attacker": attacker, "owner": owner, "frozen": frozen, "fees": self.chain.fees_collected,
                "initial": self.chain.deposited, "owner_custody": owner_vault}


# -- processes ------------------------------------------------------------------------


def run_setup(world: World, fail_device: str | None = None) -> ProcessTrace:
    trace = world.new_trace("setup")
    fleet = world.fleet
    if fail_device is not None:
        fleet.hms[fail_device].fail()
    hms = list(fleet.hms.values())
    pairs = len(hms) * (len(hms) - 1) // 2
    trace.add("operator", "establish pairwise channels", str(pairs))
    try:
        for hm in hms:
            if hm.role is Role.VAULT:
                hm.touch("channel")
                continue
            hm.derive_wallet_keys(hm.role.value, 1, 0)
        trace.add("hms", "generate key trees")
    except DeviceFailure as exc:
        trace.add("hms", "generate key trees", f"failed {exc}")
        return trace.abort("device")
    active = world.active_script(0)
    recovery_keys = fleet.wallet_keys(Role.RECOVERY, 0)
    world.recovery_pubkeys[0] = recovery_keys
    recovery = world.recovery_script(0)
    fee = world.fee_script()
    trace.add("hms", "construct multisig addresses")
    for label, script in (("active", active), ("recovery", recovery)):
        presented = world.interface_tamper(script) if world.interface_tamper else script
        if not human_check(fleet.channels, Payload(script.to_bytes(), presented.to_bytes())):
            trace.add("human", f"check {label} address", "fail")
            return trace.abort("human-check")
    trace.add("human", "check addresses")
    a_hex, r_hex = active.to_bytes().hex(), recovery.to_bytes().hex()
    for hm in hms:
        if hm.role in (Role.ACTIVE, Role.VAULT):
            hm.stored_addresses |= {a_hex, r_hex}
        elif hm.role is Role.RECOVERY:
            hm.stored_addresses.add(r_hex)
        else:
            hm.stored_addresses.add(fee.to_bytes().hex())
    trace.add("hms", "store address sets")
    for node in world.watchtowers:
        node.seen.add(sha256(active.to_bytes()))
    trace.add("watchtowers", "initialize authentication material", str(len(world.watchtowers)))
    return trace


def addresses_consistent(world: World) -> bool:
    a_hex = world.active_script(0).to_bytes().hex()
    r_hex = world.recovery_script(0).to_bytes().hex()
    for hm in world.fleet.hms.values():
        if hm.role in (Role.ACTIVE, Role.VAULT) and not {a_hex, r_hex} <= hm.stored_addresses:
            return False
        if hm.role is Role.RECOVERY and r_hex not in hm.stored_addresses:
            return False
    return True


def run_external_payment(world: World, amount: int, penny_test: bool = False, penny: int = 1_000) -> ProcessTrace:
    """An external payer funds the active wallet (optionally with a penny test first)."""
    trace = world.new_trace("external payment")
    script = world.active_script()
    presented = world.interface_tamper(script) if world.interface_tamper else script
    if not human_check(world.fleet.channels, Payload(script.to_bytes(), presented.to_bytes())):
        trace.add("human", "check receiving address", "fail")
        return trace.abort("human-check")
    trace.add("human", "check receiving address")
    if penny_test and amount > penny:
        world.chain.fund(presented, penny)
        trace.add("payer", "penny test", str(penny))
        world.settle()
        if presented.to_bytes() not in world.active_scripts():
            return trace.abort("penny-test")
        trace.add("owner", "confirm penny received")
        amount -= penny
    world.chain.fund(presented, amount)
    world.settle()
    trace.add("payer", "pay", str(amount))
    return trace


def fund_fee_wallet(world: World, amount: int) -> None:
    world.chain.fund(world.fee_script(), amount)
    world.settle()


def vaulting_cost(world: World, partitions) -> int:
    return sum(partitions) + len(partitions) * world.fee("deposit")


def run_vaulting(world: World, partitions, policy: UnvaultPolicy | None = None,
                 misorder: bool = False) -> tuple[list[CovenantPair], ProcessTrace]:
    trace = world.new_trace("vaulting")
    made: list[CovenantPair] = []
    if sum(partitions) + len(partitions) * world.fee("deposit") > sum(c.amount for _, c, _ in world.owner_coins()):
        trace.add("interface", "select active coins", "insufficient")
        return made, trace.abort("funds")
    for amount in partitions:
        pair = _vault_one(world, trace, amount, misorder)
        if pair is None:
            return made, trace
        made.append(pair)
    return made, trace


def _build_deposit(world: World, amount: int, script: Script):
    fee = world.fee("deposit")
    coins, total = [], 0
    for entry in world.owner_coins():
        coins.append(entry)
        total += entry[1].amount
        if total >= amount + fee:
            break
    if total < amount + fee:
        raise cv.Underfunded("active wallet cannot fund the deposit")
    outputs = [TxOutput(amount, script)]
    if total - amount - fee > 0:
        outputs.append(TxOutput(total - amount - fee, world.active_script()))
    tx = Transaction(cv.TX_VERSION, cv.PAST_LOCKTIME, [TxInput(op, 0) for op, _, _ in coins], outputs)
    return tx, coins


def _vault_one(world: World, trace: ProcessTrace, amount: int, misorder: bool) -> CovenantPair | None:
    fleet, tp = world.fleet, world.topology
    index = len(world.pairs)
    vault_hms = fleet.by_role(Role.VAULT)
    ctv = world.mechanism == CTV
    key_ids: list[str] = []
    if ctv:
        entropy = world.rng.randbytes(32)
        trace.add("interface", f"[{index}] 1 draw template entropy")
    else:
        try:
            key_ids = [hm.gen_ephemeral_keypair() for hm in vault_hms]
        except DeviceFailure as exc:
            trace.add("vault-hms", f"[{index}] 1 generate ephemeral keys", f"failed {exc}")
            trace.abort("device")
            return None
        trace.add("vault-hms", f"[{index}] 1 generate ephemeral keys")
    publics = [hm.ephemeral_public(k) for hm, k in zip(vault_hms, key_ids)]
    active_keys = world.active_keys()
    rec_keys = world.recovery_keys()
    vault_fee, p2rw_fee = world.fee("vault"), world.fee("p2rw")
    if ctv:
        plan = cv.build_ctv_plan(amount, tp.T, active_keys, tp.j, rec_keys, tp.m, entropy, vault_fee, p2rw_fee)
        deposit_script = plan.deposit_script
    else:
        deposit_script = multisig_script(tp.p, publics)
    trace.add("interface", f"[{index}] 2 target address")
    deposit_tx, coins = _build_deposit(world, amount, deposit_script)
    deposit_txid = compute_txid(deposit_tx)
    trace.add("interface", f"[{index}] 3 build deposit (unbroadcast)")
    signed_deposit = None
    if misorder:
        signed_deposit = world.sign_owner_inputs(deposit_tx, coins)
        world.broadcast(signed_deposit, owner=True)
        world.order_violations.append(f"pair {index}: deposit broadcast before key deletion")
        trace.add("interface", f"[{index}] broadcast deposit", "order-violation")
    dep_op = OutPoint(deposit_txid, 0)
    if ctv:
        avt = plan.instantiate("vault", dep_op).with_witness(0, cv.ctv_witness(deposit_script, False))
        p2rw = plan.instantiate("p2rw", OutPoint(compute_txid(avt), 0)).with_witness(
            0, cv.ctv_witness(plan.vault_script, False, nested=True))
        template = cv.ctv_template_for(plan, dep_op)
        pair = CovenantPair(avt, p2rw, template, plan.recovery_script, amount, 0, index, CTV)
        trace.add("interface", f"[{index}] 4 instantiate committed templates")
        trace.add("vault-hms", f"[{index}] 5 verify templates against plan")
    else:
        template = VaultTemplate(tp.T, tuple(active_keys), tp.j, tuple(publics), tp.p, dep_op, amount,
                                 fee=vault_fee, layers=world.revault_layers)
        avt_u = cv.build_vault_tx(template)
        avt_txid = compute_txid(avt_u)
        vault_amount = avt_u.outputs[0].amount
        p2rw_u = cv.build_p2rw_tx(template, avt_txid, rec_keys, tp.m, p2rw_fee)
        unsigned = [("avt", avt_u, 0, template.deposit_script, amount, SighashMode.ALL),
                    ("p2rw", p2rw_u, 0, template.vault_script, vault_amount, SighashMode.ALL_ANYONECANPAY)]
        next_template = None
        if world.revault_layers > 1:
            next_template = VaultTemplate(tp.T, tuple(active_keys), tp.j, tuple(publics), tp.p,
                                          OutPoint(avt_txid, 0), vault_amount, fee=0, layer=2, layers=2)
            for tier, fee in enumerate(cv.DEFAULT_FEE_TIERS):
                rv = cv.build_revault_tx(template, avt_txid, vault_amount, next_template, fee)
                l2 = cv.build_p2rw_tx(next_template, compute_txid(rv), rec_keys, tp.m, p2rw_fee,
                                      vault_amount=rv.outputs[0].amount)
                unsigned.append((f"revault{tier}", rv, 0, template.vault_script, vault_amount, SighashMode.ALL))
                unsigned.append((f"l2p2rw{tier}", l2, 0, next_template.vault_script, rv.outputs[0].amount,
                                 SighashMode.ALL_ANYONECANPAY))
        trace.add("interface", f"[{index}] 4 construct unsigned covenant transactions")
        sigs: dict[str, list] = {name: [] for name, *_ in unsigned}
        first = vault_hms[:tp.p - 1]
        for hm, public in zip(first, publics):
            for name, tx, i, script, amt, mode in unsigned:
                sigs[name].append((publics.index(public), hm.sign(public, tx, i, script, amt, mode)))
        trace.add("vault-hms", f"[{index}] 5 partial signatures from p-1 devices", str(len(first)))
        pair = None
        rest = list(zip(vault_hms[tp.p - 1:], key_ids[tp.p - 1:], publics[tp.p - 1:]))
        deletions = 0
        for hm, key_id, public in rest:
            if hm.failed:
                trace.add(hm.hm_id, f"[{index}] 6 sign/store/delete", "device failed")
                continue
            done = {}
            for name, tx, i, script, amt, mode in unsigned:
                own = (publics.index(public), hm.sign(public, tx, i, script, amt, mode))
                ordered = [s for _, s in sorted(sigs[name] + [own])]
                done[name] = ordered
            avt = cv.finalize_vault_tx(avt_u, template, done["avt"])
            p2rw = cv.finalize_p2rw_tx(p2rw_u, template, done["p2rw"])
            if pair is None:
                revaults = []
                for tier in range(len(cv.DEFAULT_FEE_TIERS) if world.revault_layers > 1 else 0):
                    rv_u = next(tx for n, tx, *_ in unsigned if n == f"revault{tier}")
                    l2_u = next(tx for n, tx, *_ in unsigned if n == f"l2p2rw{tier}")
                    rv = rv_u.with_witness(0, cv.witness(done[f"revault{tier}"], cv.revault_selectors(),
                                                         template.vault_script))
                    l2 = cv.finalize_p2rw_tx(l2_u, next_template, done[f"l2p2rw{tier}"])
                    revaults.append((rv, l2))
                pair = CovenantPair(avt, p2rw, template, cv.recovery_script(rec_keys, tp.m), amount,
                                    tp.required_deletions, index, DELETED_KEY, revaults=revaults,
                                    next_template=next_template)
            ok = verify_input(p2rw, 0, template.vault_script, vault_amount, 0)
            if not ok:
                trace.add(hm.hm_id, f"[{index}] 6 validate", "invalid")
                continue
            fleet.store_act(hm.hm_id, pair)
            receipt = hm.delete_key(key_id, fleet.clock)
            fleet.record_receipt(receipt)
            pair.record_deletion(hm.hm_id)
            deletions += 1
            trace.add(hm.hm_id, f"[{index}] 6 sign, validate, store, delete, notify")
        if pair is None or deletions < tp.required_deletions:
            trace.abort("activation")
            return None
    # 7: redundancy top-up; every device that took part deletes
    holders = world.fleet.avt_holders.get(pair.vault_txid, [])
    for hm, key_id in zip(vault_hms, key_ids or [None] * len(vault_hms)):
        if hm.failed:
            continue
        if len(holders) < tp.R and hm.hm_id not in holders:
            fleet.store_act(hm.hm_id, pair)
            holders = world.fleet.avt_holders[pair.vault_txid]
        if key_id is not None and not hm.ephemeral[key_id].deleted:
            receipt = hm.delete_key(key_id, fleet.clock)
            fleet.record_receipt(receipt)
            pair.record_deletion(hm.hm_id)
    trace.add("vault-hms", f"[{index}] 7 redundancy top-up", f"R={world.fleet.redundancy(pair.vault_txid)}")
    # 8: watchtowers and P2RW storage
    world.register_pair(pair)
    register_with_watchtowers(world, pair)
    for device in fleet.p2rw_devices:
        if not device.failed:
            fleet.store_p2rw(device, pair)
    trace.add("interface", f"[{index}] 8 register with watchtowers")
    # 9: final signature on the deposit (human-checked) and broadcast
    presented = world.interface_tamper(deposit_script) if world.interface_tamper else deposit_script
    if not human_check(fleet.channels, Payload(deposit_script.to_bytes(), presented.to_bytes())):
        trace.add("human", f"[{index}] 9 check deposit", "fail")
        trace.abort("human-check")
        return None
    if signed_deposit is None:
        if presented is not deposit_script:
            deposit_tx = Transaction(deposit_tx.version, deposit_tx.locktime, deposit_tx.inputs,
                                     (TxOutput(amount, presented),) + tuple(deposit_tx.outputs[1:]))
        signed_deposit = world.sign_owner_inputs(deposit_tx, coins)
        if len(pair.deletions) < pair.required_deletions:
            world.order_violations.append(f"pair {index}: deposit broadcast before activation prerequisites")
        res = world.broadcast(signed_deposit, owner=True)
        trace.add("active-hms", f"[{index}] 9 sign and broadcast deposit", res.reason or "accepted")
    else:
        trace.add("active-hms", f"[{index}] 9 deposit already broadcast", "order-violation")
        trace.abort("order")
    return pair


def register_with_watchtowers(world: World, pair: CovenantPair) -> None:
    for node in world.watchtowers:
        response = pair.p2rw
        if pair.revaults:
            response = pair.revaults[-1][0]
        node.register_watch(pair.vault_txid, pair.deposit_outpoint, response, pair.vault_amount,
                            height=world.chain.height)
        for rv, l2 in pair.revaults:
            rv_txid = compute_txid(rv)
            node.register_watch(rv_txid, pair.vault_outpoint, l2, rv.outputs[0].amount, height=world.chain.height,
                                revault=True)
            # re-vaults are the owner's own response: never answered with a P2RW
            node.authorize_unvault(rv_txid)


def unvault_allowed(world: World, pair: CovenantPair, policy: UnvaultPolicy) -> str:
    owner = world.owner
    if len(owner.in_flight) >= policy.max_unvaults_in_flight:
        return "in-flight count"
    in_flight = sum(p.vault_amount for p in owner.in_flight.values())
    if policy.max_funds_in_flight is not None and in_flight + pair.vault_amount > policy.max_funds_in_flight:
        return "in-flight funds"
    if owner.last_unvault_height is not None and \
            world.chain.height - owner.last_unvault_height < policy.min_blocks_between_unvaults:
        return "spacing"
    return ""


def run_unvault(world: World, vault_txid: bytes, policy: UnvaultPolicy | None = None,
                destination: Script | None = None, notify: bool = True, max_blocks: int | None = None) -> ProcessTrace:
    """Broadcast an AVT, wait out the timelock, spend with the active wallet."""
    policy = policy or world.policy
    trace = world.new_trace("un-vault")
    owner, chain = world.owner, world.chain
    pair = world.pair_for_vault_txid(vault_txid)
    if pair is None:
        return trace.abort("unknown")
    if pair.activation is not Activation.ACTIVE:
        return trace.abort("inactive")
    if owner.halted:
        return trace.abort("halted")
    why = unvault_allowed(world, pair, policy)
    if why:
        trace.add("owner", "check un-vault policy", why)
        return trace.abort("rate")
    try:
        _, avt = world.fleet.fetch_act(vault_txid)
    except Lost:
        trace.add("interface", "fetch AVT", "lost")
        return trace.abort("lost")
    trace.add("interface", "fetch AVT")
    if notify and any(n.variant is Variant.RESPONDER for n in world.watchtowers):
        for node in world.watchtowers:
            node.authorize_unvault(vault_txid)
        trace.add("interface", "notify watchtowers")
    owner.authorized.add(vault_txid)
    owner.in_flight[vault_txid] = pair
    owner.last_unvault_height = chain.height
    res = world.broadcast(avt, owner=True)
    trace.add("interface", "broadcast AVT", res.reason or "accepted")
    try:
        return _finish_unvault(world, trace, pair, destination, max_blocks)
    finally:
        owner.in_flight.pop(vault_txid, None)


def _finish_unvault(world, trace, pair, destination, max_blocks) -> ProcessTrace:
    owner, chain, tp = world.owner, world.chain, world.topology
    limit = max_blocks if max_blocks is not None else tp.T + 3
    for _ in range(limit + 1):
        if world.seen_spender(pair.vault_outpoint) is not None or not (
                chain.is_mined(pair.vault_txid) or chain.in_mempool(pair.vault_txid)):
            break
        if chain.is_mined(pair.vault_txid) and chain.confirmations(pair.vault_txid) >= tp.T:
            break
        if tp.T == 0 and chain.in_mempool(pair.vault_txid):
            break
        world.mine()
    gone = world.seen_spender(pair.vault_outpoint)
    if gone is not None and not chain.is_mined(gone):
        world.mine()  # let the unexpected spend settle before inspecting it
    alerted = any(a.txid == pair.vault_txid for a in owner.inbox)
    trace.add("watchtowers", "notify owner of un-vault attempt", "alerted" if alerted else "silent")
    if world.seen_spender(pair.vault_outpoint) is not None or not (
            chain.is_mined(pair.vault_txid) or chain.in_mempool(pair.vault_txid)):
        trace.add("owner", "active spend", "vault output gone")
        owner.on_failed_spend(pair, trace)
        return trace.abort("spend-failed")
    intended = destination or world.payee
    presented = world.interface_tamper(intended) if world.interface_tamper else intended
    check = human_check(world.fleet.channels, Payload(intended.to_bytes(), presented.to_bytes()))
    if not check:
        trace.add("human", "check payment", "fail")
        return trace.abort("human-check")
    trace.add("human", "check payment")
    tx = world.active_spend(pair, presented)
    res = world.broadcast(tx, owner=True)
    trace.add("active-hms", "sign and broadcast timelocked spend", res.reason or "accepted")
    if not res:
        owner.on_failed_spend(pair, trace)
        return trace.abort("spend-failed")
    world.mine()
    if not chain.is_mined(res.txid):
        trace.add("owner", "spend confirmation", "failed")
        owner.on_failed_spend(pair, trace)
        return trace.abort("spend-failed")
    trace.add("owner", "spend confirmed")
    if presented is not intended:
        # the payee reports the payment missing; stop and investigate
        owner.halted = True
        trace.add("payee", "payment not received")
    return trace


def run_recovery(world: World, kind: RecoveryKind, vault_txids=None) -> ProcessTrace:
    trace = world.new_trace(f"recovery ({kind.value})")
    if kind is RecoveryKind.UNAUTHORIZED_UNVAULT:
        if vault_txids is None:
            vault_txids = [p.vault_txid for p in world.pairs
                           if p.vault_txid not in world.owner.authorized and
                           (world.chain.is_mined(p.vault_txid) or world.chain.in_mempool(p.vault_txid))]
        pairs = [world.pair_for_vault_txid(t) for t in vault_txids]
        pairs = [p for p in pairs if p is not None and world.pair_state(p) == "vault"]
    else:
        pairs = world.custody_pairs()
    if not pairs:
        trace.add("owner", "no trigger", "no-op")
        return trace
    world.owner.recovering = True
    world.owner.halted = True
    world.recovery_broadcast(trace, kind, pairs)
    if not trace.completed:
        return trace
    world.mine()
    trace.add("chain", "mine", f"height {world.chain.height}")
    return trace


def run_device_rotation(world: World, failed_hm: str, revault: bool = True) -> ProcessTrace:
    trace = world.new_trace("device rotation")
    fleet = world.fleet
    old = fleet.hms[failed_hm]
    old.fail()
    trace.add("owner", f"detect failure of {failed_hm}")
    new = fleet.replace_device(failed_hm)
    trace.add("operator", f"set up replacement {new.hm_id}", "channels and key tree")
    if old.role is Role.ACTIVE:
        world.active_index += 1
        script = world.active_script()
        for hm in fleet.by_role(Role.ACTIVE) + fleet.by_role(Role.VAULT):
            if not hm.failed:
                hm.stored_addresses.add(script.to_bytes().hex())
        world.coin_preference = "oldest-first"
        trace.add("active-hms", "new active address set", f"generation {world.active_index}")
        trace.add("owner", "prefer old UTXOs for new payments")
    elif old.role is Role.RECOVERY:
        # survivors' keys come from the copies stored on the active HMs
        stored = world.recovery_pubkeys[world.recovery_index]
        position = [hm.hm_id for hm in fleet.by_role(Role.RECOVERY)].index(new.hm_id)
        keys = list(stored)
        world.recovery_index += 1
        keys[position] = new.derive_wallet_keys("recovery", 1, world.recovery_index)[0]
        world.recovery_pubkeys[world.recovery_index] = keys
        world.recovery_override[world.recovery_index] = keys
        r_hex = world.recovery_script().to_bytes().hex()
        for hm in fleet.by_role(Role.ACTIVE):
            hm.stored_addresses.add(r_hex)
        trace.add("active-hms", "new recovery address from stored public keys")
        if revault:
            moved = _rate_limited_revault(world, trace)
            trace.add("owner", "re-vault to new recovery address", str(moved))
    elif old.role is Role.VAULT:
        trace.add("vault-hms", "new vault-wallet address set for future vaults")
    else:
        trace.add("fee-hms", "new fee address")
    return trace


def _rate_limited_revault(world: World, trace: ProcessTrace) -> int:
    moved = 0
    for pair in list(world.custody_pairs()):
        if world.pair_state(pair) != "deposit" or pair.activation is not Activation.ACTIVE:
            continue
        sub = run_unvault(world, pair.vault_txid, destination=world.active_script())
        trace.add("owner", f"un-vault {pair.index}", sub.terminal)
        if not sub.completed:
            break
        spend_amount = world.active_spend(pair, world.active_script()).outputs[0].amount
        new, vt = run_vaulting(world, [spend_amount - world.fee("deposit")])
        trace.add("owner", f"re-vault {pair.index}", vt.terminal)
        world.mine()
        moved += 1
    return moved


def run_health_check(world: World, nonce: bytes | None = None) -> HealthReport:
    report = HealthReport()
    chain, fleet = world.chain, world.fleet
    before = chain.snapshot()
    nonce = nonce if nonce is not None else sha256(b"vaultlab/health" + chain.height.to_bytes(8, "little"))
    unspendable = OutPoint(sha256(b"vaultlab/proof-of-reserves" + nonce), 0xFFFFFFFF)
    for hm in fleet.hms.values():
        if hm.role is Role.VAULT:
            continue
        if hm.failed:
            report.add(hm.hm_id, False, "device failed")
            continue
        public = hm.derive_wallet_keys(hm.role.value, 1, 0)[0]
        script = multisig_script(1, [public])
        por = Transaction(cv.TX_VERSION, cv.PAST_LOCKTIME, [TxInput(unspendable, 0)], [TxOutput(0, script)])
        sig = hm.sign(public, por, 0, script, 0)
        por = por.with_witness(0, cv.witness([sig], [], script))
        signed_ok = bool(verify_input(por, 0, script, 0, 0))
        res = chain.submit(por)
        report.por_txs.append(por)
        report.add(hm.hm_id, signed_ok and not res and res.reason == "missing-input",
                   f"proof-of-reserves {res.reason or 'accepted'}")
    for (holder, txid), digest in sorted(fleet.act_digests.items()):
        hm = fleet.hms.get(holder)
        if hm is None or hm.failed:
            report.add(f"{holder}/{txid.hex()[:16]}", False, "device failed")
            continue
        answer = hm.commitment(txid, nonce)
        expected = sha256(nonce + digest)
        report.add(f"{holder}/{txid.hex()[:16]}", answer == expected,
                   "possession commitment" if answer == expected else "commitment mismatch")
    expected_txids = set()
    for pair in world.pairs:
        expected_txids.add(pair.vault_txid)
        expected_txids |= {compute_txid(rv) for rv, _ in pair.revaults}
    for node in world.watchtowers:
        outcome = node.consistency_check(expected_txids, expected_txids if node.variant is Variant.RESPONDER else ())
        report.add(node.node_id, bool(outcome), outcome.status + (" " + "; ".join(outcome.details) if outcome.details else ""))
        report.add(f"{node.node_id}/heartbeat", node.heartbeat())
    world.settle()
    report.non_destructive = chain.snapshot() == before
    return report


def proof_of_reserves_valid(por: Transaction, public: bytes) -> bool:
    """Signature on a proof-of-reserves transaction checks against the wallet key."""
    script = multisig_script(1, [public])
    return bool(verify_input(por, 0, script, 0, 0))


def audit_deletions(world: World) -> list[str]:
    """Ephemeral keys that are still live after their vaulting step finished."""
    return [f"{hm.hm_id}:{k}" for hm in world.fleet.by_role(Role.VAULT) if not hm.failed for k in hm.live_keys()]


def bootstrap(world: World, partitions, fee_budget: int = 50_000) -> list[CovenantPair]:
    """Set-up, funding, vaulting and one confirmation: a ready deployment."""
    setup = run_setup(world)
    if not setup.completed:
        raise RuntimeError(f"setup failed: {setup.reason}")
    run_external_payment(world, vaulting_cost(world, partitions))
    if fee_budget:
        fund_fee_wallet(world, fee_budget)
    pairs, trace = run_vaulting(world, partitions)
    if not trace.completed:
        raise RuntimeError(f"vaulting failed: {trace.reason}")
    world.mine()
    world.initial_funds = world.chain.deposited
    return pairs
