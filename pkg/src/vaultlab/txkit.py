"""Transactions, canonical serialization, digests and the abstract signer.

Serialization layout (all integers little-endian)::

    version u32 | n_in u32 | n_in * (txid[32] vout u32 script_sig(len u32 + bytes) sequence u32)
    | n_out u32 | n_out * (amount u64 script(len u32 + bytes)) | locktime u32

Witnesses are serialized separately (``serialize_witness``) and never feed the
txid. ``to_bytes`` joins both halves for storage and golden vectors.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Sequence

from .script import Script

SIG_LEN = 97  # public(32) + digest(32) + tag(32) + mode(1)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def tagged_hash(tag: str, data: bytes) -> bytes:
    t = sha256(tag.encode())
    return sha256(t + t + data)


class WellFormednessError(ValueError):
    pass


class KeyDeleted(RuntimeError):
    """Raised when a deleted secret is asked to sign."""


@dataclass(frozen=True, order=True)
class OutPoint:
    txid: bytes
    vout: int

    def __post_init__(self):
        if len(self.txid) != 32:
            raise WellFormednessError("outpoint txid must be 32 bytes")

    def __str__(self):
        return f"{self.txid.hex()}:{self.vout}"


@dataclass(frozen=True)
class TxInput:
    outpoint: OutPoint
    sequence: int = 0
    script_sig: bytes = b""


@dataclass(frozen=True)
class TxOutput:
    amount: int
    script: Script

    def __post_init__(self):
        if self.amount < 0:
            raise WellFormednessError("negative output amount")


@dataclass(frozen=True)
class Transaction:
    version: int
    locktime: int
    inputs: tuple
    outputs: tuple
    witnesses: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        wit = tuple(tuple(bytes(i) for i in w) for w in self.witnesses)
        if not wit:
            wit = tuple(() for _ in self.inputs)
        if len(wit) != len(self.inputs):
            raise WellFormednessError("one witness stack per input required")
        object.__setattr__(self, "witnesses", wit)

    def check_well_formed(self) -> None:
        if not self.inputs:
            raise WellFormednessError("transaction has no inputs")
        if not self.outputs:
            raise WellFormednessError("transaction has no outputs")

    # -- serialization ----------------------------------------------------

    def serialize(self) -> bytes:
        """Witness-free serialization: the txid preimage."""
        out = bytearray(struct.pack("<II", self.version, len(self.inputs)))
        for txin in self.inputs:
            out += txin.outpoint.txid + struct.pack("<I", txin.outpoint.vout)
            out += struct.pack("<I", len(txin.script_sig)) + txin.script_sig
            out += struct.pack("<I", txin.sequence)
        out += struct.pack("<I", len(self.outputs))
        for txout in self.outputs:
            script = txout.script.to_bytes()
            out += struct.pack("<QI", txout.amount, len(script)) + script
        out += struct.pack("<I", self.locktime)
        return bytes(out)

    def serialize_witness(self) -> bytes:
        out = bytearray()
        for stack in self.witnesses:
            out += struct.pack("<I", len(stack))
            for item in stack:
                out += struct.pack("<I", len(item)) + item
        return bytes(out)

    def to_bytes(self) -> bytes:
        return self.serialize() + self.serialize_witness()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Transaction":
        r = _Reader(raw)
        version, n_in = r.unpack("<II")
        inputs = []
        for _ in range(n_in):
            txid = r.take(32)
            (vout,) = r.unpack("<I")
            script_sig = r.take(r.unpack("<I")[0])
            (sequence,) = r.unpack("<I")
            inputs.append(TxInput(OutPoint(txid, vout), sequence, script_sig))
        (n_out,) = r.unpack("<I")
        outputs = []
        for _ in range(n_out):
            amount, size = r.unpack("<QI")
            outputs.append(TxOutput(amount, Script.from_bytes(r.take(size))))
        (locktime,) = r.unpack("<I")
        witnesses = []
        if not r.done():
            for _ in range(n_in):
                (n_items,) = r.unpack("<I")
                witnesses.append(tuple(r.take(r.unpack("<I")[0]) for _ in range(n_items)))
        if not r.done():
            raise WellFormednessError("trailing bytes after transaction")
        return cls(version, locktime, inputs, outputs, witnesses)

    # -- identity ---------------------------------------------------------

    @property
    def txid(self) -> bytes:
        return compute_txid(self)

    def vsize(self) -> int:
        base = len(self.serialize())
        weight = 4 * base + len(self.serialize_witness())
        return -(-weight // 4)

    # -- functional updates -----------------------------------------------

    def with_witness(self, index: int, stack: Iterable[bytes]) -> "Transaction":
        wit = list(self.witnesses)
        wit[index] = tuple(stack)
        return replace(self, witnesses=tuple(wit))

    def with_input(self, txin: TxInput, stack: Iterable[bytes] = ()) -> "Transaction":
        return replace(self, inputs=self.inputs + (txin,),
                       witnesses=self.witnesses + (tuple(stack),))

    def stripped(self) -> "Transaction":
        return replace(self, witnesses=())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise WellFormednessError("truncated transaction")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> bool:
        return self.pos == len(self.raw)


def compute_txid(tx: Transaction) -> bytes:
    tx.check_well_formed()
    return sha256(sha256(tx.serialize()))


# -- sighash ---------------------------------------------------------------


class SighashMode(IntEnum):
    ALL = 0x01
    ALL_ANYONECANPAY = 0x81


def sighash_digest(tx: Transaction, input_index: int, mode: SighashMode,
                   spent_script: Script, spent_amount: int) -> bytes:
    if not 0 <= input_index < len(tx.inputs):
        raise IndexError(f"input index {input_index} out of range")
    mode = SighashMode(mode)
    txin = tx.inputs[input_index]
    h = hashlib.sha256()
    h.update(struct.pack("<II", tx.version, tx.locktime))
    if mode == SighashMode.ALL:
        prevouts = b"".join(i.outpoint.txid + struct.pack("<I", i.outpoint.vout)
                            for i in tx.inputs)
        sequences = b"".join(struct.pack("<I", i.sequence) for i in tx.inputs)
        h.update(struct.pack("<I", len(tx.inputs)) + sha256(prevouts) + sha256(sequences))
    h.update(txin.outpoint.txid + struct.pack("<II", txin.outpoint.vout, txin.sequence))
    code = spent_script.to_bytes()
    h.update(struct.pack("<I", len(code)) + code + struct.pack("<Q", spent_amount))
    outputs = b"".join(struct.pack("<Q", o.amount) + _lp(o.script.to_bytes()) for o in tx.outputs)
    h.update(struct.pack("<I", len(tx.outputs)) + sha256(outputs))
    h.update(bytes([mode]))
    return sha256(h.digest())


def _lp(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


# -- abstract signature scheme -----------------------------------------------


class KeyedHashScheme:
    """Keyed-hash signatures: ``public = H(secret)``, ``tag = H(secret || digest)``.

    Verification consults a registry mapping each public commitment to its
    secret. The registry plays the role of the verification equation of a real
    scheme; no simulated actor reads it, so a key erased from its device can
    still be verified but never used to sign again.
    """

    def __init__(self):
        self._registry: dict[bytes, bytes] = {}

    def public_for(self, secret: bytes) -> bytes:
        public = tagged_hash("vaultlab/pub", secret)
        self._registry[public] = secret
        return public

    def tag(self, secret: bytes, digest: bytes) -> bytes:
        return tagged_hash("vaultlab/sig", secret + digest)

    def verify(self, public: bytes, digest: bytes, tag: bytes) -> bool:
        secret = self._registry.get(public)
        if secret is None:
            return False
        return hmac.compare_digest(self.tag(secret, digest), tag)


scheme = KeyedHashScheme()


def use_scheme(new_scheme) -> None:
    """Swap the signature backend (anything with public_for/tag/verify)."""
    global scheme
    scheme = new_scheme


@dataclass(frozen=True)
class Signature:
    public: bytes
    digest: bytes
    tag: bytes

    def encode(self, mode: SighashMode = SighashMode.ALL) -> bytes:
        return self.public + self.digest + self.tag + bytes([mode])

    @classmethod
    def decode(cls, raw: bytes) -> tuple["Signature", SighashMode]:
        if len(raw) != SIG_LEN:
            raise ValueError("bad signature length")
        return cls(raw[:32], raw[32:64], raw[64:96]), SighashMode(raw[96])


class KeyPair:
    """A signing key. ``erase()`` destroys the secret irrevocably."""

    __slots__ = ("key_id", "_secret", "public")

    def __init__(self, secret: bytes, key_id: str | None = None):
        if len(secret) != 32:
            raise ValueError("secret must be 32 bytes")
        self._secret: bytes | None = secret
        self.public = scheme.public_for(secret)
        self.key_id = key_id or self.public.hex()[:16]

    @classmethod
    def generate(cls, rng=None, key_id: str | None = None) -> "KeyPair":
        secret = rng.randbytes(32) if rng is not None else os.urandom(32)
        return cls(secret, key_id)

    @property
    def deleted(self) -> bool:
        return self._secret is None

    @property
    def secret(self) -> bytes:
        if self._secret is None:
            raise KeyDeleted(self.key_id)
        return self._secret

    def erase(self) -> None:
        self._secret = None

    def copy(self) -> "KeyPair":
        """An independent copy (what an adversary holds after exfiltration)."""
        return KeyPair(self.secret, self.key_id)

    def sign(self, digest: bytes) -> Signature:
        return sign(self, digest)

    def __repr__(self):
        state = "deleted" if self.deleted else "live"
        return f"KeyPair({self.key_id}, {state})"


def sign(keypair: KeyPair, digest: bytes) -> Signature:
    return Signature(keypair.public, digest, scheme.tag(keypair.secret, digest))


def verify(public: bytes, digest: bytes, sig: Signature) -> bool:
    return sig.public == public and sig.digest == digest and scheme.verify(public, digest, sig.tag)


def sign_input(keypair: KeyPair, tx: Transaction, index: int, spent_script: Script,
               spent_amount: int, mode: SighashMode = SighashMode.ALL) -> bytes:
    """Witness-encoded signature for one input."""
    digest = sighash_digest(tx, index, mode, spent_script, spent_amount)
    return sign(keypair, digest).encode(mode)


def placeholder_sig() -> bytes:
    return bytes(SIG_LEN)


def total_out(tx: Transaction) -> int:
    return sum(o.amount for o in tx.outputs)


def read_golden(lines: Sequence[str]) -> list[tuple[Transaction, bytes]]:
    """Parse ``serialized_hex, txid_hex`` records."""
    records = []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        raw_hex, txid_hex = (part.strip() for part in line.split(","))
        records.append((Transaction.from_bytes(bytes.fromhex(raw_hex)), bytes.fromhex(txid_hex)))
    return records


def write_golden(txs: Iterable[Transaction]) -> str:
    return "".join(f"{tx.to_bytes().hex()}, {compute_txid(tx).hex()}\n" for tx in txs)
