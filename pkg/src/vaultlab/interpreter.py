"""Minimal script interpreter for vault, recovery and template-hash scripts."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

from .script import MalformedScript, Op, Script, decode_num, small_int_value
from .txkit import Signature, SighashMode, Transaction, sighash_digest, sha256, verify

MAX_PUBKEYS = 16


class Verdict(NamedTuple):
    accepted: bool
    reason: str = ""

    def __bool__(self):
        return self.accepted


ACCEPT = Verdict(True)


def reject(reason: str) -> Verdict:
    return Verdict(False, reason)


@dataclass(frozen=True)
class ExecContext:
    spending_tx: Transaction
    input_index: int
    confirmations_of_prevout_tx: int = 0
    witness_stack: tuple = field(default=())
    spent_amount: int = 0

    def __post_init__(self):
        if self.confirmations_of_prevout_tx < 0:
            raise ValueError("confirmations must be >= 0")
        object.__setattr__(self, "witness_stack", tuple(self.witness_stack))


class _Fail(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def _truthy(item: bytes) -> bool:
    for i, b in enumerate(item):
        if b:
            # negative zero is false
            return not (i == len(item) - 1 and b == 0x80)
    return False


def _pop(stack: list) -> bytes:
    if not stack:
        raise _Fail("stack")
    return stack.pop()


def _pop_num(stack: list) -> int:
    try:
        return decode_num(_pop(stack), max_len=4)
    except ValueError:
        raise _Fail("number") from None


def _push_value(item) -> bytes:
    if isinstance(item, bytes):
        return item
    value = small_int_value(item)
    return b"" if value == 0 else bytes([value])


def eval_script(script: Script, ctx: ExecContext) -> Verdict:
    """Run ``script`` over the witness stack of ``ctx``.

    Accepts iff execution ends with exactly one truthy item on the stack.
    Raises ``MalformedScript`` for unbalanced conditionals.
    """
    script.check_balanced()
    stack = list(ctx.witness_stack)
    exec_stack: list[bool] = []
    try:
        for item in script.items:
            executing = all(exec_stack)
            if item == Op.OP_IF:
                if executing:
                    sel = _pop(stack)
                    if sel not in (b"", b"\x01"):
                        raise _Fail("minimalif")
                    exec_stack.append(sel == b"\x01")
                else:
                    exec_stack.append(False)
                continue
            if item == Op.OP_ELSE:
                exec_stack[-1] = not exec_stack[-1]
                continue
            if item == Op.OP_ENDIF:
                exec_stack.pop()
                continue
            if not executing:
                continue
            if isinstance(item, bytes) or small_int_value(item) is not None:
                stack.append(_push_value(item))
            elif item == Op.OP_DROP:
                _pop(stack)
            elif item == Op.OP_CHECKSEQUENCEVERIFY:
                _check_sequence(stack, ctx)
            elif item == Op.OP_CHECKMULTISIG:
                stack.append(b"\x01" if _check_multisig(stack, script, ctx) else b"")
            elif item == Op.OP_CHECKTEMPLATEVERIFY:
                if not stack:
                    raise _Fail("stack")
                if not eval_ctv(stack[-1], ctx):
                    raise _Fail("ctv")
            else:
                raise _Fail(f"opcode {item!r}")
    except _Fail as exc:
        return reject(exc.reason)
    if len(stack) != 1:
        return reject("cleanstack" if stack else "stack")
    if not _truthy(stack[0]):
        return reject("false")
    return ACCEPT


def _check_sequence(stack: list, ctx: ExecContext) -> None:
    if not stack:
        raise _Fail("stack")
    try:
        required = decode_num(stack[-1], max_len=5)
    except ValueError:
        raise _Fail("number") from None
    if required < 0:
        raise _Fail("csv")
    tx = ctx.spending_tx
    if tx.version < 2:
        raise _Fail("csv")
    if tx.inputs[ctx.input_index].sequence < required:
        raise _Fail("csv")
    if ctx.confirmations_of_prevout_tx < required:
        raise _Fail("csv")


def _check_multisig(stack: list, script: Script, ctx: ExecContext) -> bool:
    n = _pop_num(stack)
    if not 0 <= n <= MAX_PUBKEYS:
        raise _Fail("pubkey-count")
    pubkeys = [_pop(stack) for _ in range(n)][::-1]
    m = _pop_num(stack)
    if not 0 <= m <= n:
        raise _Fail("sig-count")
    sigs = [_pop(stack) for _ in range(m)][::-1]
    # signatures must appear in pubkey order
    ki = 0
    for raw in sigs:
        try:
            sig, mode = Signature.decode(raw)
        except ValueError:
            return False
        digest = sighash_digest(ctx.spending_tx, ctx.input_index, mode, script, ctx.spent_amount)
        while ki < len(pubkeys) and not verify(pubkeys[ki], digest, sig):
            ki += 1
        if ki == len(pubkeys):
            return False
        ki += 1
    return True


# -- template hash -----------------------------------------------------------


def ctv_hash(tx: Transaction, input_index: int) -> bytes:
    """Template hash over version, locktime, scriptSigs (if any), input count,
    sequences, output count, outputs and the executing input index."""
    h = hashlib.sha256()
    h.update(struct.pack("<II", tx.version, tx.locktime))
    if any(i.script_sig for i in tx.inputs):
        sigs = b"".join(struct.pack("<I", len(i.script_sig)) + i.script_sig for i in tx.inputs)
        h.update(sha256(sigs))
    h.update(struct.pack("<I", len(tx.inputs)))
    h.update(sha256(b"".join(struct.pack("<I", i.sequence) for i in tx.inputs)))
    h.update(struct.pack("<I", len(tx.outputs)))
    outs = bytearray()
    for o in tx.outputs:
        code = o.script.to_bytes()
        outs += struct.pack("<QI", o.amount, len(code)) + code
    h.update(sha256(bytes(outs)))
    h.update(struct.pack("<I", input_index))
    return sha256(h.digest())


def eval_ctv(commitment: bytes, ctx: ExecContext) -> Verdict:
    if len(commitment) != 32:
        return reject("ctv")
    if ctv_hash(ctx.spending_tx, ctx.input_index) != commitment:
        return reject("ctv")
    return ACCEPT


# -- input verification ------------------------------------------------------


def verify_input(tx: Transaction, index: int, spent_script: Script, spent_amount: int,
                 confirmations: int) -> Verdict:
    """Witness-script spend: the last witness item must be the spent script."""
    stack = tx.witnesses[index]
    if not stack:
        return reject("witness")
    if stack[-1] != spent_script.to_bytes():
        return reject("witness-script")
    ctx = ExecContext(tx, index, confirmations, stack[:-1], spent_amount)
    try:
        return eval_script(spent_script, ctx)
    except MalformedScript:
        return reject("malformed")


__all__ = [
    "ACCEPT", "ExecContext", "Verdict", "ctv_hash", "eval_ctv", "eval_script",
    "reject", "verify_input", "SighashMode",
]
