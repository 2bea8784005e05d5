"""Script representation: opcodes, pushes, byte and text encodings.

Only the opcodes used by the vault, recovery and template-hash scripts are
supported. A script is an immutable tuple of items, each either an ``Op`` or a
``bytes`` push.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Union


class Op(IntEnum):
    OP_0 = 0x00
    OP_PUSHDATA1 = 0x4C
    OP_PUSHDATA2 = 0x4D
    OP_1 = 0x51
    OP_2 = 0x52
    OP_3 = 0x53
    OP_4 = 0x54
    OP_5 = 0x55
    OP_6 = 0x56
    OP_7 = 0x57
    OP_8 = 0x58
    OP_9 = 0x59
    OP_10 = 0x5A
    OP_11 = 0x5B
    OP_12 = 0x5C
    OP_13 = 0x5D
    OP_14 = 0x5E
    OP_15 = 0x5F
    OP_16 = 0x60
    OP_IF = 0x63
    OP_ELSE = 0x67
    OP_ENDIF = 0x68
    OP_DROP = 0x75
    OP_CHECKMULTISIG = 0xAE
    OP_CHECKSEQUENCEVERIFY = 0xB2
    OP_CHECKTEMPLATEVERIFY = 0xB3


# pushdata opcodes are encoding details, never script items
_ITEM_OPS = {op for op in Op if op not in (Op.OP_PUSHDATA1, Op.OP_PUSHDATA2)}
_BY_NAME = {op.name: op for op in _ITEM_OPS}
_BY_NAME["OP_CTV"] = Op.OP_CHECKTEMPLATEVERIFY
_BY_NAME["OP_CSV"] = Op.OP_CHECKSEQUENCEVERIFY
_BY_NAME["OP_FALSE"] = Op.OP_0
_BY_NAME["OP_TRUE"] = Op.OP_1

Item = Union[Op, bytes]


class MalformedScript(ValueError):
    """Raised for scripts that cannot be decoded or have unbalanced conditionals."""


def small_int_op(n: int) -> Op:
    if not 0 <= n <= 16:
        raise ValueError(f"{n} is not a small integer")
    return Op.OP_0 if n == 0 else Op(Op.OP_1 + n - 1)


def small_int_value(op: Op) -> int | None:
    if op == Op.OP_0:
        return 0
    if Op.OP_1 <= op <= Op.OP_16:
        return op - Op.OP_1 + 1
    return None


def encode_num(n: int) -> bytes:
    """Minimal little-endian sign-magnitude encoding used for script numbers."""
    if n == 0:
        return b""
    neg = n < 0
    n = abs(n)
    out = bytearray()
    while n:
        out.append(n & 0xFF)
        n >>= 8
    if out[-1] & 0x80:
        out.append(0x80 if neg else 0x00)
    elif neg:
        out[-1] |= 0x80
    return bytes(out)


def decode_num(data: bytes, max_len: int = 5) -> int:
    if len(data) > max_len:
        raise ValueError("script number overflow")
    if not data:
        return 0
    if data[-1] & 0x7F == 0 and (len(data) == 1 or not data[-2] & 0x80):
        raise ValueError("non-minimal script number")
    n = int.from_bytes(data, "little")
    if data[-1] & 0x80:
        return -(n & ~(0x80 << (8 * (len(data) - 1))))
    return n


def num_item(n: int) -> Item:
    """The canonical script item pushing the number ``n``."""
    if 0 <= n <= 16:
        return small_int_op(n)
    return encode_num(n)


def _is_minimal_num(data: bytes) -> bool:
    if not 0 < len(data) <= 4:
        return False
    try:
        value = decode_num(data)
    except ValueError:
        return False
    return not 0 <= value <= 16 and encode_num(value) == data


@dataclass(frozen=True)
class Script:
    items: tuple = ()

    def __init__(self, items: Iterable = ()):
        norm = []
        for item in items:
            if isinstance(item, Op):
                if item not in _ITEM_OPS:
                    raise MalformedScript(f"{item.name} is not a script item")
                norm.append(item)
            elif isinstance(item, (bytes, bytearray)):
                norm.append(bytes(item) if item else Op.OP_0)
            elif isinstance(item, int):
                norm.append(num_item(item))
            else:
                raise TypeError(f"bad script item {item!r}")
        object.__setattr__(self, "items", tuple(norm))

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __add__(self, other: "Script") -> "Script":
        return Script(self.items + tuple(other.items))

    # -- byte encoding ----------------------------------------------------

    def to_bytes(self) -> bytes:
        out = bytearray()
        for item in self.items:
            if isinstance(item, Op):
                out.append(item)
            elif len(item) == 0:
                out.append(Op.OP_0)
            elif len(item) < Op.OP_PUSHDATA1:
                out.append(len(item))
                out += item
            elif len(item) <= 0xFF:
                out += bytes([Op.OP_PUSHDATA1, len(item)]) + item
            elif len(item) <= 0xFFFF:
                out.append(Op.OP_PUSHDATA2)
                out += len(item).to_bytes(2, "little") + item
            else:
                raise MalformedScript("push too large")
        return bytes(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Script":
        items: list = []
        i = 0
        while i < len(raw):
            b = raw[i]
            i += 1
            if 0 < b < Op.OP_PUSHDATA1:
                size = b
            elif b == Op.OP_PUSHDATA1:
                if i >= len(raw):
                    raise MalformedScript("truncated pushdata length")
                size = raw[i]
                i += 1
            elif b == Op.OP_PUSHDATA2:
                if i + 2 > len(raw):
                    raise MalformedScript("truncated pushdata length")
                size = int.from_bytes(raw[i:i + 2], "little")
                i += 2
            else:
                try:
                    items.append(Op(b))
                except ValueError:
                    raise MalformedScript(f"unknown opcode 0x{b:02x}") from None
                continue
            if i + size > len(raw):
                raise MalformedScript("truncated push")
            items.append(raw[i:i + size])
            i += size
        return cls(items)

    # -- text encoding ----------------------------------------------------

    def to_text(self) -> str:
        """Render as mnemonics; numbers in decimal, other pushes as ``<hex>``."""
        words = []
        for item in self.items:
            if isinstance(item, Op):
                value = small_int_value(item)
                words.append(str(value) if value is not None else item.name)
            elif _is_minimal_num(item):
                words.append(str(decode_num(item)))
            else:
                words.append(f"<{item.hex()}>")
        return " ".join(words)

    @classmethod
    def from_text(cls, text: str) -> "Script":
        items: list = []
        for word in text.split():
            if word.startswith("<") and word.endswith(">"):
                items.append(bytes.fromhex(word[1:-1]))
            elif word in _BY_NAME:
                items.append(_BY_NAME[word])
            else:
                try:
                    items.append(num_item(int(word)))
                except ValueError:
                    raise MalformedScript(f"unknown token {word!r}") from None
        return cls(items)

    def __str__(self):
        return self.to_text()

    def check_balanced(self) -> None:
        depth = 0
        for item in self.items:
            if item == Op.OP_IF:
                depth += 1
            elif item == Op.OP_ELSE:
                if depth == 0:
                    raise MalformedScript("OP_ELSE outside conditional")
            elif item == Op.OP_ENDIF:
                if depth == 0:
                    raise MalformedScript("OP_ENDIF outside conditional")
                depth -= 1
        if depth:
            raise MalformedScript("unbalanced OP_IF")


def multisig_script(threshold: int, pubkeys: Iterable[bytes]) -> Script:
    """``threshold <pk1> ... <pkN> N OP_CHECKMULTISIG``."""
    pubkeys = list(pubkeys)
    if not 1 <= threshold <= len(pubkeys):
        raise ValueError(f"bad multisig threshold {threshold}-of-{len(pubkeys)}")
    return Script([threshold, *pubkeys, len(pubkeys), Op.OP_CHECKMULTISIG])
