"""Deterministic single-process chain: UTXO set, mempool, explicit mining.

Blocks are produced only when ``mine_block`` is called. Transactions enter
either the public mempool (relayed, observable) or the miner-private pool
(seen by observers only once mined). Mining orders eligible transactions by
priority, which is the feerate plus, for miner-private transactions, a bribe
bonus. Ties fall to the lexicographically smaller txid.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, NamedTuple

from .interpreter import verify_input
from .script import Script
from .txkit import OutPoint, Transaction, WellFormednessError, compute_txid


class Visibility(Enum):
    PUBLIC = "public"
    MINER_PRIVATE = "miner-private"


class NotFound(KeyError):
    pass


class Submission(NamedTuple):
    accepted: bool
    reason: str = ""
    txid: bytes = b""
    replaced: tuple = ()

    def __bool__(self):
        return self.accepted


@dataclass(frozen=True)
class Coin:
    amount: int
    script: Script
    created_height: int
    txid: bytes


@dataclass
class MempoolEntry:
    tx: Transaction
    txid: bytes
    fee: int
    feerate: Fraction
    visibility: Visibility
    bribe: int = 0

    @property
    def priority(self) -> Fraction:
        if self.visibility is Visibility.MINER_PRIVATE:
            return self.feerate + self.bribe
        return self.feerate


@dataclass(frozen=True)
class ChainEvent:
    """One log line: ``height kind txid``. ``tx`` rides along for observers."""
    seq: int
    height: int
    kind: str
    txid: bytes
    tx: Transaction | None = field(default=None, compare=False, repr=False)

    def line(self) -> str:
        return f"{self.height} {self.kind} {self.txid.hex()}"


class Chain:
    def __init__(self, miner_bribe: int = 0):
        self.height = 0
        self.blocks: list[tuple[int, list[bytes]]] = []
        self.utxo: dict[OutPoint, Coin] = {}
        self.mempool: dict[bytes, MempoolEntry] = {}
        self.mined: dict[bytes, int] = {}
        self.txs: dict[bytes, Transaction] = {}
        self.events: list[ChainEvent] = []
        self.deposited = 0
        self.fees_collected = 0
        self.miner_bribe = miner_bribe
        self.spent_log: list[tuple[OutPoint, bytes, int]] = []
        self._fund_counter = 0
        self._listeners: list[Callable[[ChainEvent], None]] = []

    # -- funding ------------------------------------------------------------

    def fund(self, script: Script, amount: int) -> OutPoint:
        """Create a confirmed coin out of thin air (an external deposit)."""
        self._fund_counter += 1
        txid = hashlib.sha256(b"vaultlab/fund" + self._fund_counter.to_bytes(8, "little")).digest()
        op = OutPoint(txid, 0)
        self.utxo[op] = Coin(amount, script, self.height, txid)
        self.mined[txid] = self.height
        self.deposited += amount
        self._log("fund", txid)
        return op

    # -- lookups ------------------------------------------------------------

    def confirmations(self, txid: bytes) -> int:
        if txid in self.mined:
            return self.height - self.mined[txid] + 1
        if txid in self.mempool:
            return 0
        raise NotFound(txid.hex())

    def get_tx(self, txid: bytes) -> Transaction:
        if txid in self.txs:
            return self.txs[txid]
        if txid in self.mempool:
            return self.mempool[txid].tx
        raise NotFound(txid.hex())

    def is_mined(self, txid: bytes) -> bool:
        return txid in self.mined

    def in_mempool(self, txid: bytes, visibility: Visibility | None = None) -> bool:
        entry = self.mempool.get(txid)
        return entry is not None and (visibility is None or entry.visibility is visibility)

    def public_mempool(self) -> list[bytes]:
        return sorted(t for t, e in self.mempool.items() if e.visibility is Visibility.PUBLIC)

    def spender_of(self, op: OutPoint, public_only: bool = False) -> bytes | None:
        """Txid spending ``op`` in the chain or mempool (if any)."""
        for txid, entry in self.mempool.items():
            if public_only and entry.visibility is not Visibility.PUBLIC:
                continue
            if any(i.outpoint == op for i in entry.tx.inputs):
                return txid
        for spent, txid, _h in self.spent_log:
            if spent == op:
                return txid
        return None

    def coin(self, op: OutPoint) -> Coin | None:
        return self.utxo.get(op)

    def spendable(self, predicate: Callable[[Script], bool]) -> list[tuple[OutPoint, Coin]]:
        """Outputs matching ``predicate`` that no public mempool tx spends yet.

        Includes outputs of public mempool transactions (coin height -1).
        """
        public = [e for e in self.mempool.values() if e.visibility is Visibility.PUBLIC]
        spent = {i.outpoint for e in public for i in e.tx.inputs}
        out = [(op, c) for op, c in self.utxo.items() if predicate(c.script) and op not in spent]
        for e in public:
            for vout, o in enumerate(e.tx.outputs):
                op = OutPoint(e.txid, vout)
                if predicate(o.script) and op not in spent:
                    out.append((op, Coin(o.amount, o.script, -1, e.txid)))
        return sorted(out, key=lambda pair: (pair[1].created_height < 0, pair[1].created_height, pair[0]))

    def balance(self, predicate: Callable[[Script], bool]) -> int:
        return sum(c.amount for c in self.utxo.values() if predicate(c.script))

    def subscribe(self, listener: Callable[[ChainEvent], None]) -> None:
        self._listeners.append(listener)

    # -- submission ---------------------------------------------------------

    def _resolve(self, op: OutPoint, visibility: Visibility) -> tuple[Coin, int] | None:
        """Coin and confirmations for ``op`` from the chain or a visible mempool parent."""
        coin = self.utxo.get(op)
        if coin is not None:
            return coin, self.height - coin.created_height + 1
        parent = self.mempool.get(op.txid)
        if parent is None:
            return None
        if parent.visibility is Visibility.MINER_PRIVATE and visibility is Visibility.PUBLIC:
            return None
        if op.vout >= len(parent.tx.outputs):
            return None
        out = parent.tx.outputs[op.vout]
        return Coin(out.amount, out.script, -1, op.txid), 0

    def _conflicts(self, tx: Transaction, visibility: Visibility) -> set[bytes]:
        spent = {i.outpoint for i in tx.inputs}
        return {t for t, e in self.mempool.items()
                if e.visibility is visibility and spent & {i.outpoint for i in e.tx.inputs}}

    def validate(self, tx: Transaction, visibility: Visibility = Visibility.PUBLIC) -> Submission:
        """Dry-run of ``submit``: never mutates state."""
        try:
            txid = compute_txid(tx)
        except WellFormednessError:
            return Submission(False, "malformed")
        if txid in self.mined or txid in self.mempool:
            return Submission(False, "duplicate", txid)
        if len({i.outpoint for i in tx.inputs}) != len(tx.inputs):
            return Submission(False, "duplicate-input", txid)
        in_value = 0
        for index, txin in enumerate(tx.inputs):
            resolved = self._resolve(txin.outpoint, visibility)
            if resolved is None:
                return Submission(False, "missing-input", txid)
            coin, confs = resolved
            in_value += coin.amount
            verdict = verify_input(tx, index, coin.script, coin.amount, confs)
            if not verdict:
                return Submission(False, "csv-premature" if verdict.reason == "csv" else "script", txid)
        fee = in_value - sum(o.amount for o in tx.outputs)
        if fee < 0:
            return Submission(False, "fee", txid)
        feerate = Fraction(fee, tx.vsize())
        losers = self._conflicts(tx, visibility)
        for loser in losers:
            if self.mempool[loser].feerate >= feerate:
                return Submission(False, "conflict", txid)
        return Submission(True, "", txid, tuple(sorted(losers)))

    def submit(self, tx: Transaction, visibility: Visibility = Visibility.PUBLIC,
               bribe: int | None = None) -> Submission:
        result = self.validate(tx, visibility)
        if not result:
            return result
        txid = result.txid
        for loser in result.replaced:
            self._evict(loser, "replaced")
        fee = sum(self._resolve(i.outpoint, visibility)[0].amount for i in tx.inputs) - \
            sum(o.amount for o in tx.outputs)
        if bribe is None:
            bribe = self.miner_bribe if visibility is Visibility.MINER_PRIVATE else 0
        self.mempool[txid] = MempoolEntry(tx, txid, fee, Fraction(fee, tx.vsize()), visibility, bribe)
        if visibility is Visibility.PUBLIC:
            self._log("mempool", txid, tx)
        return result

    def _evict(self, txid: bytes, kind: str) -> None:
        entry = self.mempool.pop(txid, None)
        if entry is None:
            return
        if entry.visibility is Visibility.PUBLIC:
            self._log(kind, txid, entry.tx)
        for child in [t for t, e in self.mempool.items()
                      if any(i.outpoint.txid == txid for i in e.tx.inputs)]:
            self._evict(child, kind)

    # -- mining -------------------------------------------------------------

    def mine_block(self) -> list[bytes]:
        selected: list[bytes] = []
        new_height = self.height + 1
        while True:
            ready = []
            for txid, entry in self.mempool.items():
                if all(i.outpoint in self.utxo for i in entry.tx.inputs):
                    ready.append(entry)
            if not ready:
                break
            best = max(ready, key=lambda e: (e.priority, _neg_bytes(e.txid)))
            self._apply(best, new_height)
            selected.append(best.txid)
            # drop everything that now double-spends
            for txid in [t for t, e in self.mempool.items()
                         if any(i.outpoint not in self.utxo and i.outpoint.txid not in self.mempool
                                for i in e.tx.inputs)]:
                self._evict(txid, "evicted")
        self.height = new_height
        self.blocks.append((new_height, selected))
        for txid in selected:
            self._log("mined", txid, self.txs[txid])
        self._log("block", new_height.to_bytes(32, "little"))
        return selected

    def _apply(self, entry: MempoolEntry, height: int) -> None:
        del self.mempool[entry.txid]
        for txin in entry.tx.inputs:
            self.utxo.pop(txin.outpoint)
            self.spent_log.append((txin.outpoint, entry.txid, height))
        for vout, out in enumerate(entry.tx.outputs):
            self.utxo[OutPoint(entry.txid, vout)] = Coin(out.amount, out.script, height, entry.txid)
        self.mined[entry.txid] = height
        self.txs[entry.txid] = entry.tx
        self.fees_collected += entry.fee

    def mine(self, n: int = 1) -> list[bytes]:
        out = []
        for _ in range(n):
            out += self.mine_block()
        return out

    # -- logging / auditing ---------------------------------------------------

    def _log(self, kind: str, txid: bytes, tx: Transaction | None = None) -> None:
        event = ChainEvent(len(self.events), self.height, kind, txid, tx)
        self.events.append(event)
        for listener in list(self._listeners):
            listener(event)

    def event_log(self) -> str:
        return "".join(e.line() + "\n" for e in self.events if e.kind != "block")

    def utxo_total(self) -> int:
        return sum(c.amount for c in self.utxo.values())

    def conserved(self) -> bool:
        return self.utxo_total() + self.fees_collected == self.deposited

    def snapshot(self) -> bytes:
        """Digest of the full chain, UTXO and mempool state."""
        h = hashlib.sha256()
        h.update(self.height.to_bytes(8, "little"))
        for height, txids in self.blocks:
            h.update(height.to_bytes(8, "little") + b"".join(txids))
        for op in sorted(self.utxo):
            coin = self.utxo[op]
            h.update(op.txid + op.vout.to_bytes(4, "little") + coin.amount.to_bytes(8, "little"))
        for txid in sorted(self.mempool):
            h.update(txid + self.mempool[txid].visibility.value.encode())
        h.update(len(self.events).to_bytes(8, "little"))
        return h.digest()

    def csv_audit(self) -> list[str]:
        """Spends that violated a relative timelock (should always be empty)."""
        problems = []
        for outpoint, txid, height in self.spent_log:
            tx = self.txs.get(txid)
            if tx is None or outpoint.txid not in self.txs:
                continue
            parent = self.txs[outpoint.txid]
            out = parent.outputs[outpoint.vout]
            index = next(i for i, txin in enumerate(tx.inputs) if txin.outpoint == outpoint)
            confs = height - self.mined[outpoint.txid]
            if not verify_input(tx, index, out.script, out.amount, confs):
                problems.append(f"{txid.hex()} spent {outpoint} at {confs} confirmations")
        return problems


def _neg_bytes(b: bytes) -> bytes:
    # larger is preferred in max(); invert so the smaller txid wins ties
    return bytes(255 - x for x in b)
