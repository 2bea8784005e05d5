"""Watchtower nodes: notification and responder variants."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

from .chain import Visibility
from .fleet import Channel
from .txkit import OutPoint, Transaction, compute_txid


class Variant(Enum):
    NOTIFICATION = "notification"
    RESPONDER = "responder"


class Rejected(RuntimeError):
    pass


class Alert(NamedTuple):
    height: int
    node_id: str
    kind: str
    txid: bytes

    def line(self) -> str:
        return f"{self.height} {self.node_id} {self.kind} {self.txid.hex()}"


class BroadcastP2RW(NamedTuple):
    vault_txid: bytes
    tx: Transaction


class CheckOutcome(NamedTuple):
    status: str            # ok | mismatch | unreachable
    details: tuple = ()

    def __bool__(self):
        return self.status == "ok"


OK = CheckOutcome("ok")


@dataclass
class _Watch:
    deposit_outpoint: OutPoint
    amount: int


class WatchtowerNode:
    def __init__(self, node_id: str, variant: Variant = Variant.RESPONDER, channels=None,
                 rate_cap: int | None = None, rate_window: int = 6):
        self.node_id = node_id
        self.variant = variant
        self.channels: list[Channel] = channels if channels is not None else [
            Channel(f"{node_id}/in-band", "in-band"), Channel(f"{node_id}/oob", "oob")]
        self.watched_txids: dict[bytes, _Watch] = {}
        self.watched_outpoints: dict[OutPoint, set[bytes]] = {}
        self.stored_p2rw: dict[bytes, Transaction] = {}
        self.revault_outpoints: set[OutPoint] = set()
        self.authorized_unvaults: set[bytes] = set()
        self.alive = True
        self.compromised = False
        self.compromised_by_adversary = False  # keys/storage leaked; may still run honestly
        self.hold = False  # owner asked the node not to auto-broadcast
        self.rate_cap = rate_cap
        self.rate_window = rate_window
        self.log: list[Alert] = []
        self.broadcasts: list[bytes] = []
        self.seen: set[bytes] = set()
        self._handled: set[bytes] = set()
        self._unvaults: list[tuple[int, int]] = []

    def __repr__(self):
        return f"WatchtowerNode({self.node_id}, {self.variant.value})"

    @property
    def reachable(self) -> bool:
        return self.alive and any(not c.compromised for c in self.channels)

    @property
    def functional(self) -> bool:
        return self.alive and not self.compromised

    # -- owner messages -------------------------------------------------------

    def register_watch(self, vault_txid: bytes, deposit_outpoint: OutPoint, p2rw: Transaction | None = None,
                       amount: int = 0, authenticated: bool = True, height: int = 0,
                       revault: bool = False) -> list[Alert]:
        if not authenticated:
            raise Rejected("unauthenticated registration")
        if not self.alive:
            return []
        self.watched_txids[vault_txid] = _Watch(deposit_outpoint, amount)
        self.watched_outpoints.setdefault(deposit_outpoint, set()).add(vault_txid)
        if revault:
            # a vault output: the timelocked active spend is legitimate
            self.revault_outpoints.add(deposit_outpoint)
        self.seen.add(vault_txid)
        warnings = []
        if self.variant is Variant.RESPONDER:
            if p2rw is None:
                warnings.append(Alert(height, self.node_id, "missing-p2rw", vault_txid))
            else:
                self.stored_p2rw[vault_txid] = p2rw
        self.log += warnings
        return warnings

    def unregister(self, vault_txid: bytes) -> None:
        watch = self.watched_txids.pop(vault_txid, None)
        if watch is not None:
            self.watched_outpoints.get(watch.deposit_outpoint, set()).discard(vault_txid)
        self.stored_p2rw.pop(vault_txid, None)

    def authorize_unvault(self, txid: bytes, authenticated: bool = True) -> None:
        if not authenticated:
            raise Rejected("unauthenticated un-vault notice")
        if self.alive:
            self.authorized_unvaults.add(txid)

    # -- chain observation ----------------------------------------------------

    def observe(self, event, chain=None) -> list:
        """React to one chain event; returns Alert / BroadcastP2RW actions."""
        if not self.functional or event.tx is None or event.kind not in ("mempool", "mined"):
            return []
        if chain is not None and not _on_chain(chain, event.txid):
            return []  # fake un-vault: not actually in the mempool or chain
        tx = event.tx
        txid = event.txid
        actions = []
        for txin in tx.inputs:
            expected = self.watched_outpoints.get(txin.outpoint)
            if not expected:
                continue
            if txid not in expected:
                if txin.outpoint in self.revault_outpoints:
                    continue
                key = b"spend" + txid
                if key not in self._handled:
                    self._handled.add(key)
                    actions.append(Alert(event.height, self.node_id, "deposit-spend", txid))
                continue
            vault_txid = txid
            if vault_txid in self._handled:
                continue
            self._handled.add(vault_txid)
            authorized = vault_txid in self.authorized_unvaults
            if (self.variant is Variant.RESPONDER and not authorized and not self.hold
                    and vault_txid in self.stored_p2rw):
                actions.append(BroadcastP2RW(vault_txid, self.stored_p2rw[vault_txid]))
                self.broadcasts.append(vault_txid)
            actions.append(Alert(event.height, self.node_id,
                                 "unvault" if authorized else "unauthorized-unvault", vault_txid))
            actions += self._rate(event.height, vault_txid)
        self.log += [a for a in actions if isinstance(a, Alert)]
        return actions

    def _rate(self, height: int, vault_txid: bytes) -> list[Alert]:
        self._unvaults.append((height, self.watched_txids[vault_txid].amount))
        if self.rate_cap is None:
            return []
        recent = sum(a for h, a in self._unvaults if h > height - self.rate_window)
        if recent > self.rate_cap:
            return [Alert(height, self.node_id, "rate-exceeded", vault_txid)]
        return []

    # -- health ---------------------------------------------------------------

    def consistency_check(self, expected_txids, expected_p2rw_ids=()) -> CheckOutcome:
        if not self.reachable:
            return CheckOutcome("unreachable", (self.node_id,))
        details = []
        for txid in sorted(set(expected_txids) - set(self.watched_txids)):
            details.append(f"unwatched {txid.hex()}")
        for txid in sorted(set(self.watched_txids) - set(expected_txids)):
            details.append(f"unexpected {txid.hex()}")
        if self.variant is Variant.RESPONDER:
            held = {vt for vt, tx in self.stored_p2rw.items()}
            for txid in sorted(set(expected_p2rw_ids) - held):
                details.append(f"missing-p2rw {txid.hex()}")
        return CheckOutcome("mismatch", tuple(details)) if details else OK

    def heartbeat(self) -> bool:
        return self.reachable


def _on_chain(chain, txid: bytes) -> bool:
    return chain.is_mined(txid) or chain.in_mempool(txid, Visibility.PUBLIC)


def alert_log(nodes) -> str:
    alerts = sorted((a for n in nodes for a in n.log), key=lambda a: (a.height, a.node_id, a.kind, a.txid))
    return "".join(a.line() + "\n" for a in alerts)


def p2rw_id(tx: Transaction) -> bytes:
    return compute_txid(tx)
