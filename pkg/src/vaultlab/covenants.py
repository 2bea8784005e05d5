"""Builders for deposit, vault, push-to-recovery-wallet and re-vault transactions.

Two covenant mechanisms are supported: pre-signed transactions whose signing
keys are deleted, and template-hash commitments (``OP_CHECKTEMPLATEVERIFY``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .interpreter import ctv_hash
from .script import Op, Script, multisig_script, small_int_value
from .txkit import (
    KeyPair, OutPoint, SighashMode, Transaction, TxInput, TxOutput, compute_txid,
    placeholder_sig, sha256, sign_input, tagged_hash,
)

TX_VERSION = 2
PAST_LOCKTIME = 0  # a height that has always passed
DEFAULT_FEE_TIERS = (500, 2_000, 8_000)  # satoshis

SELECT_IF = b"\x01"
SELECT_ELSE = b""


class Underfunded(ValueError):
    pass


class LayerError(ValueError):
    pass


# -- scripts ----------------------------------------------------------------


def vault_script(timelock: int, active_keys: Sequence[bytes], active_threshold: int,
                 path_keys: Sequence[bytes], path_threshold: int) -> Script:
    """Two-path vault: timelocked active multisig, or immediate recovery path."""
    return Script([
        Op.OP_IF,
        timelock, Op.OP_CHECKSEQUENCEVERIFY, Op.OP_DROP,
        *multisig_script(active_threshold, active_keys),
        Op.OP_ELSE,
        *multisig_script(path_threshold, path_keys),
        Op.OP_ENDIF,
    ])


def revault_script(timelock: int, active_keys: Sequence[bytes], active_threshold: int,
                   path_keys: Sequence[bytes], path_threshold: int) -> Script:
    """Three-path vault: timelocked active spend, re-vault, or recovery.

    Selectors (top of stack first): ``1`` active; ``0 1`` re-vault; ``0 0`` recovery.
    """
    path = multisig_script(path_threshold, path_keys)
    return Script([
        Op.OP_IF,
        timelock, Op.OP_CHECKSEQUENCEVERIFY, Op.OP_DROP,
        *multisig_script(active_threshold, active_keys),
        Op.OP_ELSE,
        Op.OP_IF, *path, Op.OP_ELSE, *path, Op.OP_ENDIF,
        Op.OP_ENDIF,
    ])


def recovery_script(recovery_keys: Sequence[bytes], threshold: int) -> Script:
    return multisig_script(threshold, recovery_keys)


def script_label(script: Script) -> str:
    """Storage label of the script-hash wrapper (informational only)."""
    return "wsh:" + sha256(script.to_bytes()).hex()


# -- signing helpers ----------------------------------------------------------


def multisig_sigs(tx: Transaction, index: int, keys: Iterable[KeyPair], script: Script,
                  amount: int, mode: SighashMode = SighashMode.ALL) -> list[bytes]:
    """Signatures from ``keys``, ordered to match the pubkey order in ``script``."""
    order = {item: n for n, item in enumerate(script.items) if isinstance(item, bytes)}
    keys = sorted(keys, key=lambda k: order.get(k.public, len(order)))
    return [sign_input(k, tx, index, script, amount, mode) for k in keys]


def witness(sigs: Sequence[bytes], selectors: Sequence[bytes], script: Script) -> tuple:
    return (*sigs, *selectors, script.to_bytes())


def _placeholder_stack(n_sigs: int, selectors: Sequence[bytes], script: Script) -> tuple:
    return witness([placeholder_sig()] * n_sigs, selectors, script)


def fee_for(tx: Transaction, feerate: int) -> int:
    return feerate * tx.vsize()


# -- deleted-key vault --------------------------------------------------------


@dataclass(frozen=True)
class VaultTemplate:
    timelock: int
    active_keys: tuple
    active_threshold: int
    path_keys: tuple
    path_threshold: int
    deposit_outpoint: OutPoint
    deposit_amount: int
    fee: int = 200
    change: tuple | None = None  # (amount, script)
    layer: int = 1
    layers: int = 1

    def __post_init__(self):
        if not 1 <= self.active_threshold <= len(self.active_keys):
            raise ValueError("need 1 <= j <= k")
        if not 1 <= self.path_threshold <= len(self.path_keys):
            raise ValueError("need 1 <= p <= t")
        if self.timelock < 0:
            raise ValueError("negative timelock")

    @property
    def deposit_script(self) -> Script:
        return multisig_script(self.path_threshold, self.path_keys)

    @property
    def has_revault_path(self) -> bool:
        return self.layer < self.layers

    @property
    def vault_script(self) -> Script:
        build = revault_script if self.has_revault_path else vault_script
        return build(self.timelock, self.active_keys, self.active_threshold,
                     self.path_keys, self.path_threshold)

    @property
    def amount(self) -> int:
        """Vault output amount after the pre-signed fee and optional change."""
        tx = build_vault_tx(self)
        return tx.outputs[0].amount


def _vault_skeleton(template: VaultTemplate, amount: int) -> Transaction:
    outputs = [TxOutput(amount, template.vault_script)]
    if template.change is not None:
        outputs.append(TxOutput(template.change[0], template.change[1]))
    return Transaction(TX_VERSION, PAST_LOCKTIME, [TxInput(template.deposit_outpoint, 0)], outputs)


def build_vault_tx(template: VaultTemplate) -> Transaction:
    change = template.change[0] if template.change is not None else 0
    fee = template.fee
    amount = template.deposit_amount - fee - change
    if amount <= 0:
        raise Underfunded(f"deposit {template.deposit_amount} cannot cover fee {fee} and change {change}")
    return _vault_skeleton(template, amount)


def sign_vault_tx(tx: Transaction, template: VaultTemplate, keys: Iterable[KeyPair]) -> list[bytes]:
    return multisig_sigs(tx, 0, keys, template.deposit_script, template.deposit_amount, SighashMode.ALL)


def finalize_vault_tx(tx: Transaction, template: VaultTemplate, sigs: Sequence[bytes]) -> Transaction:
    return tx.with_witness(0, witness(sigs, [], template.deposit_script))


def build_p2rw_tx(template: VaultTemplate, vault_txid: bytes, recovery_keys: Sequence[bytes],
                  recovery_threshold: int, fee: int, vault_amount: int | None = None,
                  vault_vout: int = 0) -> Transaction:
    """Recovery push: spends the vault output's immediate path into the m-of-n recovery script."""
    if vault_amount is None:
        vault_amount = template.amount
    amount = vault_amount - fee
    if amount <= 0:
        raise Underfunded("vault amount cannot cover recovery fee")
    return _p2rw_skeleton(vault_txid, vault_vout, recovery_script(recovery_keys, recovery_threshold), amount)


def _p2rw_skeleton(vault_txid, vout, rec, amount):
    return Transaction(TX_VERSION, PAST_LOCKTIME, [TxInput(OutPoint(vault_txid, vout), 0)],
                       [TxOutput(amount, rec)])


def estimate_vault_vsize(template: VaultTemplate) -> int:
    tx = _vault_skeleton(template, 0)
    return tx.with_witness(0, _placeholder_stack(template.path_threshold, [], template.deposit_script)).vsize()


def estimate_p2rw_vsize(template: VaultTemplate, recovery_keys: Sequence[bytes], recovery_threshold: int) -> int:
    tx = _p2rw_skeleton(bytes(32), 0, recovery_script(recovery_keys, recovery_threshold), 0)
    stack = _placeholder_stack(template.path_threshold, p2rw_selectors(template), template.vault_script)
    return tx.with_witness(0, stack).vsize()


def p2rw_selectors(template: VaultTemplate) -> list[bytes]:
    if template.has_revault_path:
        return [SELECT_ELSE, SELECT_ELSE]
    return [SELECT_ELSE]


def sign_p2rw_tx(tx: Transaction, template: VaultTemplate, keys: Iterable[KeyPair],
                 vault_amount: int) -> list[bytes]:
    # ANYONECANPAY so fee inputs can be appended after signing
    return multisig_sigs(tx, 0, keys, template.vault_script, vault_amount, SighashMode.ALL_ANYONECANPAY)


def finalize_p2rw_tx(tx: Transaction, template: VaultTemplate, sigs: Sequence[bytes]) -> Transaction:
    return tx.with_witness(0, witness(sigs, p2rw_selectors(template), template.vault_script))


def build_active_spend(vault_txid: bytes, template: VaultTemplate, vault_amount: int,
                       destination: Script, fee: int, vout: int = 0) -> Transaction:
    """Unsigned timelocked spend of a vault output by the active wallet."""
    return Transaction(TX_VERSION, PAST_LOCKTIME,
                       [TxInput(OutPoint(vault_txid, vout), template.timelock)],
                       [TxOutput(vault_amount - fee, destination)])


def finalize_active_spend(tx: Transaction, template: VaultTemplate, sigs: Sequence[bytes]) -> Transaction:
    return tx.with_witness(0, witness(sigs, [SELECT_IF], template.vault_script))


def bump_fee(tx: Transaction, fee_outpoint: OutPoint, fee_script: Script, fee_amount: int,
             fee_keys: Iterable[KeyPair]) -> Transaction:
    """Append a fully-spent fee input; existing ANYONECANPAY signatures stay valid."""
    bumped = tx.with_input(TxInput(fee_outpoint, 0))
    index = len(bumped.inputs) - 1
    sigs = multisig_sigs(bumped, index, fee_keys, fee_script, fee_amount, SighashMode.ALL)
    return bumped.with_witness(index, witness(sigs, [], fee_script))


# -- re-vaulting ----------------------------------------------------------------


def build_revault_tx(source: VaultTemplate, vault_txid: bytes, vault_amount: int,
                     next_template: VaultTemplate, fee: int) -> Transaction:
    """Push a layer's vault output into the next layer's two-path vault script."""
    if not source.has_revault_path:
        raise LayerError(f"layer {source.layer} of {source.layers} has no re-vault path")
    if vault_amount - fee <= 0:
        raise Underfunded("vault amount cannot cover re-vault fee")
    return Transaction(TX_VERSION, PAST_LOCKTIME, [TxInput(OutPoint(vault_txid, 0), 0)],
                       [TxOutput(vault_amount - fee, next_template.vault_script)])


def revault_selectors() -> list[bytes]:
    # inner IF (re-vault) sits below the outer ELSE selector
    return [SELECT_IF, SELECT_ELSE]


def revault_fee_variants(source: VaultTemplate, vault_txid: bytes, vault_amount: int,
                         next_template: VaultTemplate,
                         fees: Sequence[int] = DEFAULT_FEE_TIERS) -> list[Transaction]:
    return [build_revault_tx(source, vault_txid, vault_amount, next_template, f) for f in fees]


def sign_revault_tx(tx: Transaction, source: VaultTemplate, keys: Iterable[KeyPair],
                    vault_amount: int) -> Transaction:
    sigs = multisig_sigs(tx, 0, keys, source.vault_script, vault_amount, SighashMode.ALL)
    return tx.with_witness(0, witness(sigs, revault_selectors(), source.vault_script))


# -- covenant pair ----------------------------------------------------------------


class Activation(Enum):
    PENDING = "pending"
    ACTIVE = "active"


@dataclass
class CovenantPair:
    avt: Transaction
    p2rw: Transaction
    template: VaultTemplate
    recovery_script: Script
    amount: int
    required_deletions: int
    index: int = 0
    mechanism: str = "deleted-key"
    deletions: set = field(default_factory=set)
    deposit_confirmed: bool = False
    # re-vault fee variants: (revault tx, its own layer-2 P2RW)
    revaults: list = field(default_factory=list)
    next_template: VaultTemplate | None = None

    @property
    def vault_txid(self) -> bytes:
        return compute_txid(self.avt)

    @property
    def vault_outpoint(self) -> OutPoint:
        return OutPoint(self.vault_txid, 0)

    @property
    def vault_amount(self) -> int:
        return self.avt.outputs[0].amount

    @property
    def deposit_outpoint(self) -> OutPoint:
        return self.template.deposit_outpoint

    @property
    def vault_script(self) -> Script:
        return self.template.vault_script

    @property
    def activation(self) -> Activation:
        if self.deposit_confirmed and len(self.deletions) >= self.required_deletions:
            return Activation.ACTIVE
        return Activation.PENDING

    def record_deletion(self, hm_id: str) -> None:
        self.deletions.add(hm_id)

    def check_links(self) -> None:
        if self.p2rw.inputs[0].outpoint.txid != self.vault_txid:
            raise ValueError("P2RW does not spend the vault transaction")

    def export(self) -> dict:
        out = {
            "index": self.index,
            "mechanism": self.mechanism,
            "amount": self.amount,
            "vault_txid": self.vault_txid.hex(),
            "p2rw_txid": compute_txid(self.p2rw).hex(),
            "deposit_outpoint": str(self.deposit_outpoint),
            "deposit_script": self.template.deposit_script.to_text(),
            "vault_script": self.vault_script.to_text(),
            "recovery_script": self.recovery_script.to_text(),
            "timelock": self.template.timelock,
            "activation": self.activation.value,
            "deletions": sorted(self.deletions),
        }
        if self.revaults:
            out["revaults"] = [{"txid": compute_txid(r).hex(), "fee": self.vault_amount - r.outputs[0].amount,
                                "p2rw_txid": compute_txid(p).hex()} for r, p in self.revaults]
            out["layer2_vault_script"] = self.next_template.vault_script.to_text()
        return out


def export_json(obj) -> str:
    data = obj.export() if hasattr(obj, "export") else [o.export() for o in obj]
    return json.dumps(data, indent=2, sort_keys=True)


# -- template-hash covenants ------------------------------------------------------


FEE_SLOT_SEQUENCE = 0
PLACEHOLDER_OUTPOINT = OutPoint(bytes(32), 0)


def ctv_commit_script(hash_x: bytes, hash_x_fee: bytes, salt_tag: bytes | None = None) -> Script:
    """``OP_IF <Hash(x)> OP_ELSE <Hash(x')> OP_ENDIF OP_CTV`` (optionally salted)."""
    prefix = [salt_tag, Op.OP_DROP] if salt_tag else []
    return Script([*prefix, Op.OP_IF, hash_x, Op.OP_ELSE, hash_x_fee, Op.OP_ENDIF,
                   Op.OP_CHECKTEMPLATEVERIFY])


@dataclass(frozen=True)
class CtvNode:
    name: str
    template: Transaction
    template_fee: Transaction  # x': one extra fee input slot
    parent: str | None
    parent_vout: int | None

    @property
    def hash(self) -> bytes:
        return ctv_hash(self.template, 0)

    @property
    def hash_fee(self) -> bytes:
        return ctv_hash(self.template_fee, 0)


@dataclass
class CtvPlan:
    nodes: dict
    deposit_script: Script
    deposit_amount: int
    entropy_salt: bytes
    vault_script: Script
    recovery_script: Script
    timelock: int

    def export(self) -> dict:
        return {
            "entropy_salt": self.entropy_salt.hex(),
            "deposit_script": self.deposit_script.to_text(),
            "deposit_amount": self.deposit_amount,
            "vault_script": self.vault_script.to_text(),
            "recovery_script": self.recovery_script.to_text(),
            "nodes": {
                name: {
                    "parent": n.parent,
                    "parent_vout": n.parent_vout,
                    "hash": n.hash.hex(),
                    "hash_fee_variant": n.hash_fee.hex(),
                    "outputs": [[o.amount, o.script.to_text()] for o in n.template.outputs],
                }
                for name, n in sorted(self.nodes.items())
            },
        }

    def check_tree(self) -> None:
        """Each committed template is reachable from exactly one parent output."""
        seen: dict = {}
        for name, node in self.nodes.items():
            if node.parent is None:
                continue
            parent = self.nodes[node.parent]
            script = parent.template.outputs[node.parent_vout].script
            if node.hash not in script.items or node.hash_fee not in script.items:
                raise ValueError(f"{name} is not committed by its parent output")
            key = (node.parent, node.parent_vout)
            if key in seen:
                raise ValueError(f"{key} commits to two children")
            seen[key] = name
        if self.nodes["vault"].hash not in self.deposit_script.items:
            raise ValueError("deposit does not commit to the vault template")

    def instantiate(self, name: str, spent: OutPoint) -> Transaction:
        node = self.nodes[name]
        return _with_outpoint(node.template, spent)

    def instantiate_fee_variant(self, name: str, spent: OutPoint, fee_outpoint: OutPoint) -> Transaction:
        node = self.nodes[name]
        tx = _with_outpoint(node.template_fee, spent)
        inputs = list(tx.inputs)
        inputs[1] = TxInput(fee_outpoint, FEE_SLOT_SEQUENCE)
        return Transaction(tx.version, tx.locktime, inputs, tx.outputs)


def _with_outpoint(tx: Transaction, outpoint: OutPoint) -> Transaction:
    inputs = list(tx.inputs)
    inputs[0] = TxInput(outpoint, inputs[0].sequence, inputs[0].script_sig)
    return Transaction(tx.version, tx.locktime, inputs, tx.outputs)


def _fee_variant(tx: Transaction) -> Transaction:
    return Transaction(tx.version, tx.locktime,
                       [*tx.inputs, TxInput(PLACEHOLDER_OUTPOINT, FEE_SLOT_SEQUENCE)], tx.outputs)


def build_ctv_plan(deposit_amount: int, timelock: int, active_keys: Sequence[bytes],
                   active_threshold: int, recovery_keys: Sequence[bytes], recovery_threshold: int,
                   entropy: bytes, vault_fee: int = 1000, p2rw_fee: int = 1000) -> CtvPlan:
    """Plan deposit -> vault -> recovery push with x / x' fee variants at each node."""
    if len(entropy) != 32:
        raise ValueError("entropy salt must be 32 bytes")

    def tag(label: str) -> bytes:
        return tagged_hash("vaultlab/ctv-salt", entropy + label.encode())

    vault_amount = deposit_amount - vault_fee
    rec_amount = vault_amount - p2rw_fee
    if rec_amount <= 0:
        raise Underfunded("deposit too small for planned fees")
    rec_script = Script([tag("recovery"), Op.OP_DROP,
                         *recovery_script(recovery_keys, recovery_threshold)])
    p2rw = Transaction(TX_VERSION, PAST_LOCKTIME, [TxInput(PLACEHOLDER_OUTPOINT, 0)],
                       [TxOutput(rec_amount, rec_script)])
    p2rw_fee_variant = _fee_variant(p2rw)
    v_script = Script([
        tag("vault"), Op.OP_DROP,
        Op.OP_IF,
        timelock, Op.OP_CHECKSEQUENCEVERIFY, Op.OP_DROP,
        *multisig_script(active_threshold, active_keys),
        Op.OP_ELSE,
        *ctv_commit_script(ctv_hash(p2rw, 0), ctv_hash(p2rw_fee_variant, 0)),
        Op.OP_ENDIF,
    ])
    vault = Transaction(TX_VERSION, PAST_LOCKTIME, [TxInput(PLACEHOLDER_OUTPOINT, 0)],
                        [TxOutput(vault_amount, v_script)])
    vault_fee_variant = _fee_variant(vault)
    nodes = {
        "vault": CtvNode("vault", vault, vault_fee_variant, None, None),
        "p2rw": CtvNode("p2rw", p2rw, p2rw_fee_variant, "vault", 0),
    }
    dep_script = ctv_commit_script(nodes["vault"].hash, nodes["vault"].hash_fee, tag("deposit"))
    return CtvPlan(nodes, dep_script, deposit_amount, entropy, v_script, rec_script, timelock)


def ctv_deposit_script(plan: CtvPlan) -> Script:
    return plan.deposit_script


def ctv_witness(script: Script, use_fee_variant: bool, nested: bool = False) -> tuple:
    """Witness for a template-hash spend: selector(s) then the script."""
    sel = SELECT_ELSE if use_fee_variant else SELECT_IF
    if nested:
        # vault output: outer ELSE selects the committed recovery arm
        return (sel, SELECT_ELSE, script.to_bytes())
    return (sel, script.to_bytes())


def ctv_template_for(plan: CtvPlan, deposit_outpoint: OutPoint, index: int = 0) -> VaultTemplate:
    """A VaultTemplate view of a CTV vault (for timelocked active spends)."""
    keys, threshold = _active_from_script(plan.vault_script)
    return _CtvTemplate(plan.timelock, tuple(keys), threshold, tuple(keys), threshold,
                        deposit_outpoint, plan.deposit_amount, plan=plan)


def _active_from_script(script: Script) -> tuple[list[bytes], int]:
    items = list(script.items)
    start = items.index(Op.OP_DROP, items.index(Op.OP_CHECKSEQUENCEVERIFY)) + 1
    end = items.index(Op.OP_CHECKMULTISIG, start)
    threshold = small_int_value(items[start])
    return [k for k in items[start + 1:end - 1]], threshold


@dataclass(frozen=True)
class _CtvTemplate(VaultTemplate):
    plan: CtvPlan | None = field(default=None, compare=False)

    @property
    def deposit_script(self) -> Script:
        return self.plan.deposit_script

    @property
    def vault_script(self) -> Script:
        return self.plan.vault_script

    @property
    def amount(self) -> int:
        return self.plan.nodes["vault"].template.outputs[0].amount
