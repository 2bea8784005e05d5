import random

import pytest

from vaultlab import covenants as cv
from vaultlab.script import multisig_script
from vaultlab.txkit import KeyPair, OutPoint, Transaction, TxInput, TxOutput


def keys(n, tag="k", seed=0):
    rng = random.Random(f"{tag}/{seed}")
    return [KeyPair(rng.randbytes(32), f"{tag}{i}") for i in range(n)]


def simple_tx(rng=None, n_in=1, n_out=1, version=2, locktime=0):
    rng = rng or random.Random(0)
    script = multisig_script(1, [bytes(rng.randbytes(32))])
    ins = [TxInput(OutPoint(rng.randbytes(32), rng.randrange(4)), rng.randrange(2 ** 16)) for _ in range(n_in)]
    outs = [TxOutput(rng.randrange(1, 10 ** 8), script) for _ in range(n_out)]
    return Transaction(version, locktime, ins, outs)


class VaultKit:
    """A hand-built vault: template, keys and the signed covenant pair."""

    def __init__(self, T=6, j=2, k=3, p=2, t=3, m=2, n=3, seed=0, amount=1_000_000, layers=1,
                 deposit_op=None):
        self.active = keys(k, "active", seed)
        self.path = keys(t, "path", seed)
        self.recovery = keys(n, "recovery", seed)
        self.j, self.p, self.m = j, p, m
        rng = random.Random(f"deposit/{seed}")
        self.deposit_op = deposit_op or OutPoint(rng.randbytes(32), 0)
        self.template = cv.VaultTemplate(T, tuple(x.public for x in self.active), j,
                                         tuple(x.public for x in self.path), p, self.deposit_op, amount,
                                         fee=1_000, layers=layers)
        avt_u = cv.build_vault_tx(self.template)
        self.avt = cv.finalize_vault_tx(avt_u, self.template, cv.sign_vault_tx(avt_u, self.template, self.path[:p]))
        self.vault_txid = self.avt.txid
        self.vault_amount = self.avt.outputs[0].amount
        p2rw_u = cv.build_p2rw_tx(self.template, self.vault_txid, [x.public for x in self.recovery], m, 2_000)
        self.p2rw = cv.finalize_p2rw_tx(p2rw_u, self.template,
                                        cv.sign_p2rw_tx(p2rw_u, self.template, self.path[:p], self.vault_amount))

    def active_spend(self, signers=None, fee=500, destination=None, sequence=None):
        destination = destination or multisig_script(1, [self.active[0].public])
        tx = cv.build_active_spend(self.vault_txid, self.template, self.vault_amount, destination, fee)
        if sequence is not None:
            tx = Transaction(tx.version, tx.locktime, [TxInput(tx.inputs[0].outpoint, sequence)], tx.outputs)
        sigs = cv.multisig_sigs(tx, 0, signers or self.active[:self.j], self.template.vault_script,
                                self.vault_amount)
        return cv.finalize_active_spend(tx, self.template, sigs)

    def path_spend(self, fee, destination=None, signers=None):
        """An ELSE-branch spend to an arbitrary script (what stolen path keys allow)."""
        destination = destination or multisig_script(1, [bytes(32)])
        tx = Transaction(2, 0, [TxInput(OutPoint(self.vault_txid, 0), 0)],
                         [TxOutput(self.vault_amount - fee, destination)])
        sigs = cv.multisig_sigs(tx, 0, signers or self.path[:self.p], self.template.vault_script,
                                self.vault_amount)
        return tx.with_witness(0, cv.witness(sigs, [cv.SELECT_ELSE], self.template.vault_script))

    def at_feerate(self, build, rate):
        """Two-pass build so fee / vsize equals ``rate`` exactly."""
        return build(rate * build(0).vsize())


def funded_kit(chain, **kw):
    probe = VaultKit(**kw)
    op = chain.fund(probe.template.deposit_script, probe.template.deposit_amount)
    return VaultKit(deposit_op=op, **kw)


@pytest.fixture
def kit():
    return VaultKit()


# -- acceptance criterion reporting

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True})
    entry["ok"] = entry["ok"] and not rep.failed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        terminalreporter.write_line(f"{'PASS' if entry['ok'] else 'FAIL'} criterion {number}: {entry['title']}")
