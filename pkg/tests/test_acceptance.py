"""Acceptance criteria, one block per criterion.

Each test carries a ``criterion`` marker; conftest folds the results into one
PASS/FAIL line per criterion at the end of the run.
"""

import itertools
import json
import random

import pytest

from vaultlab import covenants as cv
from vaultlab.chain import Chain, Visibility
from vaultlab.cli import main
from vaultlab.config import bundled_names
from vaultlab.covenants import Activation, CovenantPair
from vaultlab.fleet import AdversaryKnowledge, HardwareModule, Role, WalletTopology
from vaultlab.interpreter import ExecContext, ctv_hash, eval_script, verify_input
from vaultlab.orchestrator import (
    Feerates, RecoveryKind, World, bootstrap, proof_of_reserves_valid, run_health_check, run_recovery,
    run_setup, run_external_payment, run_unvault, run_vaulting, vaulting_cost,
)
from vaultlab.script import multisig_script
from vaultlab.threats import (
    SCENARIOS, CompromiseSet, OutcomeClass, RunOptions, classify, evaluate, run_scenario, tolerance_oracle,
)
from vaultlab.txkit import OutPoint, SighashMode, Transaction, TxInput, TxOutput, compute_txid, sign_input
from vaultlab.watchtower import Variant

from conftest import VaultKit, keys
from test_script import random_tx, ref_ctv_hash

PARTS = [1_000_000, 2_000_000, 3_000_000]
EVIL = multisig_script(1, [keys(1, "evil")[0].public])


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# -- 1 --------------------------------------------------------------------------------


C1 = criterion(1, "tolerance table reproduced by exhaustive enumeration")


@C1
def test_tolerance_table():
    tp = WalletTopology(j=2, k=3, m=2, n=3, p=2, t=3, a=2, b=3, R=3, S=2, W=2)
    table = tolerance_oracle(tp)
    got = {r.functionality: (r.loss_tolerance, r.leak_tolerance) for r in table.rows}
    assert got["recovery-wallet"] == (tp.n - tp.m, tp.m - 1)
    assert got["active-wallet"] == (tp.k - tp.j, tp.j - 1)
    assert got["fee-wallet"] == (tp.b - tp.a, tp.a - 1)
    assert got["ephemeral-keys"][1] == tp.p - 1
    # storage: losing R-1 / S-1 copies is harmless and a leaked copy steals nothing
    assert got["avt-storage"] == (tp.R - 1, 0)
    assert got["p2rw-storage"] == (tp.S - 1, 0)
    assert got["watchtower"][0] == tp.W - 1
    assert table.matches


# -- 2 --------------------------------------------------------------------------------


C2 = criterion(2, "scenario matrix reproduces every stated outcome class")


@C2
@pytest.mark.parametrize("sid", list(SCENARIOS))
def test_matrix_outcome_class(sid):
    out = run_scenario(sid)
    assert out.outcome is SCENARIOS[sid].expected, out.line()


@C2
def test_l2_gain_is_the_in_flight_partition():
    out = run_scenario("L2")
    in_flight = out.world.pairs[RunOptions().schedule[0]]
    assert out.attacker_gain == in_flight.vault_amount


@C2
def test_c4_total_loss_when_outbid():
    fr = Feerates(owner=5, attacker=2, bribe=10, recovery=8)
    assert fr.recovery < fr.attacker + fr.bribe
    out = run_scenario("C4", RunOptions(feerates=fr))
    assert out.outcome is OutcomeClass.CATASTROPHIC
    assert out.owner_custody == 0
    # everything that was vaulted, less the fees spent on the way, is gone or frozen
    assert out.loss + out.fees >= out.at_risk


@C2
def test_l3_same_as_without_watchtower_compromise():
    with_wt = run_scenario("L3")
    without = evaluate(CompromiseSet(active=WalletTopology().j), scenario="L3")
    assert with_wt.record() == without.record()


# -- 3 --------------------------------------------------------------------------------


C3 = criterion(3, "covenant soundness: only the two spend classes accept; CSV boundary exact")


class Cand:
    def __init__(self, raw, group=None, index=None):
        self.raw, self.group, self.index = raw, group, index


def _candidates(world, pair, tx, outsiders):
    script, amount = pair.vault_script, pair.vault_amount
    out = []
    for i, (hm, public) in enumerate(zip(world.fleet.by_role(Role.ACTIVE), world.active_keys())):
        for mode in SighashMode:
            out.append(Cand(hm.sign(public, tx, 0, script, amount, mode), "active", i))
    for role in (Role.RECOVERY, Role.FEE):
        for hm in world.fleet.by_role(role):
            out.append(Cand(hm.sign(hm.derive_wallet_keys(role.value, 1, 0)[0], tx, 0, script, amount)))
    for kp in outsiders:
        out.append(Cand(sign_input(kp, tx, 0, script, amount)))
    # right key, wrong amount
    hm0 = world.fleet.by_role(Role.ACTIVE)[0]
    out.append(Cand(hm0.sign(world.active_keys()[0], tx, 0, script, amount + 1)))
    # pre-signed path signatures lifted from the stored P2RW
    for i, raw in enumerate(pair.p2rw.witnesses[0][:-2]):
        out.append(Cand(raw, "p2rw", i))
    out += [Cand(bytes(97)), Cand(b"\x01"), Cand(b"")]
    return out


def _fuzz_txs(world, pair, rng):
    T = world.topology.T
    p2rw = pair.p2rw
    inp = p2rw.inputs[0]
    txs = [
        p2rw,
        Transaction(p2rw.version, p2rw.locktime, list(p2rw.inputs) + [TxInput(OutPoint(rng.randbytes(32), 0), 0)],
                    p2rw.outputs),
        Transaction(p2rw.version, p2rw.locktime, p2rw.inputs,
                    [TxOutput(p2rw.outputs[0].amount - 1, p2rw.outputs[0].script)]),
        Transaction(p2rw.version, p2rw.locktime, p2rw.inputs, [TxOutput(p2rw.outputs[0].amount, EVIL)]),
        Transaction(p2rw.version, p2rw.locktime, [TxInput(inp.outpoint, inp.sequence + 1)], p2rw.outputs),
    ]
    for dest in (world.payee, EVIL):
        base = world.active_spend(pair, dest)
        for seq in sorted({0, max(T - 1, 0), T, 0xFFFFFFFF}):
            txs.append(Transaction(base.version, base.locktime, [TxInput(base.inputs[0].outpoint, seq)],
                                   base.outputs))
    return txs


def _same_input_and_outputs(tx, ref):
    a, b = tx.inputs[0], ref.inputs[0]
    return (tx.version, tx.locktime, a.outpoint, a.sequence, tx.outputs) == \
        (ref.version, ref.locktime, b.outpoint, b.sequence, ref.outputs)


def _legitimate(world, pair, tx, picked, sel, confs):
    # independent oracle for the two spend classes
    tp = world.topology
    if sel == b"\x01":
        if len(picked) != tp.j or any(c.group != "active" for c in picked):
            return False
        if not (tx.inputs[0].sequence >= tp.T and confs >= tp.T and tx.version >= 2):
            return False
        idx = [c.index for c in picked]
        return all(a < b for a, b in zip(idx, idx[1:]))
    if sel == b"":
        # only the pre-signed P2RW, with any extra fee inputs
        return [c.raw for c in picked] == list(pair.p2rw.witnesses[0][:-2]) and \
            _same_input_and_outputs(tx, pair.p2rw)
    return False


@C3
def test_fuzzed_spends_against_vault_outputs():
    world = World(seed=21)
    pairs = bootstrap(world, PARTS)
    rng = random.Random(99)
    outsiders = keys(3, "outsider")
    T = world.topology.T
    selectors = [b"\x01", b"", b"\x02", b"\x00", b"\x01\x00", None]
    for pair in pairs:
        txs = [(tx, _candidates(world, pair, tx, outsiders)) for tx in _fuzz_txs(world, pair, rng)]
        accepted = {"if": 0, "else": 0}
        for _ in range(10_000):
            tx, cands = rng.choice(txs)
            confs = rng.choice([0, 1, max(T - 1, 0), T, T + 1, 500])
            count = rng.choice([0, 1, 2, 2, 2, 3, 4])
            if rng.random() < 0.6:
                group = rng.choice(["active", "p2rw"])
                pool = [c for c in cands if c.group == group]
                picked = [rng.choice(pool) for _ in range(count)]
                if rng.random() < 0.7:
                    picked.sort(key=lambda c: c.index)
                if group == "p2rw" and rng.random() < 0.5:
                    picked = [c for c in cands if c.group == "p2rw"]
            else:
                picked = [rng.choice(cands) for _ in range(count)]
            sel = rng.choice(selectors)
            stack = [c.raw for c in picked] + ([] if sel is None else [sel])
            verdict = eval_script(pair.vault_script, ExecContext(tx, 0, confs, stack, pair.vault_amount))
            legit = sel is not None and _legitimate(world, pair, tx, picked, sel, confs)
            assert bool(verdict) == legit, (sel, [c.group for c in picked], confs, verdict)
            if verdict:
                accepted["if" if sel == b"\x01" else "else"] += 1
        # both legitimate classes were exercised
        assert accepted["if"] > 0 and accepted["else"] > 0


@C3
@pytest.mark.parametrize("T", [1, 2, 6, 144])
def test_csv_boundary_on_chain(T):
    world = World(WalletTopology(T=T), seed=T)
    [pair] = bootstrap(world, [1_000_000])
    for node in world.watchtowers:
        node.authorize_unvault(pair.vault_txid)
    world.owner.authorized.add(pair.vault_txid)
    assert world.broadcast(pair.avt, owner=True)
    spend = world.active_spend(pair, world.payee)
    def confs():
        return world.chain.confirmations(pair.vault_txid) if world.chain.is_mined(pair.vault_txid) else 0

    while confs() < T - 1:
        world.mine()
    assert confs() == T - 1
    assert world.chain.validate(spend).reason == "csv-premature"
    world.mine()
    assert world.chain.confirmations(pair.vault_txid) == T
    assert world.chain.submit(spend)


# -- 4 --------------------------------------------------------------------------------


C4 = criterion(4, "AVT witness mutation never changes the txid or invalidates the P2RW")


def _mutate(stack, rng):
    stack = list(stack)
    choice = rng.randrange(5)
    if choice == 0 and stack:
        i = rng.randrange(len(stack))
        raw = bytearray(stack[i])
        if raw:
            raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
        stack[i] = bytes(raw)
    elif choice == 1 and stack:
        del stack[rng.randrange(len(stack))]
    elif choice == 2:
        stack.insert(rng.randrange(len(stack) + 1), rng.randbytes(rng.randrange(100)))
    elif choice == 3:
        rng.shuffle(stack)
    else:
        stack = [rng.randbytes(rng.randrange(120)) for _ in range(rng.randrange(6))]
    return stack


@C4
def test_witness_mutation_keeps_txid_and_p2rw():
    rng = random.Random(4)
    for case in range(100):
        t = rng.randint(1, 4)
        p = rng.randint(1, t)
        k = rng.randint(1, 4)
        n = rng.randint(1, 4)
        kw = dict(T=rng.choice([0, 1, 6, 144]), j=rng.randint(1, k), k=k, p=p, t=t, m=rng.randint(1, n), n=n,
                  seed=case, amount=rng.randint(100_000, 10 ** 8))
        chain = Chain()
        probe = VaultKit(**kw)
        op = chain.fund(probe.template.deposit_script, probe.template.deposit_amount)
        kit = VaultKit(deposit_op=op, **kw)
        mutated = kit.avt.with_witness(0, _mutate(kit.avt.witnesses[0], rng))
        assert compute_txid(mutated) == kit.vault_txid
        if mutated.witnesses != kit.avt.witnesses:
            assert not chain.validate(mutated)
        assert chain.submit(kit.avt)
        assert chain.validate(kit.p2rw), case
        assert verify_input(kit.p2rw, 0, kit.template.vault_script, kit.vault_amount, 0)


# -- 5 --------------------------------------------------------------------------------


C5 = criterion(5, "activation after t-p+1 deletions and confirmation; theft iff p keys leak")


@C5
def test_activation_threshold():
    kit = VaultKit(p=2, t=3)
    assert WalletTopology(p=2, t=3).required_deletions == 2
    for deleted, confirmed in itertools.product(range(4), [False, True]):
        pair = CovenantPair(kit.avt, kit.p2rw, kit.template, kit.p2rw.outputs[0].script, 1_000_000, 2,
                            deposit_confirmed=confirmed)
        for i in range(deleted):
            pair.record_deletion(f"vault-{i}")
        assert (pair.activation is Activation.ACTIVE) == (deleted >= 2 and confirmed)


@C5
def test_activation_in_a_vaulting_run():
    world = World(WalletTopology(p=2, t=3))
    run_setup(world)
    run_external_payment(world, vaulting_cost(world, [1_000_000]))
    [pair], trace = run_vaulting(world, [1_000_000])
    assert trace.completed
    assert len(pair.deletions) >= 2 and pair.activation is Activation.PENDING
    world.mine()
    world.refresh_activation()
    assert pair.activation is Activation.ACTIVE


@C5
def test_theft_iff_adversary_holds_p_keys_all_orderings():
    t, p = 3, 2
    for order in itertools.permutations(range(t)):
        for before in itertools.product([False, True], repeat=t):
            hms = [HardwareModule(f"v{i}", Role.VAULT, random.Random(i)) for i in range(t)]
            ids = [h.gen_ephemeral_keypair() for h in hms]
            script = multisig_script(p, [h.ephemeral_public(k) for h, k in zip(hms, ids)])
            adv = AdversaryKnowledge()
            clock = 0
            for i in order:
                clock += 1
                if before[i]:
                    hms[i].compromise(clock, adv)
                hms[i].delete_key(ids[i], clock + 1)
                if not before[i]:
                    hms[i].compromise(clock + 2, adv)
                clock += 2
            held = sum(adv.holds(h.ephemeral_public(k)) for h, k in zip(hms, ids))
            assert held == sum(before)
            assert adv.can_sign(script) == (held >= p)


@C5
@pytest.mark.parametrize("leaked", range(4))
def test_end_to_end_theft_iff_p_vault_keys(leaked):
    out = evaluate(CompromiseSet(vault_keys=leaked))
    assert (out.attacker_gain > 0) == (leaked >= WalletTopology().p), out.line()


# -- 6 --------------------------------------------------------------------------------


C6 = criterion(6, "watchtower race: P2RW confirms before the timelock; W-1 dead nodes change nothing")


def _race_configs():
    for W in (1, 2, 3):
        for alive in range(1, W + 1):
            for live in itertools.combinations(range(W), alive):
                for T in (2, 3, 6):
                    for variant in Variant:
                        for attacker, recovery in ((0, 1), (2, 20), (10, 11)):
                            yield W, live, T, variant, attacker, recovery


@C6
def test_p2rw_confirms_before_timelock():
    checked = 0
    for W, live, T, variant, attacker, recovery in _race_configs():
        tp = WalletTopology(W=W, T=T)
        world = World(tp, seed=checked, feerates=Feerates(attacker=attacker, recovery=recovery),
                      watchtower_variant=variant)
        [pair] = bootstrap(world, [1_000_000])
        for i, node in enumerate(world.watchtowers):
            node.alive = i in live
        # the thief holds the active keys and publishes the AVT
        theft = world.active_spend(pair, EVIL, fee=attacker * 400)
        world.attacker_scripts.add(EVIL.to_bytes())
        world.broadcast(pair.avt, visibility=Visibility.PUBLIC)
        for _ in range(T + 2):
            world.chain.submit(theft)
            world.mine()
        chain = world.chain
        assert chain.is_mined(pair.p2rw.txid), (W, live, T, variant)
        avt_height = chain.height - chain.confirmations(pair.vault_txid) + 1
        p2rw_height = chain.height - chain.confirmations(pair.p2rw.txid) + 1
        assert p2rw_height < avt_height + T
        assert world.distribution()["attacker"] == 0
        checked += 1
    assert checked == (1 + 3 + 7) * 3 * 2 * 3


@C6
@pytest.mark.parametrize("W", [2, 3])
def test_killing_w_minus_one_nodes_keeps_every_class(W):
    tp = WalletTopology(W=W)
    baseline = {sid: run_scenario(sid, RunOptions(topology=tp)).outcome for sid in SCENARIOS}
    for dead in itertools.combinations(range(W), W - 1):
        opts = RunOptions(topology=tp, dead_watchtowers=dead)
        for sid in SCENARIOS:
            assert run_scenario(sid, opts).outcome is baseline[sid], (sid, dead)


# -- 7 --------------------------------------------------------------------------------


C7 = criterion(7, "CTV lifecycle equals deleted-key; fee variant accepts; ctv_hash matches reference")


def _lifecycle(mechanism):
    world = World(seed=7, mechanism=mechanism)
    pairs = bootstrap(world, PARTS)
    assert run_unvault(world, pairs[0].vault_txid).completed
    # an unauthorized broadcast is answered, then the owner recovers the rest
    world.broadcast(pairs[1].avt)
    world.mine()
    run_recovery(world, RecoveryKind.FULL)
    world.mine(3)
    cls, dist = classify(world, sum(p.vault_amount for p in world.pairs))
    return cls, dist


@C7
def test_ctv_lifecycle_matches_deleted_key():
    dk, ctv = _lifecycle("deleted-key"), _lifecycle("ctv")
    assert dk == ctv
    assert dk[0] is OutcomeClass.NO_LOSS
    d = dk[1]
    assert d["owner"] + d["attacker"] + d["frozen"] + d["fees"] == d["initial"]


def _ctv_setup():
    act, rec = keys(3, "a"), keys(3, "r")
    plan = cv.build_ctv_plan(1_000_000, 6, [x.public for x in act], 2, [x.public for x in rec], 2, bytes(32))
    chain = Chain()
    dep = chain.fund(plan.deposit_script, plan.deposit_amount)
    return chain, plan, dep


@C7
def test_ctv_fee_variant_accepts_and_mutation_rejects():
    chain, plan, dep = _ctv_setup()
    fee_key = keys(1, "fee")[0]
    fee_script = multisig_script(1, [fee_key.public])
    fee_op = chain.fund(fee_script, 9_000)
    x_fee = plan.instantiate_fee_variant("vault", dep, fee_op)
    x_fee = x_fee.with_witness(0, cv.ctv_witness(plan.deposit_script, True))
    x_fee = x_fee.with_witness(1, cv.witness(cv.multisig_sigs(x_fee, 1, [fee_key], fee_script, 9_000), [],
                                              fee_script))
    x = plan.instantiate("vault", dep)
    for mutated_outputs in ([TxOutput(x.outputs[0].amount - 1, x.outputs[0].script)],
                            [TxOutput(x.outputs[0].amount, EVIL)],
                            list(x.outputs) + [TxOutput(1, EVIL)]):
        bad = Transaction(x.version, x.locktime, x.inputs, mutated_outputs)
        bad = bad.with_witness(0, cv.ctv_witness(plan.deposit_script, False))
        assert chain.validate(bad).reason == "script"
        bad_fee = Transaction(x_fee.version, x_fee.locktime, x_fee.inputs, mutated_outputs)
        bad_fee = bad_fee.with_witness(0, cv.ctv_witness(plan.deposit_script, True))
        assert not chain.validate(bad_fee)
    assert chain.submit(x_fee)


@C7
def test_ctv_hash_reference_on_random_transactions():
    rng = random.Random(1119)
    for _ in range(1000):
        tx = random_tx(rng)
        i = rng.randrange(len(tx.inputs))
        assert ctv_hash(tx, i) == ref_ctv_hash(tx, i)


# -- 8 --------------------------------------------------------------------------------


C8 = criterion(8, "two-layer re-vaulting: three paths, AVT-storage leak ends in NoLoss via re-vault")


@C8
def test_layer_one_supports_three_paths():
    world = World(seed=8, revault_layers=2)
    [pair] = bootstrap(world, [1_000_000])
    assert len(pair.revaults) == 3
    for node in world.watchtowers:
        node.authorize_unvault(pair.vault_txid)
    world.owner.authorized.add(pair.vault_txid)
    world.broadcast(pair.avt, owner=True)
    world.mine(world.topology.T)
    chain = world.chain
    spend = world.active_spend(pair, world.payee)
    assert chain.validate(spend)
    assert chain.validate(pair.p2rw)
    for rv, l2 in pair.revaults:
        assert chain.validate(rv)
        assert rv.outputs[0].script == pair.next_template.vault_script
        # the re-vaulted output keeps its own P2RW
        assert verify_input(l2, 0, pair.next_template.vault_script, rv.outputs[0].amount, 0)


@C8
def test_avt_storage_leak_resolved_by_revault_without_recovery_hms():
    out = evaluate(CompromiseSet(avt_storage=True), RunOptions(revault_layers=2), strategies=["avt_flood"])
    assert out.outcome is OutcomeClass.NO_LOSS
    world = out.world
    revault_txids = {compute_txid(rv) for p in world.pairs for rv, _ in p.revaults}
    for pair in world.pairs:
        assert world.chain.spender_of(pair.vault_outpoint) in revault_txids
    assert all(h.access_log == [] for h in world.fleet.by_role(Role.RECOVERY))
    # the class holds for every strategy the leak allows
    assert evaluate(CompromiseSet(avt_storage=True), RunOptions(revault_layers=2)).outcome is OutcomeClass.NO_LOSS


# -- 9 --------------------------------------------------------------------------------


C9 = criterion(9, "conservation in every run; identical seeds give byte-identical reports")


@C9
def test_conservation_over_matrix_and_seeds():
    for seed, mechanism in itertools.product(range(3), ("deleted-key", "ctv")):
        for sid in SCENARIOS:
            out = run_scenario(sid, RunOptions(seed=seed, mechanism=mechanism))
            assert out.conserved, (sid, seed, mechanism)
            assert out.world.chain.conserved()


@C9
def test_reports_byte_identical(tmp_path, monkeypatch):
    monkeypatch.delenv("VAULTLAB_OUT", raising=False)
    for name in bundled_names():
        runs = []
        for attempt in ("a", "b"):
            out = tmp_path / name / attempt
            main(["run", name, "--seed", "5", "--out", str(out)])
            runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        assert runs[0] == runs[1], name
    mats = []
    for attempt in ("a", "b"):
        out = tmp_path / "matrix" / attempt
        assert main(["matrix", "L2-active-compromise", "--out", str(out)]) == 0
        mats.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert mats[0] == mats[1]
    assert json.loads(mats[0]["summary.json"])["diverging"] == []


# -- 10 -------------------------------------------------------------------------------


C10 = criterion(10, "health check: PoR signed yet rejected; bit-flips detected; chain untouched")


@C10
def test_proof_of_reserves():
    world = World(seed=10)
    bootstrap(world, PARTS)
    before, log = world.chain.snapshot(), world.chain.event_log()
    report = run_health_check(world, nonce=b"audit")
    assert report.ok, report.failures()
    assert report.non_destructive
    assert world.chain.snapshot() == before and world.chain.event_log() == log
    signers = [h for h in world.fleet.hms.values() if h.role is not Role.VAULT]
    for hm, por in zip(signers, report.por_txs):
        assert proof_of_reserves_valid(por, hm.derive_wallet_keys(hm.role.value, 1, 0)[0])
        res = world.chain.validate(por)
        assert not res and res.reason == "missing-input"


@C10
def test_single_bit_flips_detected():
    world = World(seed=11)
    bootstrap(world, PARTS)
    nonce = b"audit"
    stored = [(holder, txid) for (holder, txid) in sorted(world.fleet.act_digests)]
    assert len(stored) == len(PARTS) * world.topology.R
    # every bit of one stored AVT, through the possession commitment
    holder, txid = stored[0]
    hm = world.fleet.hms[holder]
    original = hm.stored_acts[txid]
    expected = hm.commitment(txid, nonce)
    for bit in range(len(original) * 8):
        hm.corrupt(txid, bit)
        assert hm.commitment(txid, nonce) != expected, bit
        hm.stored_acts[txid] = original
    # one random flip in each stored AVT, through the full health check
    rng = random.Random(10)
    for holder, txid in stored:
        hm = world.fleet.hms[holder]
        original = hm.stored_acts[txid]
        hm.corrupt(txid, rng.randrange(len(original) * 8))
        report = run_health_check(world, nonce=nonce)
        assert [f[0] for f in report.failures()] == [f"{holder}/{txid.hex()[:16]}"]
        assert report.non_destructive
        hm.stored_acts[txid] = original
    assert run_health_check(world, nonce=nonce).ok
