import itertools
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaultlab.chain import Chain, NotFound, Visibility
from vaultlab.script import multisig_script
from vaultlab.txkit import KeyPair, OutPoint, Transaction

from conftest import funded_kit

PUB, PRIV = Visibility.PUBLIC, Visibility.MINER_PRIVATE
THIEF = multisig_script(1, [KeyPair(bytes([9]) * 32).public])


def test_empty_block_advances_height():
    c = Chain()
    assert c.mine_block() == []
    assert c.height == 1 and c.blocks == [(1, [])]


def test_confirmation_counting():
    c = Chain()
    k = funded_kit(c)
    assert c.submit(k.avt)
    assert c.confirmations(k.vault_txid) == 0
    c.mine_block()
    assert c.confirmations(k.vault_txid) == 1
    c.mine(5)
    assert c.confirmations(k.vault_txid) == 6


def test_unknown_txid_not_found():
    with pytest.raises(NotFound):
        Chain().confirmations(bytes(32))


def test_p2rw_on_unconfirmed_vault_accepted():
    c = Chain()
    k = funded_kit(c)
    assert c.submit(k.avt)
    assert c.submit(k.p2rw)


def test_active_spend_premature():
    c = Chain()
    k = funded_kit(c)
    c.submit(k.avt)
    assert c.submit(k.active_spend()).reason == "csv-premature"


def test_active_spend_first_accepted_after_sixth_block():
    c = Chain()
    k = funded_kit(c, T=6)
    c.submit(k.avt)
    spend = k.active_spend()
    accepted_at = None
    for _ in range(10):
        c.mine_block()
        if c.submit(spend):
            accepted_at = c.confirmations(k.vault_txid)
            break
    assert accepted_at == 6


def test_avt_and_p2rw_mined_together():
    c = Chain()
    k = funded_kit(c)
    c.submit(k.avt)
    c.submit(k.p2rw)
    mined = c.mine_block()
    assert mined == [k.vault_txid, k.p2rw.txid]
    assert c.spender_of(OutPoint(k.vault_txid, 0)) == k.p2rw.txid
    c.mine(10)
    assert c.submit(k.active_spend()).reason == "missing-input"


def test_missing_input_and_malformed():
    c = Chain()
    k = funded_kit(c)
    assert c.submit(k.p2rw).reason == "missing-input"
    assert c.submit(Transaction(2, 0, [], [])).reason == "malformed"


def test_bad_signature_is_script_reject():
    c = Chain()
    k = funded_kit(c)
    bad = k.avt.with_witness(0, [bytes(97)] * 2 + [k.template.deposit_script.to_bytes()])
    assert c.submit(bad).reason == "script"


def test_duplicate_submission():
    c = Chain()
    k = funded_kit(c)
    assert c.submit(k.avt)
    assert c.submit(k.avt).reason == "duplicate"


def test_negative_fee_rejected():
    c = Chain()
    k = funded_kit(c)
    c.submit(k.avt)
    tx = k.path_spend(fee=-5)
    assert c.submit(tx).reason == "fee"


def _race_pair(c, k, theft_rate, p2rw_rate):
    theft = k.at_feerate(lambda f: k.path_spend(f, THIEF), theft_rate)
    owner = k.at_feerate(lambda f: k.path_spend(f, multisig_script(1, [k.recovery[0].public])), p2rw_rate)
    return theft, owner


def test_rbf_independent_of_submission_order():
    finals = set()
    for order in itertools.permutations(["theft", "owner"]):
        c = Chain()
        k = funded_kit(c)
        c.submit(k.avt)
        c.mine_block()
        txs = dict(zip(["theft", "owner"], _race_pair(c, k, 2, 5)))
        for name in order:
            c.submit(txs[name])
        finals.add(tuple(sorted(c.mempool)))
        assert txs["owner"].txid in c.mempool
    assert len(finals) == 1


def test_lower_feerate_conflict_rejected():
    c = Chain()
    k = funded_kit(c)
    c.submit(k.avt)
    theft, owner = _race_pair(c, k, 2, 5)
    c.submit(owner)
    assert c.submit(theft).reason == "conflict"


def test_private_bribe_beats_public_feerate_in_either_order():
    for order in itertools.permutations([PUB, PRIV]):
        c = Chain(miner_bribe=5)
        k = funded_kit(c)
        c.submit(k.avt)
        c.mine_block()
        theft, owner = _race_pair(c, k, 0, 3)
        for vis in order:
            assert c.submit(theft if vis is PRIV else owner, vis)
        c.mine_block()
        assert c.spender_of(OutPoint(k.vault_txid, 0)) == theft.txid
        assert owner.txid not in c.mempool


def test_private_tx_not_logged_until_mined():
    c = Chain(miner_bribe=5)
    k = funded_kit(c)
    before = c.event_log()
    c.submit(k.avt, PRIV)
    assert c.event_log() == before
    assert c.public_mempool() == []
    c.mine_block()
    assert f"mined {k.vault_txid.hex()}" in c.event_log()


def test_private_parent_invisible_to_public_child():
    c = Chain()
    k = funded_kit(c)
    c.submit(k.avt, PRIV)
    assert c.submit(k.p2rw, PUB).reason == "missing-input"


def test_feerate_tie_goes_to_smaller_txid():
    c = Chain()
    k = funded_kit(c)
    c.submit(k.avt)
    c.mine_block()
    a = k.at_feerate(lambda f: k.path_spend(f, THIEF), 3)
    b = k.at_feerate(lambda f: k.path_spend(f, multisig_script(1, [bytes(32)])), 3)
    # equal feerates cannot replace each other, so race them through separate pools
    c.submit(a, PUB)
    c.submit(b, PRIV, bribe=0)
    c.mine_block()
    assert c.spender_of(OutPoint(k.vault_txid, 0)) == min(a.txid, b.txid)


def test_conservation_and_csv_audit_random_runs():
    rng = random.Random(5)
    c = Chain(miner_bribe=3)
    kits = [funded_kit(c, seed=s) for s in range(6)]
    for k in kits:
        c.submit(k.avt, rng.choice([PUB, PRIV]))
    for _ in range(12):
        for k in kits:
            choice = rng.random()
            if choice < 0.2:
                c.submit(k.p2rw, PUB)
            elif choice < 0.4:
                c.submit(k.at_feerate(lambda f: k.path_spend(f, THIEF), rng.randint(0, 6)), PRIV)
            elif choice < 0.6:
                c.submit(k.active_spend(fee=rng.randint(0, 5000)))
        c.mine_block()
        assert c.conserved()
    assert c.csv_audit() == []


def _scenario(seed):
    rng = random.Random(seed)
    c = Chain(miner_bribe=2)
    kits = [funded_kit(c, seed=s) for s in range(3)]
    for k in kits:
        c.submit(k.avt)
    for _ in range(8):
        k = rng.choice(kits)
        c.submit(rng.choice([k.p2rw, k.active_spend()]), rng.choice([PUB, PRIV]))
        c.mine_block()
    return c.blocks, c.snapshot()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_deterministic_replay(seed):
    assert _scenario(seed) == _scenario(seed)


def test_validate_does_not_mutate():
    c = Chain()
    k = funded_kit(c)
    snap = c.snapshot()
    assert c.validate(k.avt)
    assert c.snapshot() == snap


def test_priority_includes_bribe_only_when_private():
    c = Chain(miner_bribe=7)
    k = funded_kit(c)
    c.submit(k.avt, PRIV)
    entry = c.mempool[k.vault_txid]
    assert entry.priority == entry.feerate + 7
    assert entry.feerate == Fraction(entry.fee, k.avt.vsize())
