import random

import pytest

from loanlab.btcsim import (
    KeyPair,
    ScriptFailure,
    SimChain,
    TxOut,
    compress,
    hash160,
    keygen,
    p2pkh_script,
    point_mul,
    sign,
    verify_sig,
)
from loanlab.btcsim.keys import ORDER
from loanlab.channel import (
    AmountOutOfRange,
    ChannelState,
    IndexOutOfRange,
    InsufficientBalance,
    InsufficientFunds,
    Expired,
    NotOldState,
    SecretUnknown,
    Side,
    WrongPreimage,
    build_funding_tx,
    derive_revocation_pubkey,
    derive_revocation_secret,
    split_amount,
)
from loanlab.commitments import sha256
from loanlab.btcsim.tx import sighash


def make_channel(collateral=100_000, installments=5, seed=b"chan", lt=(25, 30)):
    rng = random.Random(int.from_bytes(seed, "big"))
    kp_b, kp_l = keygen(rng), keygen(rng)
    state = ChannelState(
        collateral=collateral,
        kp_borrower=kp_b,
        kp_lender=kp_l,
        locktime_borrower=lt[0],
        locktime_lender=lt[1],
        installments=installments,
        seed=seed,
    )
    return state, kp_b, kp_l


def funded_channel(collateral=100_000, installments=5, seed=b"chan"):
    state, kp_b, kp_l = make_channel(collateral, installments, seed)
    chain = SimChain([TxOut(collateral, p2pkh_script(state.params.addr_borrower))])
    coin = next(op for op, out in chain.utxos.items() if out.amount == collateral)
    funding = state.build_funding_tx([(coin[0], coin[1], collateral)])
    digest = sighash(funding, 0, chain.utxos[coin])
    funding.inputs[0].witness = (sign(digest, kp_b), compress(kp_b.pk))
    chain.submit_tx(funding)
    chain.advance_time(600)
    chain.mine_block()
    state.mark_open()
    return chain, state, kp_b, kp_l


# -- funding ------------------------------------------------------------------


def test_funding_tx_single_p2wsh_output():
    state, _, _ = make_channel()
    tx = state.build_funding_tx([(b"\x01" * 32, 0, 100_000)])
    assert len(tx.outputs) == 1
    assert tx.outputs[0].amount == 100_000
    spk = tx.outputs[0].script_pubkey
    from loanlab.btcsim import is_p2wsh

    assert is_p2wsh(spk)
    # the committed redeem script is the 2-of-2 with the lender key first
    from loanlab.channel import funding_script

    assert spk.items[1] == sha256(funding_script(state.params.pk_lender, state.params.pk_borrower).assemble())


def test_funding_inputs_must_sum_to_collateral():
    state, _, _ = make_channel()
    with pytest.raises(InsufficientFunds):
        build_funding_tx(state.params, [(b"\x01" * 32, 0, 99_999)])


# -- revocation key derivation ---------------------------------------------------


def test_revocation_pubkey_matches_scalar_side():
    rng = random.Random(11)
    for _ in range(10):
        q = rng.randrange(1, ORDER)
        c = rng.randrange(1, ORDER)
        derived_point = derive_revocation_pubkey(point_mul(q), point_mul(c))
        assert derived_point == point_mul(derive_revocation_secret(q, c))


def test_revocation_swapping_points_changes_result():
    q, c = point_mul(123), point_mul(456)
    assert derive_revocation_pubkey(q, c) != derive_revocation_pubkey(c, q)


def test_revocation_secret_signs_for_derived_pubkey():
    secret = derive_revocation_secret(777, 888)
    pub = derive_revocation_pubkey(point_mul(777), point_mul(888))
    kp = KeyPair.from_secret(secret)
    assert kp.pk == pub
    digest = sha256(b"payload")
    assert verify_sig(digest, pub, sign(digest, kp))


# -- commitment construction ---------------------------------------------------


def test_state_zero_pays_everything_to_lender():
    _, state, _, _ = funded_channel()
    pair = state.commitment_pair(0)
    assert [o.amount for o in pair.tx_borrower.outputs] == [0, 100_000]
    assert [o.amount for o in pair.tx_lender.outputs] == [100_000, 0]


def test_final_state_pays_everything_to_borrower():
    _, state, _, _ = funded_channel()
    pair = state.commitment_pair(5)
    assert [o.amount for o in pair.tx_borrower.outputs] == [100_000, 0]


def test_intermediate_amounts_floor_with_final_remainder():
    _, state, _, _ = funded_channel(collateral=100, installments=3)
    assert [o.amount for o in state.commitment_pair(1).tx_borrower.outputs] == [33, 67]
    assert [o.amount for o in state.commitment_pair(2).tx_borrower.outputs] == [66, 34]
    assert [o.amount for o in state.commitment_pair(3).tx_borrower.outputs] == [100, 0]


def test_split_amount_telescopes_exactly():
    for a in (1, 7, 99, 100_000, 12_345_677):
        for n in (1, 2, 3, 7, 10):
            assert split_amount(a, n, n) == a
            previous = 0
            for i in range(n + 1):
                bal = split_amount(a, i, n)
                assert bal >= previous
                previous = bal


def test_commitment_index_bounds():
    _, state, _, _ = funded_channel()
    with pytest.raises(IndexOutOfRange):
        state.commitment_pair(6)
    with pytest.raises(IndexOutOfRange):
        state.commitment_pair(-1)


def test_pair_outputs_always_sum_to_collateral():
    _, state, _, _ = funded_channel(collateral=99_991, installments=7)
    for i in range(8):
        pair = state.commitment_pair(i)
        assert sum(o.amount for o in pair.tx_borrower.outputs) == 99_991
        assert sum(o.amount for o in pair.tx_lender.outputs) == 99_991


def test_pair_txs_are_asymmetric_same_outpoint():
    _, state, _, _ = funded_channel()
    for i in range(6):
        pair = state.commitment_pair(i)
        assert pair.tx_borrower.serialize() != pair.tx_lender.serialize()
        assert pair.tx_borrower.inputs[0].outpoint() == pair.tx_lender.inputs[0].outpoint()


# -- signing and broadcasting -----------------------------------------------------


def test_countersigned_commitment_accepted():
    chain, state, _, _ = funded_channel()
    pair = state.commitment_pair(0)
    txid = state.countersign_and_broadcast(chain, pair, Side.BORROWER)
    chain.mine_block()
    assert chain.find_tx(txid) is not None


def test_commitment_witness_from_wrong_tx_rejected():
    chain, state, kp_b, kp_l = funded_channel()
    pair = state.commitment_pair(1)
    tx_b, tx_l = pair.tx_borrower, pair.tx_lender
    # both sigs over the LENDER's tx attached to the BORROWER's tx
    tx_b.inputs[0].witness = state.funding_witness(tx_l)
    with pytest.raises(ScriptFailure):
        chain.submit_tx(tx_b)


def test_second_spend_of_funding_rejected():
    chain, state, _, _ = funded_channel()
    pair = state.commitment_pair(0)
    state.countersign_and_broadcast(chain, pair, Side.BORROWER)
    chain.mine_block()
    from loanlab.btcsim import MissingUtxo

    tx_l = pair.tx_lender
    tx_l.inputs[0].witness = state.funding_witness(tx_l)
    with pytest.raises(MissingUtxo):
        chain.submit_tx(tx_l)


# -- revocation punishment ----------------------------------------------------------


def test_punish_requires_reveal_and_old_state():
    chain, state, _, _ = funded_channel()
    old = state.commitment_pair(1)
    state.advance(2)
    txid = state.countersign_and_broadcast(chain, old, Side.LENDER)
    chain.mine_block()
    with pytest.raises(SecretUnknown):
        state.punish(chain, txid)
    state.reveal_secret(Side.LENDER, 1)
    sweep = state.punish(chain, txid)
    chain.mine_block()
    assert chain.find_tx(sweep.txid()) is not None
    # amount equals the revocable output
    assert sweep.outputs[0].amount == old.tx_lender.outputs[0].amount


def test_punish_current_state_refused():
    chain, state, _, _ = funded_channel()
    state.advance(2)
    current = state.commitment_pair(2)
    txid = state.countersign_and_broadcast(chain, current, Side.BORROWER)
    chain.mine_block()
    with pytest.raises(NotOldState):
        state.punish(chain, txid)


def test_reveal_refuses_current_or_future_state():
    _, state, _, _ = funded_channel()
    state.advance(1)
    with pytest.raises(NotOldState):
        state.reveal_secret(Side.BORROWER, 1)
    assert state.reveal_secret(Side.BORROWER, 0)


def test_punish_matrix_every_old_state_both_sides():
    for cheater in (Side.BORROWER, Side.LENDER):
        for old_index in range(5):
            chain, state, _, _ = funded_channel(seed=b"matrix")
            old = state.commitment_pair(old_index)
            state.advance(5)
            state.reveal_secret(cheater, old_index)
            txid = state.countersign_and_broadcast(chain, old, cheater)
            chain.mine_block()
            sweep = state.punish(chain, txid)
            chain.mine_block()
            assert chain.find_tx(sweep.txid()) is not None


def test_delayed_path_respects_locktime():
    from loanlab.btcsim import EvalContext, Tx, TxIn, TxRejected, eval_script
    from loanlab.btcsim import keys as K

    chain, state, _, _ = funded_channel()  # LT_B = 25
    state.advance(3)
    pair = state.commitment_pair(3)
    txid = state.countersign_and_broadcast(chain, pair, Side.BORROWER)
    chain.mine_block()
    # premature on-chain sweep is rejected (non-final or script failure)
    with pytest.raises(TxRejected):
        state.sweep_delayed_output(chain, Side.BORROWER, txid)
    # script-level: the owner's branch fails at every height below the
    # locktime and succeeds from it onward
    delayed = pair.tx_borrower.outputs[0]
    kp_b = state._keys[Side.BORROWER]
    for height in range(20, 31):
        sweep = Tx(
            inputs=(TxIn(txid, 0),),
            outputs=(TxOut(delayed.amount, p2pkh_script(state.params.addr_borrower)),),
            locktime=25,
        )
        sig = K.sign(sighash(sweep, 0, delayed), kp_b)
        sweep.inputs[0].witness = (sig, b"\x01")
        ok = eval_script(sweep.inputs[0].witness, delayed.script_pubkey, EvalContext(sweep, 0, delayed, height))
        assert ok is (height >= 25)
    chain.mine_until_height(25)
    sweep = state.sweep_delayed_output(chain, Side.BORROWER, txid)
    chain.mine_block()
    assert chain.find_tx(sweep.txid()) is not None
    assert sweep.outputs[0].amount == pair.tx_borrower.outputs[0].amount


# -- HTLC --------------------------------------------------------------------------


def test_htlc_fulfill_shifts_balance():
    _, state, _, _ = funded_channel()
    state.advance(3)  # borrower holds 60000
    preimage = b"preimage-R"
    payment_hash = sha256(preimage)
    before = dict(state.balances)
    pair = state.add_htlc(Side.BORROWER, 10_000, payment_hash, cltv_expiry=50)
    assert len(pair.tx_borrower.outputs) == 3
    assert state.balances[Side.BORROWER] == before[Side.BORROWER] - 10_000
    state.fulfill_htlc(preimage, height=10)
    assert state.balances[Side.LENDER] == before[Side.LENDER] + 10_000
    assert not state.htlcs


def test_htlc_wrong_preimage_and_expiry():
    _, state, _, _ = funded_channel()
    state.advance(3)
    payment_hash = sha256(b"right")
    state.add_htlc(Side.BORROWER, 5_000, payment_hash, cltv_expiry=50)
    with pytest.raises(WrongPreimage):
        state.fulfill_htlc(b"wrong", height=10)
    with pytest.raises(Expired):
        state.fulfill_htlc(b"right", height=50)
    state.fail_htlc()
    assert state.balances[Side.BORROWER] == split_amount(100_000, 3, 5)


def test_htlc_needs_balance():
    _, state, _, _ = funded_channel()
    state.advance(0)  # borrower holds nothing
    with pytest.raises(InsufficientBalance):
        state.add_htlc(Side.BORROWER, 1, sha256(b"x"), 50)


def test_htlc_conservation():
    _, state, _, _ = funded_channel()
    state.advance(2)
    state.add_htlc(Side.LENDER, 7_000, sha256(b"r"), 60)
    total = sum(state.balances.values()) + sum(h.amount for h in state.htlcs)
    assert total == state.params.collateral


def test_htlc_onchain_claim_truth_table():
    chain, state, _, _ = funded_channel()
    state.advance(3)
    preimage = b"the-preimage"
    pair = state.add_htlc(Side.BORROWER, 10_000, sha256(preimage), cltv_expiry=20)
    txid = state.countersign_and_broadcast(chain, pair, Side.BORROWER)
    chain.mine_block()
    htlc_out = pair.tx_borrower.outputs[2]
    from loanlab.btcsim import EvalContext, Tx, TxIn, eval_script
    from loanlab.btcsim import keys as K

    kp_l = state._keys[Side.LENDER]
    kp_b = state._keys[Side.BORROWER]

    def attempt(witness_builder, height, locktime=0):
        tx = Tx(
            inputs=(TxIn(txid, 2),),
            outputs=(TxOut(10_000, p2pkh_script(state.params.addr_lender)),),
            locktime=locktime,
        )
        digest = sighash(tx, 0, htlc_out)
        tx.inputs[0].witness = witness_builder(digest)
        return eval_script(tx.inputs[0].witness, htlc_out.script_pubkey, EvalContext(tx, 0, htlc_out, height))

    # recipient (lender) claims with preimage before expiry
    assert attempt(lambda d: (K.sign(d, kp_l), preimage, b"\x01"), height=5)
    # wrong preimage fails
    assert not attempt(lambda d: (K.sign(d, kp_l), b"nope", b"\x01"), height=5)
    # wrong key fails
    assert not attempt(lambda d: (K.sign(d, kp_b), preimage, b"\x01"), height=5)
    # offerer (borrower) refund path: fails before expiry, works after
    assert not attempt(lambda d: (K.sign(d, kp_b), b""), height=5, locktime=0)
    assert attempt(lambda d: (K.sign(d, kp_b), b""), height=20, locktime=20)


# -- mutual close -----------------------------------------------------------------


def test_close_tx_splits_and_broadcasts():
    chain, state, _, _ = funded_channel()
    supply = chain.total_supply()
    txid = state.broadcast_close(chain, to_lender=30_000)
    chain.mine_block()
    record, index = chain.find_tx(txid)
    tx = record.txs[index]
    assert [o.amount for o in tx.outputs] == [30_000, 70_000]
    assert chain.total_supply() == supply


def test_close_amount_bounds():
    _, state, _, _ = funded_channel()
    with pytest.raises(AmountOutOfRange):
        state.build_close_tx(100_001)
    assert [o.amount for o in state.build_close_tx(0).outputs] == [0, 100_000]
    assert [o.amount for o in state.build_close_tx(100_000).outputs] == [100_000, 0]
