import hashlib
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loanlab.commitments import (
    ABSENT,
    EmptyInput,
    IndexOutOfRange,
    KeyWidthMismatch,
    MerkleProof,
    Smt,
    SmtProof,
    default_digests,
    merkle_prove,
    merkle_root,
    merkle_verify,
    sha256d,
    smt_leaf_digest,
    smt_node_digest,
    smt_prove,
    smt_root,
    smt_update,
    smt_verify,
)


def h2(data: bytes) -> bytes:
    # independent double-hash path for oracles
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def oracle_merkle_root(leaves):
    """Level-by-level oracle written independently of the implementation."""
    level = [h2(x) for x in leaves]
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [h2(a + b) for a, b in zip(level[::2], level[1::2])]
    return level[0]


def oracle_smt_root(entries, depth):
    """Fully materialized 2**depth-leaf tree; only usable for small depths."""
    layer = [hashlib.sha256(b"\x00" + entries.get(k, b"")).digest() for k in range(1 << depth)]
    while len(layer) > 1:
        layer = [hashlib.sha256(b"\x01" + a + b).digest() for a, b in zip(layer[::2], layer[1::2])]
    return layer[0]


def test_sha256d_empty_matches_independent_composition():
    assert sha256d(b"") == hashlib.sha256(hashlib.sha256(b"").digest()).digest()
    # well-known value of double-SHA256("")
    assert sha256d(b"").hex() == "5df6e0e2761359d30a8275058e299fcc0381534545f55cf43e41983f5d4c9456"


def test_sha256d_is_sha256_composed():
    rng = random.Random(1)
    for _ in range(1000):
        data = rng.randbytes(rng.randrange(0, 64))
        assert sha256d(data) == hashlib.sha256(hashlib.sha256(data).digest()).digest()


def test_sha256d_bit_flip_changes_digest():
    a = b"loan channel"
    b = bytes([a[0] ^ 1]) + a[1:]
    assert sha256d(a) != sha256d(b)


def test_merkle_single_leaf_is_its_hash():
    assert merkle_root([b"x1"]) == sha256d(b"x1")


def test_merkle_two_leaves_pair_once():
    assert merkle_root([b"x1", b"x2"]) == sha256d(sha256d(b"x1") + sha256d(b"x2"))


def test_merkle_three_leaves_duplicates_last():
    h1, h2_, h3 = sha256d(b"x1"), sha256d(b"x2"), sha256d(b"x3")
    expected = sha256d(sha256d(h1 + h2_) + sha256d(h3 + h3))
    assert merkle_root([b"x1", b"x2", b"x3"]) == expected


def test_merkle_empty_rejected():
    with pytest.raises(EmptyInput):
        merkle_root([])


def test_merkle_matches_oracle_for_all_small_sizes():
    rng = random.Random(7)
    for n in range(1, 65):
        leaves = [rng.randbytes(20) for _ in range(n)]
        assert merkle_root(leaves) == oracle_merkle_root(leaves)


def test_merkle_odd_level_equals_explicit_duplicate():
    rng = random.Random(8)
    for n in (3, 5, 7, 11, 13):
        leaves = [rng.randbytes(16) for _ in range(n)]
        # appending the duplicate by hand at the leaf level only matches when
        # the leaf level itself is the odd one
        assert merkle_root(leaves) == merkle_root(leaves + [leaves[-1]])


def test_merkle_prove_single_leaf_empty_path():
    assert merkle_prove([b"only"], 0).siblings == ()


def test_merkle_prove_two_leaves():
    proof = merkle_prove([b"x1", b"x2"], 0)
    assert proof.siblings == (sha256d(b"x2"),)


def test_merkle_prove_out_of_range():
    with pytest.raises(IndexOutOfRange):
        merkle_prove([b"x1"], 1)


def test_merkle_round_trip_every_index_small_trees():
    rng = random.Random(9)
    for n in list(range(1, 17)) + [31, 64]:
        leaves = [rng.randbytes(12) for _ in range(n)]
        root = merkle_root(leaves)
        for i in range(n):
            proof = merkle_prove(leaves, i)
            assert merkle_verify(leaves[i], i, proof, root)


def test_merkle_verify_rejects_wrong_root():
    leaves = [b"a", b"b", b"c", b"d", b"e"]
    proof = merkle_prove(leaves, 2)
    assert not merkle_verify(b"c", 2, proof, sha256d(b"not the root"))


def test_merkle_verify_rejects_any_mutated_sibling():
    rng = random.Random(10)
    leaves = [rng.randbytes(8) for _ in range(13)]
    root = merkle_root(leaves)
    for i in range(len(leaves)):
        proof = merkle_prove(leaves, i)
        for s in range(len(proof.siblings)):
            bad = list(proof.siblings)
            bad[s] = bytes([bad[s][0] ^ 0x40]) + bad[s][1:]
            assert not merkle_verify(leaves[i], i, MerkleProof(i, tuple(bad)), root)


def test_merkle_verify_rejects_wrong_index_and_leaf():
    leaves = [b"a", b"b", b"c", b"d"]
    root = merkle_root(leaves)
    proof = merkle_prove(leaves, 1)
    assert not merkle_verify(b"b", 0, proof, root)
    assert not merkle_verify(b"B", 1, proof, root)


def test_merkle_proof_serialization_round_trip():
    leaves = [b"a", b"b", b"c"]
    proof = merkle_prove(leaves, 2)
    again = MerkleProof.from_bytes(proof.to_bytes())
    assert again == proof


def test_smt_empty_root_depth2_by_hand():
    leaf = smt_leaf_digest(b"")
    level1 = smt_node_digest(leaf, leaf)
    assert smt_root({}, 2) == smt_node_digest(level1, level1)


def test_smt_default_digests_chain():
    dd = default_digests(3)
    assert dd[0] == smt_leaf_digest(ABSENT)
    for j in range(3):
        assert dd[j + 1] == smt_node_digest(dd[j], dd[j])


def test_smt_single_entry_matches_naive():
    assert smt_root({5: b"value"}, 3) == oracle_smt_root({5: b"value"}, 3)


def test_smt_root_matches_naive_random_maps():
    rng = random.Random(11)
    for depth in range(1, 9):
        for _ in range(4):
            n = rng.randrange(0, min(32, 1 << depth) + 1)
            keys = rng.sample(range(1 << depth), n)
            entries = {k: rng.randbytes(rng.randrange(1, 16)) for k in keys}
            assert smt_root(entries, depth) == oracle_smt_root(entries, depth)


def test_smt_key_width_checked():
    with pytest.raises(KeyWidthMismatch):
        smt_root({4: b"v"}, 2)
    with pytest.raises(KeyWidthMismatch):
        Smt(3).update(-1, b"v")


def test_smt_insertion_order_irrelevant():
    entries = {0: b"a", 3: b"b", 5: b"c"}
    a = Smt(4)
    for k in [0, 3, 5]:
        a.update(k, entries[k])
    b = Smt(4)
    for k in [5, 0, 3]:
        b.update(k, entries[k])
    assert a.root() == b.root() == smt_root(entries, 4)


def test_smt_insert_then_delete_restores_root():
    smt = Smt(6, {1: b"one", 9: b"nine"})
    before = smt.root()
    smt_update(smt, 33, b"temp")
    assert smt.root() != before
    smt_update(smt, 33, ABSENT)
    assert smt.root() == before


def test_smt_update_equals_rebuild():
    smt = Smt(5, {2: b"x", 7: b"y"})
    smt.update(7, b"z")
    assert smt.root() == smt_root({2: b"x", 7: b"z"}, 5)


def test_smt_hundred_random_updates_match_naive():
    rng = random.Random(12)
    smt = Smt(8)
    shadow = {}
    for _ in range(100):
        key = rng.randrange(256)
        if shadow and rng.random() < 0.3:
            key = rng.choice(list(shadow))
            del shadow[key]
            smt.update(key, ABSENT)
        else:
            value = rng.randbytes(8)
            shadow[key] = value
            smt.update(key, value)
    assert smt.root() == oracle_smt_root(shadow, 8)


def test_smt_prove_absent_in_empty_tree_uses_defaults():
    smt = Smt(4)
    proof = smt.prove(10)
    assert proof.siblings == tuple(default_digests(4)[:4])
    assert proof.leaf_digest == smt_leaf_digest(ABSENT)


def test_smt_inclusion_round_trip():
    smt = Smt(6, {17: b"present"})
    proof = smt_prove(smt, 17)
    assert smt_verify(smt.root(), 17, b"present", proof)


def test_smt_non_inclusion_next_to_present_key():
    smt = Smt(6, {16: b"neighbour"})
    proof = smt.prove(17)
    assert smt_verify(smt.root(), 17, ABSENT, proof)
    assert smt.root() == oracle_smt_root({16: b"neighbour"}, 6)


def test_smt_verify_rejects_false_non_inclusion():
    smt = Smt(6, {3: b"set"})
    proof = smt.prove(3)
    assert not smt_verify(smt.root(), 3, ABSENT, proof)
    assert smt_verify(smt.root(), 3, b"set", proof)


def test_smt_verify_rejects_tampered_sibling():
    smt = Smt(5, {1: b"a", 17: b"b", 30: b"c"})
    root = smt.root()
    for key in (1, 17, 30, 8):
        proof = smt.prove(key)
        claim = smt.get(key)
        for s in range(len(proof.siblings)):
            bad = list(proof.siblings)
            bad[s] = bad[s][:13] + bytes([bad[s][13] ^ 1]) + bad[s][14:]
            assert not smt_verify(root, key, claim, SmtProof(key, tuple(bad), proof.leaf_digest))


def test_smt_proof_serialization_round_trip():
    smt = Smt(8, {200: b"blockhash"})
    proof = smt.prove(200)
    assert SmtProof.from_bytes(proof.to_bytes()) == proof


@given(st.dictionaries(st.integers(min_value=0, max_value=63), st.binary(min_size=1, max_size=8), max_size=20))
@settings(max_examples=50, deadline=None)
def test_smt_root_pure_function_of_entries(entries):
    depth = 6
    keys = list(entries)
    base = smt_root(entries, depth)
    rng = random.Random(sum(keys) + len(entries))
    for _ in range(3):
        rng.shuffle(keys)
        smt = Smt(depth)
        for k in keys:
            smt.update(k, entries[k])
        assert smt.root() == base


@given(st.lists(st.binary(min_size=1, max_size=12), min_size=1, max_size=24), st.data())
@settings(max_examples=60, deadline=None)
def test_merkle_every_generated_proof_verifies(leaves, data):
    index = data.draw(st.integers(min_value=0, max_value=len(leaves) - 1))
    root = merkle_root(leaves)
    proof = merkle_prove(leaves, index)
    assert merkle_verify(leaves[index], index, proof, root)
