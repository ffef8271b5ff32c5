"""Hashing primitives, Merkle trees with inclusion proofs, and fixed-depth
sparse Merkle trees with inclusion and non-inclusion proofs.

Two hashing regimes coexist on purpose:

* chain-style Merkle trees hash leaves once with double SHA-256 and pair
  internal nodes with double SHA-256, duplicating the last element of odd
  levels (the Bitcoin transaction-tree convention);
* sparse Merkle trees use single SHA-256 with domain-separation prefixes
  0x00 (leaf) / 0x01 (node) so a leaf digest can never collide with an
  internal node.

SMT keys are integers in [0, 2**depth); the path from the root follows the
key's big-endian bits. The absent value is the empty byte string, so
``H(absent) == leaf_digest(b"")`` and updating a key to b"" deletes it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Mapping

HASH_LEN = 32


class EmptyInput(ValueError):
    """A Merkle tree needs at least one leaf."""


class IndexOutOfRange(IndexError):
    """Leaf index outside the tree."""


class KeyWidthMismatch(ValueError):
    """SMT key does not fit in the tree's depth."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256d(data: bytes) -> bytes:
    """Double SHA-256, the chain's hash for headers, txids and Merkle nodes."""
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


# ---------------------------------------------------------------------------
# Classical Merkle tree (inclusion proofs only)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MerkleProof:
    """Sibling path for one leaf, ordered bottom-up."""

    leaf_index: int
    siblings: tuple[bytes, ...]

    def to_bytes(self) -> bytes:
        if not 0 <= self.leaf_index < 2**32:
            raise IndexOutOfRange(f"leaf index {self.leaf_index} does not fit the 4-byte header")
        return self.leaf_index.to_bytes(4, "little") + b"".join(self.siblings)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MerkleProof":
        if len(raw) < 4 or (len(raw) - 4) % HASH_LEN:
            raise ValueError(f"malformed proof of {len(raw)} bytes")
        index = int.from_bytes(raw[:4], "little")
        body = raw[4:]
        siblings = tuple(body[i : i + HASH_LEN] for i in range(0, len(body), HASH_LEN))
        return cls(index, siblings)


def _merkle_levels(leaves: Iterable[bytes]) -> list[list[bytes]]:
    level = [sha256d(leaf) for leaf in leaves]
    if not level:
        raise EmptyInput("no leaves")
    levels = [level]
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
        level = [sha256d(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(level)
    return levels


def merkle_root(leaves: Iterable[bytes]) -> bytes:
    """Root of the tree over sha256d-hashed leaves, duplicating odd tails."""
    return _merkle_levels(leaves)[-1][0]


def merkle_prove(leaves: list[bytes], index: int) -> MerkleProof:
    """Inclusion proof for ``leaves[index]``; duplicated levels use the duplicate as sibling."""
    if not 0 <= index < len(leaves):
        raise IndexOutOfRange(f"index {index} not in [0, {len(leaves)})")
    levels = _merkle_levels(leaves)
    siblings = []
    idx = index
    for level in levels[:-1]:
        sibling_idx = idx ^ 1
        if sibling_idx >= len(level):
            sibling_idx = idx  # odd level: the duplicate is the node itself
        siblings.append(level[sibling_idx])
        idx >>= 1
    return MerkleProof(index, tuple(siblings))


def merkle_verify(leaf: bytes, index: int, proof: MerkleProof, root: bytes) -> bool:
    """True iff hashing sha256d(leaf) up the sibling path reproduces root."""
    if index < 0:
        return False
    acc = sha256d(leaf)
    idx = index
    for sibling in proof.siblings:
        if idx & 1:
            acc = sha256d(sibling + acc)
        else:
            acc = sha256d(acc + sibling)
        idx >>= 1
    return acc == root


# ---------------------------------------------------------------------------
# Sparse Merkle tree (inclusion and non-inclusion proofs)
# ---------------------------------------------------------------------------

_LEAF_TAG = b"\x00"
_NODE_TAG = b"\x01"

ABSENT = b""


def smt_leaf_digest(value: bytes) -> bytes:
    return sha256(_LEAF_TAG + value)


def smt_node_digest(left: bytes, right: bytes) -> bytes:
    return sha256(_NODE_TAG + left + right)


def default_digests(depth: int) -> tuple[bytes, ...]:
    """Digest of the all-empty subtree per height; [0] is the empty leaf."""
    out = [smt_leaf_digest(ABSENT)]
    for _ in range(depth):
        out.append(smt_node_digest(out[-1], out[-1]))
    return tuple(out)


@dataclass(frozen=True)
class SmtProof:
    """Sibling path for one key, leaf to root, plus the leaf digest it opens."""

    key: int
    siblings: tuple[bytes, ...]
    leaf_digest: bytes

    def to_bytes(self) -> bytes:
        if not 0 <= self.key < 2**32:
            raise KeyWidthMismatch(f"key {self.key} does not fit the 4-byte header")
        return self.key.to_bytes(4, "little") + self.leaf_digest + b"".join(self.siblings)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SmtProof":
        if len(raw) < 4 + HASH_LEN or (len(raw) - 4) % HASH_LEN:
            raise ValueError(f"malformed proof of {len(raw)} bytes")
        key = int.from_bytes(raw[:4], "little")
        body = raw[4:]
        digests = [body[i : i + HASH_LEN] for i in range(0, len(body), HASH_LEN)]
        return cls(key, tuple(digests[1:]), digests[0])


class Smt:
    """Fixed-depth SMT over integer keys; only non-default nodes are stored.

    Single-writer: updates mutate in place and return the new root.
    """

    def __init__(self, depth: int, entries: Mapping[int, bytes] | None = None):
        if depth < 1:
            raise ValueError("depth must be positive")
        self.depth = depth
        self.defaults = default_digests(depth)
        self.entries: dict[int, bytes] = {}
        # (height, index) -> digest; height 0 is the leaf layer
        self._nodes: dict[tuple[int, int], bytes] = {}
        for key, value in (entries or {}).items():
            self.update(key, value)

    def _check_key(self, key: int) -> None:
        if not 0 <= key < (1 << self.depth):
            raise KeyWidthMismatch(f"key {key} is not a {self.depth}-bit value")

    def _node(self, height: int, index: int) -> bytes:
        return self._nodes.get((height, index), self.defaults[height])

    def root(self) -> bytes:
        return self._node(self.depth, 0)

    def get(self, key: int) -> bytes:
        self._check_key(key)
        return self.entries.get(key, ABSENT)

    def update(self, key: int, value: bytes | None) -> bytes:
        """Set ``key`` to ``value`` (empty/None deletes) and return the new root."""
        self._check_key(key)
        if value:
            self.entries[key] = value
            self._nodes[(0, key)] = smt_leaf_digest(value)
        else:
            self.entries.pop(key, None)
            self._nodes.pop((0, key), None)
        index = key
        for height in range(self.depth):
            parent = index >> 1
            combined = smt_node_digest(self._node(height, parent * 2), self._node(height, parent * 2 + 1))
            if combined == self.defaults[height + 1]:
                self._nodes.pop((height + 1, parent), None)
            else:
                self._nodes[(height + 1, parent)] = combined
            index = parent
        return self.root()

    def prove(self, key: int) -> SmtProof:
        """Proof of the key's current state: inclusion if set, non-inclusion if not."""
        self._check_key(key)
        siblings = tuple(self._node(height, (key >> height) ^ 1) for height in range(self.depth))
        return SmtProof(key, siblings, smt_leaf_digest(self.get(key)))


def smt_root(entries: Mapping[int, bytes], depth: int) -> bytes:
    """Root of the 2**depth-leaf tree holding ``entries``; never materializes it."""
    return Smt(depth, entries).root()


def smt_update(smt: Smt, key: int, value: bytes | None) -> bytes:
    return smt.update(key, value)


def smt_prove(smt: Smt, key: int) -> SmtProof:
    return smt.prove(key)


def smt_verify(root: bytes, key: int, claim: bytes, proof: SmtProof) -> bool:
    """True iff hashing the claimed leaf up the key's bit path reproduces root.

    ``claim`` is the value asserted at the key; the empty byte string claims
    non-inclusion.
    """
    depth = len(proof.siblings)
    if key != proof.key or not 0 <= key < (1 << depth):
        return False
    expected_leaf = smt_leaf_digest(claim)
    if proof.leaf_digest != expected_leaf:
        return False
    acc = expected_leaf
    for height, sibling in enumerate(proof.siblings):
        if (key >> height) & 1:
            acc = smt_node_digest(sibling, acc)
        else:
            acc = smt_node_digest(acc, sibling)
    return acc == root
