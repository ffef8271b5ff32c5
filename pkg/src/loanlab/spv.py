"""SPV engine: header parsing and validation, confirmed-SMT plus pending-cache
chain state, reorganization by cumulative work, and transaction inclusion
verification.

The block hash is the double SHA-256 of the 80-byte header, interpreted as a
little-endian 256-bit integer (internal byte order) wherever it is compared
to a target. The chain keeps every header it ever accepted; heights at least
``depth_param`` below the tip are committed to a sparse Merkle tree keyed by
height, and that commitment is rewritten whenever a heavier chain displaces
the old one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .commitments import (
    MerkleProof,
    Smt,
    SmtProof,
    merkle_verify,
    sha256,
    sha256d,
)

HEADER_LEN = 80
MAX_FUTURE_DRIFT = 7200  # seconds a timestamp may run ahead of local time
MEDIAN_WINDOW = 11
SMT_DEPTH = 32  # height key space for the confirmed commitment


class SpvError(Exception):
    pass


class BadLength(SpvError):
    pass


class NegativeOrOverflow(SpvError):
    pass


class ZeroTarget(SpvError):
    pass


class UnknownBlock(SpvError):
    pass


class UnknownParent(SpvError):
    pass


class DuplicateBlock(SpvError):
    pass


class BadTimestamp(SpvError):
    pass


class BadBits(SpvError):
    pass


class InsufficientPow(SpvError):
    pass


class NotYetConfirmed(SpvError):
    pass


class BatchFailed(SpvError):
    """Raised by batch ingestion; earlier elements stay applied."""

    def __init__(self, index: int, cause: SpvError, applied: list):
        super().__init__(f"batch element {index} rejected: {cause}")
        self.index = index
        self.cause = cause
        self.applied = applied


@dataclass(frozen=True)
class BlockHeader:
    version: int
    prev: bytes
    merkle_root: bytes
    timestamp: int
    bits: int
    nonce: int

    def serialize(self) -> bytes:
        return (
            self.version.to_bytes(4, "little", signed=True)
            + self.prev
            + self.merkle_root
            + self.timestamp.to_bytes(4, "little")
            + self.bits.to_bytes(4, "little")
            + self.nonce.to_bytes(4, "little")
        )

    def hash(self) -> bytes:
        return sha256d(self.serialize())


def parse_header(raw: bytes) -> BlockHeader:
    """Decode the 80-byte little-endian wire layout; inverse of serialize."""
    if len(raw) != HEADER_LEN:
        raise BadLength(f"header must be exactly 80 bytes, got {len(raw)}")
    return BlockHeader(
        version=int.from_bytes(raw[0:4], "little", signed=True),
        prev=raw[4:36],
        merkle_root=raw[36:68],
        timestamp=int.from_bytes(raw[68:72], "little"),
        bits=int.from_bytes(raw[72:76], "little"),
        nonce=int.from_bytes(raw[76:80], "little"),
    )


def bits_to_target(bits: int) -> int:
    """Expand a compact target: mantissa * 256**(exponent - 3)."""
    if not 0 <= bits <= 0xFFFFFFFF:
        raise NegativeOrOverflow(f"compact 0x{bits:x} outside 32 bits")
    exponent = bits >> 24
    mantissa = bits & 0x007FFFFF
    if bits & 0x00800000:
        raise NegativeOrOverflow(f"compact 0x{bits:08x} encodes a negative target")
    if exponent <= 3:
        target = mantissa >> (8 * (3 - exponent))
    else:
        target = mantissa << (8 * (exponent - 3))
    if target >= 1 << 256:
        raise NegativeOrOverflow(f"compact 0x{bits:08x} overflows 256 bits")
    return target


def target_to_bits(target: int) -> int:
    """Canonical compact form of a target; inverse of bits_to_target on it."""
    if target < 0 or target >= 1 << 256:
        raise NegativeOrOverflow(f"target outside [0, 2**256)")
    if target == 0:
        return 0
    size = (target.bit_length() + 7) // 8
    if size <= 3:
        mantissa = target << (8 * (3 - size))
    else:
        mantissa = target >> (8 * (size - 3))
    if mantissa & 0x00800000:  # keep the sign bit clear
        mantissa >>= 8
        size += 1
    return (size << 24) | mantissa


def work(target: int) -> int:
    """Work contributed by one block at this target; decreasing in target."""
    if target <= 0:
        raise ZeroTarget("target must be positive")
    return (1 << 256) // (target + 1)


def hash_to_int(block_hash: bytes) -> int:
    return int.from_bytes(block_hash, "little")


@dataclass(frozen=True)
class StoredBlock:
    header: BlockHeader
    hash: bytes
    height: int
    cumulative_work: int


@dataclass(frozen=True)
class SpvProof:
    """Inclusion bundle for one transaction: block hash, raw tx, Merkle path."""

    block_hash: bytes
    tx: bytes
    inclusion: MerkleProof


@dataclass(frozen=True)
class AddOutcome:
    EXTENDED_MAIN = "ExtendedMain"
    NEW_FORK = "NewFork"
    REORGANIZED = "Reorganized"

    kind: str
    block: StoredBlock
    old_tip: bytes | None = None
    new_tip: bytes | None = None


class HeaderChain:
    """Single-writer header-chain state: all known blocks, the heaviest tip,
    and the confirmed-height SMT.

    The genesis header is supplied by configuration, accepted without
    proof-of-work, and confirmed by definition; its bits define the initial
    (and maximum) target unless ``max_target`` overrides it.
    """

    def __init__(
        self,
        genesis_header: BlockHeader,
        *,
        depth_param: int = 6,
        retarget_interval: int = 2016,
        block_spacing: int = 600,
        max_target: int | None = None,
        max_future_drift: int = MAX_FUTURE_DRIFT,
    ):
        self.depth_param = depth_param
        self.retarget_interval = retarget_interval
        self.target_timespan = retarget_interval * block_spacing
        self.max_future_drift = max_future_drift
        self.max_target = max_target if max_target is not None else bits_to_target(genesis_header.bits)
        genesis_target = bits_to_target(genesis_header.bits)
        self.genesis = StoredBlock(genesis_header, genesis_header.hash(), 0, work(genesis_target))
        self.blocks: dict[bytes, StoredBlock] = {self.genesis.hash: self.genesis}
        self.main_tip = self.genesis.hash
        self._main: list[bytes] = [self.genesis.hash]  # height -> main-chain hash
        self.confirmed_smt = Smt(SMT_DEPTH)
        self.confirmed_height = 0
        self.confirmed_smt.update(0, self.genesis.hash)
        self.events: list[dict] = []

    # -- lookups ------------------------------------------------------------

    def tip(self) -> StoredBlock:
        return self.blocks[self.main_tip]

    def _ancestor(self, block: StoredBlock, generations: int) -> StoredBlock:
        for _ in range(generations):
            parent = self.blocks.get(block.header.prev)
            if parent is None:
                return block
            block = parent
        return block

    def median_time_past(self, tip_hash: bytes) -> int:
        """Median timestamp of up to the 11 most recent blocks ending at tip."""
        block = self.blocks.get(tip_hash)
        if block is None:
            raise UnknownBlock(f"no block {tip_hash.hex()}")
        stamps = []
        for _ in range(MEDIAN_WINDOW):
            stamps.append(block.header.timestamp)
            parent = self.blocks.get(block.header.prev)
            if parent is None:
                break
            block = parent
        stamps.sort()
        return stamps[len(stamps) // 2]

    def next_target(self, parent: StoredBlock) -> int:
        """Target required of the block after ``parent``.

        Off retarget boundaries the target is inherited. On a boundary the
        timespan of the last ``retarget_interval - 1`` inter-block intervals
        is measured, clamped to [1/4, 4] of the expected timespan, and scales
        the target, capped at the configured maximum.
        """
        if parent.hash not in self.blocks:
            raise UnknownBlock(f"no block {parent.hash.hex()}")
        current = bits_to_target(parent.header.bits)
        if (parent.height + 1) % self.retarget_interval:
            return current
        window_start = self._ancestor(parent, self.retarget_interval - 1)
        actual = parent.header.timestamp - window_start.header.timestamp
        actual = max(actual, self.target_timespan // 4)
        actual = min(actual, self.target_timespan * 4)
        return min(current * actual // self.target_timespan, self.max_target)

    def required_bits(self, parent: StoredBlock) -> int:
        return target_to_bits(self.next_target(parent))

    # -- validation and ingestion -------------------------------------------

    def validate_header(self, header: BlockHeader, now: int) -> StoredBlock:
        """Run validation rules and return the candidate with height and
        cumulative work filled in; nothing is stored."""
        block_hash = header.hash()
        if block_hash in self.blocks:
            raise DuplicateBlock(f"block {block_hash.hex()} already stored")
        parent = self.blocks.get(header.prev)
        if parent is None:
            raise UnknownParent(f"previous block {header.prev.hex()} unknown")
        median = self.median_time_past(parent.hash)
        if header.timestamp <= median:
            raise BadTimestamp(f"timestamp {header.timestamp} does not exceed median {median}")
        if header.timestamp > now + self.max_future_drift:
            raise BadTimestamp(f"timestamp {header.timestamp} more than two hours past {now}")
        required = self.required_bits(parent)
        if header.bits != required:
            raise BadBits(f"bits 0x{header.bits:08x} do not match required 0x{required:08x}")
        target = bits_to_target(header.bits)
        if hash_to_int(block_hash) >= target:
            raise InsufficientPow(f"hash of {block_hash.hex()} is not below the target")
        return StoredBlock(header, block_hash, parent.height + 1, parent.cumulative_work + work(target))

    def add_block_header(self, raw: bytes, now: int) -> AddOutcome:
        """Validate and store one header; the main tip moves only on a strict
        cumulative-work increase."""
        header = parse_header(raw)
        block = self.validate_header(header, now)
        self.blocks[block.hash] = block
        old_tip_hash = self.main_tip
        old_tip = self.tip()
        if header.prev == old_tip_hash:
            kind = AddOutcome.EXTENDED_MAIN
            self.main_tip = block.hash
            self._main.append(block.hash)
            self._sync_confirmed(reorged=False)
            outcome = AddOutcome(kind, block)
        elif block.cumulative_work > old_tip.cumulative_work:
            kind = AddOutcome.REORGANIZED
            self.main_tip = block.hash
            self._rebuild_main()
            self._sync_confirmed(reorged=True)
            outcome = AddOutcome(kind, block, old_tip=old_tip_hash, new_tip=block.hash)
        else:
            outcome = AddOutcome(AddOutcome.NEW_FORK, block)
        self.events.append({"type": "BlockHeaderAdded", "height": block.height, "hash": block.hash.hex()})
        return outcome

    def add_block_header_batch(self, raws: Iterable[bytes], now: int) -> list[AddOutcome]:
        """Sequential-equivalent batch ingestion: the first failing element
        aborts with its index, earlier elements stay applied."""
        outcomes: list[AddOutcome] = []
        for index, raw in enumerate(raws):
            try:
                outcomes.append(self.add_block_header(raw, now))
            except SpvError as exc:
                raise BatchFailed(index, exc, outcomes) from exc
        return outcomes

    def _rebuild_main(self) -> None:
        chain = []
        block = self.tip()
        while True:
            chain.append(block.hash)
            if block.height == 0:
                break
            block = self.blocks[block.header.prev]
        chain.reverse()
        self._main = chain

    def _sync_confirmed(self, reorged: bool) -> None:
        new_confirmed = max(0, self.tip().height - self.depth_param)
        if reorged:
            for height in sorted(self.confirmed_smt.entries):
                if height > new_confirmed:
                    self.confirmed_smt.update(height, b"")
            start = 0
        else:
            start = self.confirmed_height + 1
        for height in range(start, new_confirmed + 1):
            main_hash = self._main[height]
            if self.confirmed_smt.get(height) != main_hash:
                self.confirmed_smt.update(height, main_hash)
        self.confirmed_height = new_confirmed

    # -- queries --------------------------------------------------------------

    def validate_block_hash(self, block_hash: bytes) -> tuple[bool, int]:
        """Main-chain membership and confirmation count; unknown or orphaned
        blocks report (False, 0)."""
        block = self.blocks.get(block_hash)
        if block is None:
            return (False, 0)
        if block.height >= len(self._main) or self._main[block.height] != block_hash:
            return (False, 0)
        return (True, self.tip().height - block.height)

    def verify_tx(self, proof: SpvProof) -> bool:
        """True iff the block is known and the Merkle path over sha256d(tx)
        reproduces its header's root."""
        block = self.blocks.get(proof.block_hash)
        if block is None:
            return False
        return merkle_verify(proof.tx, proof.inclusion.leaf_index, proof.inclusion, block.header.merkle_root)

    def confirmed_inclusion_proof(self, height: int, allow_absent: bool = False) -> SmtProof:
        """SMT proof that the confirmed chain maps ``height`` to its block
        hash. Heights above the confirmed horizon raise NotYetConfirmed
        unless ``allow_absent`` requests the non-inclusion proof."""
        if height > self.confirmed_height and not allow_absent:
            raise NotYetConfirmed(f"height {height} above confirmed horizon {self.confirmed_height}")
        return self.confirmed_smt.prove(height)

    def state_digest(self) -> bytes:
        """Deterministic digest of the whole chain state, for equivalence
        checks between ingestion orders."""
        acc = sha256(b"")
        for block_hash in sorted(self.blocks):
            block = self.blocks[block_hash]
            record = (
                block_hash
                + block.height.to_bytes(8, "little")
                + block.cumulative_work.to_bytes(64, "little")
                + block.header.serialize()
            )
            acc = sha256(acc + record)
        acc = sha256(acc + self.main_tip)
        acc = sha256(acc + self.confirmed_smt.root())
        acc = sha256(acc + self.confirmed_height.to_bytes(8, "little"))
        return acc
