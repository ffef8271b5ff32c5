"""A miniature Bitcoin network: UTXO set, mempool, low-difficulty miner and a
discrete clock, mirrored block by block into an SPV header chain.

The model is zero-fee: every transaction's outputs sum to its inputs, so the
satoshi supply is fixed at the genesis outputs. Blocks must commit to at
least one transaction, and no subsidy exists, so every block carries a
zero-value "anchor" transaction spending the previous block's anchor output
(the genesis provides the first one).
"""

from __future__ import annotations

from dataclasses import dataclass

from ..commitments import merkle_prove, merkle_root
from ..spv import BlockHeader, HeaderChain, SpvProof, bits_to_target, hash_to_int
from .script import EvalContext, Opcode, Script, eval_script
from .tx import NULL_OUTPOINT, Tx, TxIn, TxOut

DEFAULT_BITS = 0x1F010000  # target 2**240: ~65k grinds per block
GENESIS_TIME = 1_700_000_000

ANCHOR_SCRIPT = Script([Opcode.OP_1])


class TxRejected(Exception):
    pass


class MissingUtxo(TxRejected):
    pass


class ScriptFailure(TxRejected):
    pass


class ValueMismatch(TxRejected):
    pass


class NonFinal(TxRejected):
    pass


@dataclass
class Clock:
    height: int
    unix_time: int


@dataclass(frozen=True)
class BlockRecord:
    height: int
    hash: bytes
    header: BlockHeader
    txs: tuple[Tx, ...]

    def export(self) -> dict:
        return {
            "height": self.height,
            "hash": self.hash.hex(),
            "txids": [tx.txid().hex() for tx in self.txs],
        }


def grind_header(
    prev: bytes,
    merkle: bytes,
    timestamp: int,
    bits: int,
    *,
    version: int = 2,
) -> BlockHeader:
    """Grind nonces from zero until the double hash beats the compact target.

    A SHA-256 midstate over the fixed 76-byte prefix is reused across nonces;
    always terminates at desk-scale targets.
    """
    import hashlib

    target = bits_to_target(bits)
    prefix = (
        version.to_bytes(4, "little", signed=True)
        + prev
        + merkle
        + timestamp.to_bytes(4, "little")
        + bits.to_bytes(4, "little")
    )
    base = hashlib.sha256()
    base.update(prefix)
    nonce = 0
    while True:
        inner = base.copy()
        inner.update(nonce.to_bytes(4, "little"))
        digest = hashlib.sha256(inner.digest()).digest()
        if hash_to_int(digest) < target:
            return BlockHeader(version, prev, merkle, timestamp, bits, nonce)
        nonce += 1


class SimChain:
    """Single-writer network simulator driven by the harness event loop."""

    def __init__(
        self,
        genesis_outputs: list[TxOut] | None = None,
        *,
        bits: int = DEFAULT_BITS,
        genesis_time: int = GENESIS_TIME,
        confirm_depth: int = 6,
        retarget_interval: int = 2016,
        block_spacing: int = 600,
    ):
        genesis_tx = Tx(
            inputs=(TxIn(*NULL_OUTPOINT),),
            outputs=(TxOut(0, ANCHOR_SCRIPT),) + tuple(genesis_outputs or ()),
        )
        header = BlockHeader(
            version=2,
            prev=b"\x00" * 32,
            merkle_root=merkle_root([genesis_tx.serialize()]),
            timestamp=genesis_time,
            bits=bits,
            nonce=0,
        )
        self.spv_mirror = HeaderChain(
            header,
            depth_param=confirm_depth,
            retarget_interval=retarget_interval,
            block_spacing=block_spacing,
        )
        self.clock = Clock(height=0, unix_time=genesis_time)
        self.utxos: dict[tuple[bytes, int], TxOut] = {}
        txid = genesis_tx.txid()
        for vout, out in enumerate(genesis_tx.outputs):
            self.utxos[(txid, vout)] = out
        self._anchor = (txid, 0)
        self.mempool: list[Tx] = []
        self._mempool_spent: set[tuple[bytes, int]] = set()
        self.blocks: list[BlockRecord] = [BlockRecord(0, header.hash(), header, (genesis_tx,))]

    # -- transactions ---------------------------------------------------------

    def total_supply(self) -> int:
        unspent = sum(out.amount for out in self.utxos.values())
        in_flight = sum(out.amount for tx in self.mempool for out in tx.outputs)
        reserved = sum(self.utxos[op].amount for op in self._mempool_spent)
        return unspent - reserved + in_flight

    def submit_tx(self, tx: Tx) -> bytes:
        """Admit a transaction to the mempool; all inputs must be unspent and
        every script must evaluate true at the current height."""
        if tx.locktime > self.clock.height:
            raise NonFinal(f"locktime {tx.locktime} above height {self.clock.height}")
        spent = []
        total_in = 0
        for txin in tx.inputs:
            outpoint = txin.outpoint()
            if outpoint not in self.utxos or outpoint in self._mempool_spent or outpoint in spent:
                raise MissingUtxo(f"outpoint {outpoint[0].hex()[:16]}:{outpoint[1]} not spendable")
            spent.append(outpoint)
            total_in += self.utxos[outpoint].amount
        if total_in != sum(out.amount for out in tx.outputs):
            raise ValueMismatch(f"inputs {total_in} != outputs {sum(o.amount for o in tx.outputs)}")
        for index, txin in enumerate(tx.inputs):
            prevout = self.utxos[txin.outpoint()]
            ctx = EvalContext(tx, index, prevout, self.clock.height)
            if not eval_script(txin.witness, prevout.script_pubkey, ctx):
                raise ScriptFailure(f"input {index} does not satisfy its output script")
        self.mempool.append(tx)
        self._mempool_spent.update(spent)
        return tx.txid()

    # -- blocks and time --------------------------------------------------------

    def median_time_past(self) -> int:
        return self.spv_mirror.median_time_past(self.spv_mirror.main_tip)

    def _anchor_tx(self) -> Tx:
        return Tx(inputs=(TxIn(*self._anchor),), outputs=(TxOut(0, ANCHOR_SCRIPT),))

    def mine_block(self, timestamp: int | None = None) -> BlockRecord:
        """Drain the mempool into a block, grind it, feed the header to the
        SPV mirror, and apply the UTXO effects."""
        median = self.median_time_past()
        if timestamp is None:
            timestamp = max(self.clock.unix_time, median + 1)
        if timestamp <= median:
            raise ValueError(f"timestamp {timestamp} not past median {median}")
        anchor = self._anchor_tx()
        txs = (anchor,) + tuple(self.mempool)
        parent = self.spv_mirror.tip()
        header = grind_header(
            prev=parent.hash,
            merkle=merkle_root([tx.serialize() for tx in txs]),
            timestamp=timestamp,
            bits=self.spv_mirror.required_bits(parent),
        )
        now = max(self.clock.unix_time, timestamp)
        self.spv_mirror.add_block_header(header.serialize(), now)
        for tx in txs:
            for txin in tx.inputs:
                if txin.outpoint() != NULL_OUTPOINT:
                    del self.utxos[txin.outpoint()]
            txid = tx.txid()
            for vout, out in enumerate(tx.outputs):
                self.utxos[(txid, vout)] = out
        self._anchor = (anchor.txid(), 0)
        self.mempool = []
        self._mempool_spent = set()
        self.clock.height += 1
        self.clock.unix_time = now
        record = BlockRecord(self.clock.height, header.hash(), header, txs)
        self.blocks.append(record)
        return record

    def advance_time(self, delta: int) -> Clock:
        """Move the wall clock forward; the height only changes by mining."""
        if delta < 0:
            raise ValueError("time cannot run backwards")
        self.clock.unix_time += delta
        return self.clock

    def mine_until_height(self, height: int, spacing: int = 600) -> None:
        while self.clock.height < height:
            self.advance_time(spacing)
            self.mine_block()

    # -- proofs -----------------------------------------------------------------

    def find_tx(self, txid: bytes) -> tuple[BlockRecord, int] | None:
        for record in self.blocks:
            for index, tx in enumerate(record.txs):
                if tx.txid() == txid:
                    return record, index
        return None

    def inclusion_proof(self, txid: bytes) -> SpvProof:
        """SPV bundle for a mined transaction: block hash plus Merkle path
        over the witness-stripped serializations."""
        located = self.find_tx(txid)
        if located is None:
            raise MissingUtxo(f"transaction {txid.hex()} not mined")
        record, index = located
        leaves = [tx.serialize() for tx in record.txs]
        return SpvProof(record.hash, leaves[index], merkle_prove(leaves, index))
