"""Simplified Bitcoin-like transactions over a UTXO set.

Wire layout is little-endian with compact-size counts (version, inputs,
outputs, locktime). Witness items serialize inline per input when requested
but are always excluded from the txid, so a signed transaction keeps the
txid of its unsigned template.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..commitments import sha256d
from .script import Script


class IndexOutOfRange(IndexError):
    pass


def write_varint(n: int) -> bytes:
    if n < 0xFD:
        return bytes([n])
    if n <= 0xFFFF:
        return b"\xfd" + n.to_bytes(2, "little")
    if n <= 0xFFFFFFFF:
        return b"\xfe" + n.to_bytes(4, "little")
    return b"\xff" + n.to_bytes(8, "little")


def read_varint(raw: bytes, offset: int) -> tuple[int, int]:
    tag = raw[offset]
    if tag < 0xFD:
        return tag, offset + 1
    if tag == 0xFD:
        return int.from_bytes(raw[offset + 1 : offset + 3], "little"), offset + 3
    if tag == 0xFE:
        return int.from_bytes(raw[offset + 1 : offset + 5], "little"), offset + 5
    return int.from_bytes(raw[offset + 1 : offset + 9], "little"), offset + 9


NULL_OUTPOINT = (b"\x00" * 32, 0xFFFFFFFF)


@dataclass
class TxIn:
    prev_txid: bytes
    vout: int
    witness: tuple[bytes, ...] = ()
    sequence: int = 0xFFFFFFFF

    def outpoint(self) -> tuple[bytes, int]:
        return (self.prev_txid, self.vout)


@dataclass
class TxOut:
    amount: int  # satoshis
    script_pubkey: Script


@dataclass
class Tx:
    inputs: tuple[TxIn, ...]
    outputs: tuple[TxOut, ...]
    version: int = 2
    locktime: int = 0  # block height

    def __post_init__(self):
        self.inputs = tuple(self.inputs)
        self.outputs = tuple(self.outputs)
        if not self.inputs or not self.outputs:
            raise ValueError("a transaction needs at least one input and one output")

    def serialize(self, include_witness: bool = False) -> bytes:
        out = bytearray()
        out += self.version.to_bytes(4, "little", signed=True)
        out += write_varint(len(self.inputs))
        for txin in self.inputs:
            out += txin.prev_txid
            out += txin.vout.to_bytes(4, "little")
            out += txin.sequence.to_bytes(4, "little")
            if include_witness:
                out += write_varint(len(txin.witness))
                for item in txin.witness:
                    out += write_varint(len(item))
                    out += item
        out += write_varint(len(self.outputs))
        for txout in self.outputs:
            out += txout.amount.to_bytes(8, "little")
            spk = txout.script_pubkey.assemble()
            out += write_varint(len(spk))
            out += spk
        out += self.locktime.to_bytes(4, "little")
        return bytes(out)

    @classmethod
    def parse(cls, raw: bytes, include_witness: bool = False) -> "Tx":
        version = int.from_bytes(raw[0:4], "little", signed=True)
        n_in, offset = read_varint(raw, 4)
        inputs = []
        for _ in range(n_in):
            prev = raw[offset : offset + 32]
            vout = int.from_bytes(raw[offset + 32 : offset + 36], "little")
            sequence = int.from_bytes(raw[offset + 36 : offset + 40], "little")
            offset += 40
            witness = []
            if include_witness:
                n_items, offset = read_varint(raw, offset)
                for _ in range(n_items):
                    size, offset = read_varint(raw, offset)
                    witness.append(raw[offset : offset + size])
                    offset += size
            inputs.append(TxIn(prev, vout, tuple(witness), sequence))
        n_out, offset = read_varint(raw, offset)
        outputs = []
        for _ in range(n_out):
            amount = int.from_bytes(raw[offset : offset + 8], "little")
            size, offset = read_varint(raw, offset + 8)
            outputs.append(TxOut(amount, Script.parse(raw[offset : offset + size])))
            offset += size
        locktime = int.from_bytes(raw[offset : offset + 4], "little")
        if offset + 4 != len(raw):
            raise ValueError(f"{len(raw) - offset - 4} trailing bytes after transaction")
        return cls(tuple(inputs), tuple(outputs), version, locktime)

    def txid(self) -> bytes:
        return sha256d(self.serialize(include_witness=False))

    def is_coinbase(self) -> bool:
        return len(self.inputs) == 1 and self.inputs[0].outpoint() == NULL_OUTPOINT


def sighash(tx: Tx, input_index: int, spent_output: TxOut) -> bytes:
    """Digest every signature in this artifact commits to (SIGHASH_ALL-like):
    the witness-stripped tx, the input index, and the spent output's script
    and amount."""
    if not 0 <= input_index < len(tx.inputs):
        raise IndexOutOfRange(f"input {input_index} not in [0, {len(tx.inputs)})")
    spk = spent_output.script_pubkey.assemble()
    payload = (
        tx.serialize(include_witness=False)
        + input_index.to_bytes(4, "little")
        + write_varint(len(spk))
        + spk
        + spent_output.amount.to_bytes(8, "little")
    )
    return sha256d(payload)
