"""Minimal script interpreter covering exactly the opcodes the channel and
loan transactions use.

A Script is an ordered tuple of items: an Opcode or a bytes push. Witnesses
are data-only item lists that seed the stack before the output script runs.
Only the funding output is pay-to-witness-script-hash; commitment, HTLC and
P2PKH outputs carry their scripts directly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from ..commitments import sha256
from .._ripemd160 import ripemd160
from . import keys


class MalformedScript(ValueError):
    """Unbalanced IF/ENDIF nesting or an unknown opcode."""


class Opcode(enum.IntEnum):
    OP_0 = 0x00
    OP_1 = 0x51
    OP_2 = 0x52
    OP_3 = 0x53
    OP_4 = 0x54
    OP_5 = 0x55
    OP_6 = 0x56
    OP_7 = 0x57
    OP_8 = 0x58
    OP_9 = 0x59
    OP_10 = 0x5A
    OP_11 = 0x5B
    OP_12 = 0x5C
    OP_13 = 0x5D
    OP_14 = 0x5E
    OP_15 = 0x5F
    OP_16 = 0x60
    OP_IF = 0x63
    OP_ELSE = 0x67
    OP_ENDIF = 0x68
    OP_DROP = 0x75
    OP_DUP = 0x76
    OP_EQUAL = 0x87
    OP_EQUALVERIFY = 0x88
    OP_SHA256 = 0xA8
    OP_HASH160 = 0xA9
    OP_CHECKSIG = 0xAC
    OP_CHECKMULTISIG = 0xAE
    OP_CHECKLOCKTIMEVERIFY = 0xB1


_PUSHDATA1 = 0x4C
_PUSHDATA2 = 0x4D


def hash160(data: bytes) -> bytes:
    return ripemd160(sha256(data))


def script_num(n: int) -> bytes:
    """Minimal little-endian signed encoding used for pushed numbers."""
    if n == 0:
        return b""
    negative = n < 0
    value = abs(n)
    out = bytearray()
    while value:
        out.append(value & 0xFF)
        value >>= 8
    if out[-1] & 0x80:
        out.append(0x80 if negative else 0x00)
    elif negative:
        out[-1] |= 0x80
    return bytes(out)


def decode_script_num(data: bytes) -> int:
    if not data:
        return 0
    value = int.from_bytes(data, "little")
    if data[-1] & 0x80:
        value &= (1 << (len(data) * 8 - 1)) - 1
        return -value
    return value


def cast_to_bool(item: bytes) -> bool:
    for i, byte in enumerate(item):
        if byte:
            # negative zero is false
            return not (byte == 0x80 and i == len(item) - 1)
    return False


@dataclass(frozen=True)
class Script:
    items: tuple

    def __init__(self, items: Sequence):
        normalized = []
        for item in items:
            if isinstance(item, Opcode):
                normalized.append(item)
            elif isinstance(item, (bytes, bytearray)):
                normalized.append(bytes(item))
            else:
                raise MalformedScript(f"script item {item!r} is neither opcode nor bytes")
        object.__setattr__(self, "items", tuple(normalized))

    def assemble(self) -> bytes:
        out = bytearray()
        for item in self.items:
            if isinstance(item, Opcode):
                out.append(item)
            elif len(item) < _PUSHDATA1:
                out.append(len(item))
                out += item
            elif len(item) <= 0xFF:
                out += bytes([_PUSHDATA1, len(item)])
                out += item
            elif len(item) <= 0xFFFF:
                out += bytes([_PUSHDATA2]) + len(item).to_bytes(2, "little")
                out += item
            else:
                raise MalformedScript("push too large")
        return bytes(out)

    @classmethod
    def parse(cls, raw: bytes) -> "Script":
        items = []
        i = 0
        while i < len(raw):
            byte = raw[i]
            i += 1
            if 0 < byte < _PUSHDATA1:
                items.append(raw[i : i + byte])
                i += byte
            elif byte == _PUSHDATA1:
                n = raw[i]
                items.append(raw[i + 1 : i + 1 + n])
                i += 1 + n
            elif byte == _PUSHDATA2:
                n = int.from_bytes(raw[i : i + 2], "little")
                items.append(raw[i + 2 : i + 2 + n])
                i += 2 + n
            else:
                try:
                    items.append(Opcode(byte))
                except ValueError:
                    raise MalformedScript(f"unknown opcode 0x{byte:02x}") from None
        return cls(items)


def p2pkh_script(addr_hash: bytes) -> Script:
    return Script([Opcode.OP_DUP, Opcode.OP_HASH160, addr_hash, Opcode.OP_EQUALVERIFY, Opcode.OP_CHECKSIG])


def p2wsh_script(redeem: Script) -> Script:
    return Script([Opcode.OP_0, sha256(redeem.assemble())])


def is_p2wsh(script: Script) -> bool:
    items = script.items
    return len(items) == 2 and items[0] == Opcode.OP_0 and isinstance(items[1], bytes) and len(items[1]) == 32


def is_p2pkh(script: Script) -> bool:
    items = script.items
    return (
        len(items) == 5
        and items[0] == Opcode.OP_DUP
        and items[1] == Opcode.OP_HASH160
        and isinstance(items[2], bytes)
        and len(items[2]) == 20
        and items[3] == Opcode.OP_EQUALVERIFY
        and items[4] == Opcode.OP_CHECKSIG
    )


@dataclass
class EvalContext:
    """Transaction context a script executes under."""

    tx: object  # Tx; untyped to avoid an import cycle
    input_index: int
    spent_output: object  # TxOut
    block_height: int


def _check_one_sig(sig: bytes, pk_bytes: bytes, ctx: EvalContext) -> bool:
    from .tx import sighash

    try:
        pk = keys.decompress(pk_bytes)
    except keys.PointOffCurve:
        return False
    digest = sighash(ctx.tx, ctx.input_index, ctx.spent_output)
    return keys.verify_sig(digest, pk, sig)


def _run(script: Script, stack: list, ctx: EvalContext) -> bool:
    cond: list[bool] = []
    for item in script.items:
        executing = all(cond)
        if isinstance(item, Opcode) and item in (Opcode.OP_IF, Opcode.OP_ELSE, Opcode.OP_ENDIF):
            if item == Opcode.OP_IF:
                if executing:
                    if not stack:
                        return False
                    cond.append(cast_to_bool(stack.pop()))
                else:
                    cond.append(False)
            elif item == Opcode.OP_ELSE:
                if not cond:
                    raise MalformedScript("OP_ELSE without OP_IF")
                cond[-1] = not cond[-1]
            else:
                if not cond:
                    raise MalformedScript("OP_ENDIF without OP_IF")
                cond.pop()
            continue
        if not executing:
            continue
        if isinstance(item, bytes):
            stack.append(item)
            continue
        if item == Opcode.OP_0:
            stack.append(b"")
        elif Opcode.OP_1 <= item <= Opcode.OP_16:
            stack.append(script_num(item - Opcode.OP_1 + 1))
        elif item == Opcode.OP_DUP:
            if not stack:
                return False
            stack.append(stack[-1])
        elif item == Opcode.OP_DROP:
            if not stack:
                return False
            stack.pop()
        elif item == Opcode.OP_SHA256:
            if not stack:
                return False
            stack.append(sha256(stack.pop()))
        elif item == Opcode.OP_HASH160:
            if not stack:
                return False
            stack.append(hash160(stack.pop()))
        elif item in (Opcode.OP_EQUAL, Opcode.OP_EQUALVERIFY):
            if len(stack) < 2:
                return False
            equal = stack.pop() == stack.pop()
            if item == Opcode.OP_EQUAL:
                stack.append(b"\x01" if equal else b"")
            elif not equal:
                return False
        elif item == Opcode.OP_CHECKSIG:
            if len(stack) < 2:
                return False
            pk_bytes = stack.pop()
            sig = stack.pop()
            stack.append(b"\x01" if _check_one_sig(sig, pk_bytes, ctx) else b"")
        elif item == Opcode.OP_CHECKMULTISIG:
            if not stack:
                return False
            n_keys = decode_script_num(stack.pop())
            if n_keys < 0 or len(stack) < n_keys:
                return False
            pubkeys = [stack.pop() for _ in range(n_keys)][::-1]
            if not stack:
                return False
            n_sigs = decode_script_num(stack.pop())
            if n_sigs < 0 or n_sigs > n_keys or len(stack) < n_sigs:
                return False
            sigs = [stack.pop() for _ in range(n_sigs)][::-1]
            if not stack:
                return False
            stack.pop()  # the historical extra element, OP_0 by convention
            ok = True
            key_idx = 0
            for sig in sigs:
                while key_idx < len(pubkeys) and not _check_one_sig(sig, pubkeys[key_idx], ctx):
                    key_idx += 1
                if key_idx >= len(pubkeys):
                    ok = False
                    break
                key_idx += 1
            stack.append(b"\x01" if ok else b"")
        elif item == Opcode.OP_CHECKLOCKTIMEVERIFY:
            if not stack:
                return False
            locktime = decode_script_num(stack[-1])
            if locktime < 0:
                return False
            if ctx.block_height < locktime or ctx.tx.locktime < locktime:
                return False
        else:  # pragma: no cover - Opcode is closed over the set above
            raise MalformedScript(f"unknown opcode {item!r}")
    if cond:
        raise MalformedScript("unterminated OP_IF")
    return len(stack) == 1 and cast_to_bool(stack[0])


def eval_script(witness: Sequence[bytes], script_pubkey: Script, ctx: EvalContext) -> bool:
    """Evaluate an output script against a witness; True iff a single truthy
    element remains."""
    if any(not isinstance(item, (bytes, bytearray)) for item in witness):
        raise MalformedScript("witness items must be bytes")
    stack = [bytes(item) for item in witness]
    if is_p2wsh(script_pubkey):
        if not stack:
            return False
        redeem_raw = stack.pop()
        if sha256(redeem_raw) != script_pubkey.items[1]:
            return False
        return _run(Script.parse(redeem_raw), stack, ctx)
    return _run(script_pubkey, stack, ctx)
