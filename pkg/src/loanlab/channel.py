"""Loan-channel transaction factory and lifecycle.

A channel locks the borrower's collateral in a 2-of-2 multisig funding
output. Every state ``i`` is a pair of asymmetric commitment transactions:
each side's own transaction pays its balance to a delayed-or-revocable
output and the counterparty's balance to an immediate pay-to-pubkey-hash.
The revocation key inside side X's commitment combines the counterparty's
revocation basepoint with X's per-commitment point, so once X reveals the
per-commitment secret for an old state the counterparty alone can sign for
the revocation key and confiscate a cheating broadcast.

Per-commitment secrets are a deterministic per-side sequence derived from
the channel seed; one revocation basepoint per side lives for the channel's
whole life.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .btcsim.keys import (
    ORDER,
    KeyPair,
    Point,
    PointOffCurve,
    compress,
    is_on_curve,
    point_add,
    point_mul,
)
from .btcsim.script import Opcode, Script, hash160, p2pkh_script, p2wsh_script, script_num
from .btcsim.tx import Tx, TxIn, TxOut, sighash
from .btcsim import keys as _keys
from .commitments import sha256


class ChannelError(Exception):
    pass


class InsufficientFunds(ChannelError):
    pass


class IndexOutOfRange(ChannelError):
    pass


class SecretUnknown(ChannelError):
    pass


class NotOldState(ChannelError):
    pass


class InsufficientBalance(ChannelError):
    pass


class WrongPreimage(ChannelError):
    pass


class Expired(ChannelError):
    pass


class AmountOutOfRange(ChannelError):
    pass


class Side(str, enum.Enum):
    BORROWER = "borrower"
    LENDER = "lender"

    def other(self) -> "Side":
        return Side.LENDER if self is Side.BORROWER else Side.BORROWER


class ChannelStatus(str, enum.Enum):
    NEGOTIATED = "Negotiated"
    FUNDED = "Funded"
    OPEN = "Open"
    CLOSING = "Closing"
    CLOSED = "Closed"


@dataclass(frozen=True)
class ChannelParams:
    collateral: int  # satoshis locked by the funding output
    pk_borrower: Point
    pk_lender: Point
    addr_borrower: bytes  # hash160 of the compressed pubkey
    addr_lender: bytes
    locktime_borrower: int  # absolute height gating the borrower's delayed path
    locktime_lender: int
    installments: int

    def __post_init__(self):
        if self.collateral <= 0:
            raise AmountOutOfRange("collateral must be positive")
        if self.installments < 1:
            raise IndexOutOfRange("at least one installment")
        if self.locktime_borrower <= 0 or self.locktime_lender <= 0:
            raise AmountOutOfRange("locktimes must be positive heights")


def split_amount(collateral: int, index: int, installments: int) -> int:
    """Borrower-side satoshis at state ``index``: floor(a*i/N), exact a at N."""
    if index == installments:
        return collateral
    return collateral * index // installments


def derive_revocation_pubkey(basepoint: Point, per_commitment_point: Point) -> Point:
    """Blind the basepoint with the per-commitment point:
    base*H(base||point) + point*H(base||base), hashes reduced mod the order."""
    for pt in (basepoint, per_commitment_point):
        if pt is None or not is_on_curve(pt):
            raise PointOffCurve(f"{pt!r} is not on the curve")
    h_base = int.from_bytes(sha256(compress(basepoint) + compress(per_commitment_point)), "big") % ORDER
    h_point = int.from_bytes(sha256(compress(basepoint) + compress(basepoint)), "big") % ORDER
    return point_add(point_mul(h_base, basepoint), point_mul(h_point, per_commitment_point))


def derive_revocation_secret(base_secret: int, per_commitment_secret: int) -> int:
    """Scalar-side counterpart of derive_revocation_pubkey; the punisher knows
    the base secret and learns the per-commitment secret on reveal."""
    basepoint = point_mul(base_secret)
    point = point_mul(per_commitment_secret)
    h_base = int.from_bytes(sha256(compress(basepoint) + compress(point)), "big") % ORDER
    h_point = int.from_bytes(sha256(compress(basepoint) + compress(basepoint)), "big") % ORDER
    return (base_secret * h_base + per_commitment_secret * h_point) % ORDER


class RevocationMaterial:
    """One side's revocation basepoint and per-commitment secret sequence."""

    def __init__(self, seed: bytes):
        self._seed = seed
        self.base_secret = self._scalar(b"basepoint")
        self.basepoint = point_mul(self.base_secret)

    def _scalar(self, tag: bytes) -> int:
        return int.from_bytes(sha256(self._seed + tag), "big") % (ORDER - 1) + 1

    def secret(self, index: int) -> int:
        return self._scalar(index.to_bytes(4, "little"))

    def point(self, index: int) -> Point:
        return point_mul(self.secret(index))


def funding_script(pk_lender: Point, pk_borrower: Point) -> Script:
    """2-of-2 redeem script; the lender key comes first."""
    return Script(
        [Opcode.OP_2, compress(pk_lender), compress(pk_borrower), Opcode.OP_2, Opcode.OP_CHECKMULTISIG]
    )


def funding_script_pubkey(params: ChannelParams) -> Script:
    return p2wsh_script(funding_script(params.pk_lender, params.pk_borrower))


def build_funding_tx(params: ChannelParams, borrower_inputs: list[tuple[bytes, int, int]]) -> Tx:
    """Funding transaction: one multisig output worth the whole collateral.

    ``borrower_inputs`` are (txid, vout, amount) triples that must sum to the
    collateral exactly (zero-fee model).
    """
    total = sum(amount for _, _, amount in borrower_inputs)
    if total != params.collateral:
        raise InsufficientFunds(f"inputs sum to {total}, need {params.collateral}")
    return Tx(
        inputs=tuple(TxIn(txid, vout) for txid, vout, _ in borrower_inputs),
        outputs=(TxOut(params.collateral, funding_script_pubkey(params)),),
    )


def commitment_output_script(locktime: int, pk_local: Point, pk_counterparty: Point, rev_pubkey: Point) -> Script:
    """Delayed-or-revocable output: the local party after the locktime, or
    the counterparty plus revocation key immediately."""
    return Script(
        [
            Opcode.OP_IF,
            script_num(locktime),
            Opcode.OP_CHECKLOCKTIMEVERIFY,
            Opcode.OP_DROP,
            compress(pk_local),
            Opcode.OP_CHECKSIG,
            Opcode.OP_ELSE,
            Opcode.OP_2,
            compress(pk_counterparty),
            compress(rev_pubkey),
            Opcode.OP_2,
            Opcode.OP_CHECKMULTISIG,
            Opcode.OP_ENDIF,
        ]
    )


def htlc_script(payment_hash: bytes, pk_recipient: Point, pk_offerer: Point, expiry: int) -> Script:
    """Claimable by the recipient with the preimage, refundable to the
    offerer once the expiry height passes."""
    return Script(
        [
            Opcode.OP_IF,
            Opcode.OP_SHA256,
            payment_hash,
            Opcode.OP_EQUALVERIFY,
            compress(pk_recipient),
            Opcode.OP_CHECKSIG,
            Opcode.OP_ELSE,
            script_num(expiry),
            Opcode.OP_CHECKLOCKTIMEVERIFY,
            Opcode.OP_DROP,
            compress(pk_offerer),
            Opcode.OP_CHECKSIG,
            Opcode.OP_ENDIF,
        ]
    )


@dataclass
class Htlc:
    offerer: Side
    amount: int
    payment_hash: bytes
    expiry: int  # absolute block height


@dataclass
class CommitmentPair:
    """State ``index`` as both asymmetric transactions plus cross-signatures."""

    index: int
    tx_borrower: Tx
    tx_lender: Tx
    rev_pub_borrower: Point
    rev_pub_lender: Point
    sig_lender_on_borrower_tx: bytes | None = None
    sig_borrower_on_lender_tx: bytes | None = None

    def tx(self, side: Side) -> Tx:
        return self.tx_borrower if side is Side.BORROWER else self.tx_lender


def build_commitment_pair(
    params: ChannelParams,
    funding_txid: bytes,
    index: int,
    rev_pub_borrower: Point,
    rev_pub_lender: Point,
    htlcs: tuple[Htlc, ...] = (),
    balance_override: tuple[int, int] | None = None,
) -> CommitmentPair:
    """Both commitment transactions for one state, spending funding output 0.

    Output order is fixed: the revocable local output first, the immediate
    counterparty output second, then any HTLC outputs.
    """
    if not 0 <= index <= params.installments:
        raise IndexOutOfRange(f"state {index} outside [0, {params.installments}]")
    if balance_override is not None:
        bal_borrower, bal_lender = balance_override
    else:
        bal_borrower = split_amount(params.collateral, index, params.installments)
        bal_lender = params.collateral - bal_borrower
    htlc_outputs = tuple(
        TxOut(
            h.amount,
            htlc_script(
                h.payment_hash,
                params.pk_lender if h.offerer is Side.BORROWER else params.pk_borrower,
                params.pk_borrower if h.offerer is Side.BORROWER else params.pk_lender,
                h.expiry,
            ),
        )
        for h in htlcs
    )
    spend = (TxIn(funding_txid, 0),)
    tx_borrower = Tx(
        inputs=spend,
        outputs=(
            TxOut(
                bal_borrower,
                commitment_output_script(
                    params.locktime_borrower, params.pk_borrower, params.pk_lender, rev_pub_borrower
                ),
            ),
            TxOut(bal_lender, p2pkh_script(params.addr_lender)),
        )
        + htlc_outputs,
    )
    tx_lender = Tx(
        inputs=spend,
        outputs=(
            TxOut(
                bal_lender,
                commitment_output_script(
                    params.locktime_lender, params.pk_lender, params.pk_borrower, rev_pub_lender
                ),
            ),
            TxOut(bal_borrower, p2pkh_script(params.addr_borrower)),
        )
        + htlc_outputs,
    )
    return CommitmentPair(index, tx_borrower, tx_lender, rev_pub_borrower, rev_pub_lender)


class ChannelState:
    """Single-writer lifecycle state for one loan channel.

    The lab holds both sides' keys so any flow, honest or deviant, can be
    driven from one place; contract-facing accessors expose only public
    material.
    """

    def __init__(
        self,
        *,
        collateral: int,
        kp_borrower: KeyPair,
        kp_lender: KeyPair,
        locktime_borrower: int,
        locktime_lender: int,
        installments: int,
        seed: bytes,
    ):
        self.params = ChannelParams(
            collateral=collateral,
            pk_borrower=kp_borrower.pk,
            pk_lender=kp_lender.pk,
            addr_borrower=hash160(compress(kp_borrower.pk)),
            addr_lender=hash160(compress(kp_lender.pk)),
            locktime_borrower=locktime_borrower,
            locktime_lender=locktime_lender,
            installments=installments,
        )
        self._keys = {Side.BORROWER: kp_borrower, Side.LENDER: kp_lender}
        self.revocation = {
            Side.BORROWER: RevocationMaterial(seed + b"/borrower"),
            Side.LENDER: RevocationMaterial(seed + b"/lender"),
        }
        self.funding_tx: Tx | None = None
        self.funding_txid: bytes | None = None
        self.current_index = 0
        self.revealed_secrets: dict[Side, dict[int, int]] = {Side.BORROWER: {}, Side.LENDER: {}}
        self.status = ChannelStatus.NEGOTIATED
        self.balances: dict[Side, int] = {Side.BORROWER: 0, Side.LENDER: collateral}
        self.htlcs: list[Htlc] = []
        self._broadcast_index: dict[bytes, tuple[Side, int, Tx]] = {}

    # -- public material for the loan contract ---------------------------------

    def rev_basepoint(self, side: Side) -> Point:
        return self.revocation[side].basepoint

    def commitment_points(self, side: Side) -> tuple[Point, ...]:
        material = self.revocation[side]
        return tuple(material.point(i) for i in range(self.params.installments + 1))

    def rev_pubkey(self, side: Side, index: int) -> Point:
        """Revocation key inside ``side``'s commitment at ``index``: the
        counterparty's basepoint blinded by side's per-commitment point."""
        return derive_revocation_pubkey(
            self.revocation[side.other()].basepoint, self.revocation[side].point(index)
        )

    # -- funding ------------------------------------------------------------------

    def build_funding_tx(self, borrower_inputs: list[tuple[bytes, int, int]]) -> Tx:
        tx = build_funding_tx(self.params, borrower_inputs)
        self.funding_tx = tx
        self.funding_txid = tx.txid()
        return tx

    def funding_output(self) -> TxOut:
        return TxOut(self.params.collateral, funding_script_pubkey(self.params))

    def mark_funded(self) -> None:
        self.status = ChannelStatus.FUNDED

    def mark_open(self) -> None:
        self.status = ChannelStatus.OPEN

    # -- commitments ------------------------------------------------------------

    def commitment_pair(self, index: int) -> CommitmentPair:
        if self.funding_txid is None:
            raise ChannelError("funding transaction not built yet")
        if not 0 <= index <= self.params.installments:
            raise IndexOutOfRange(f"state {index} outside [0, {self.params.installments}]")
        htlcs = tuple(self.htlcs) if index == self.current_index else ()
        override = None
        if htlcs:
            override = (self.balances[Side.BORROWER], self.balances[Side.LENDER])
        pair = build_commitment_pair(
            self.params,
            self.funding_txid,
            index,
            self.rev_pubkey(Side.BORROWER, index),
            self.rev_pubkey(Side.LENDER, index),
            htlcs=htlcs,
            balance_override=override,
        )
        self._broadcast_index[pair.tx_borrower.txid()] = (Side.BORROWER, index, pair.tx_borrower)
        self._broadcast_index[pair.tx_lender.txid()] = (Side.LENDER, index, pair.tx_lender)
        return pair

    def sign_commitment(self, pair: CommitmentPair, signer: Side) -> bytes:
        """The signer endorses the counterparty's transaction of the pair."""
        target = pair.tx(signer.other())
        signature = _keys.sign(sighash(target, 0, self.funding_output()), self._keys[signer])
        if signer is Side.LENDER:
            pair.sig_lender_on_borrower_tx = signature
        else:
            pair.sig_borrower_on_lender_tx = signature
        return signature

    def funding_witness(self, tx: Tx) -> tuple[bytes, ...]:
        """Witness satisfying the funding output with both fresh signatures."""
        digest = sighash(tx, 0, self.funding_output())
        sig_lender = _keys.sign(digest, self._keys[Side.LENDER])
        sig_borrower = _keys.sign(digest, self._keys[Side.BORROWER])
        redeem = funding_script(self.params.pk_lender, self.params.pk_borrower)
        return (b"", sig_lender, sig_borrower, redeem.assemble())

    def countersign_and_broadcast(self, chain, pair: CommitmentPair, side: Side) -> bytes:
        """Broadcast ``side``'s commitment with both signatures attached."""
        tx = pair.tx(side)
        tx.inputs[0].witness = self.funding_witness(tx)
        txid = chain.submit_tx(tx)
        self.status = ChannelStatus.CLOSING
        return txid

    def advance(self, index: int) -> None:
        """Move to a fully countersigned state; resets balances to its split."""
        if not 0 <= index <= self.params.installments:
            raise IndexOutOfRange(f"state {index} outside [0, {self.params.installments}]")
        self.current_index = index
        bal_borrower = split_amount(self.params.collateral, index, self.params.installments)
        self.balances = {
            Side.BORROWER: bal_borrower,
            Side.LENDER: self.params.collateral - bal_borrower,
        }

    # -- revocation --------------------------------------------------------------

    def reveal_secret(self, side: Side, index: int) -> int:
        """Disclose ``side``'s per-commitment secret for an already-replaced
        state, enabling the counterparty's punishment path."""
        if index >= self.current_index:
            raise NotOldState(f"state {index} is not older than current {self.current_index}")
        secret = self.revocation[side].secret(index)
        self.revealed_secrets[side][index] = secret
        return secret

    def punish(self, chain, broadcast_txid: bytes) -> Tx:
        """Sweep the revocable output of an outdated broadcast commitment.

        Requires the broadcast state to be older than the current one and its
        per-commitment secret to have been revealed; the sweep pays the full
        revocable amount to the punisher immediately (no locktime wait).
        """
        located = self._broadcast_index.get(broadcast_txid)
        if located is None:
            raise ChannelError(f"transaction {broadcast_txid.hex()} is not a known commitment")
        cheater, index, cheater_tx = located
        if index >= self.current_index:
            raise NotOldState(f"state {index} is the current state, punishment refused")
        secret = self.revealed_secrets[cheater].get(index)
        if secret is None:
            raise SecretUnknown(f"{cheater.value} secret for state {index} not revealed")
        punisher = cheater.other()
        rev_secret = derive_revocation_secret(self.revocation[punisher].base_secret, secret)
        revocable = cheater_tx.outputs[0]
        punisher_addr = self.params.addr_borrower if punisher is Side.BORROWER else self.params.addr_lender
        sweep = Tx(
            inputs=(TxIn(broadcast_txid, 0),),
            outputs=(TxOut(revocable.amount, p2pkh_script(punisher_addr)),),
        )
        digest = sighash(sweep, 0, revocable)
        sig_cp = _keys.sign(digest, self._keys[punisher])
        sig_rev = _keys.sign(digest, KeyPair.from_secret(rev_secret))
        # ELSE branch: empty selector, then [counterparty, revocation] key order
        sweep.inputs[0].witness = (b"", sig_cp, sig_rev, b"")
        chain.submit_tx(sweep)
        return sweep

    def sweep_delayed_output(self, chain, side: Side, broadcast_txid: bytes) -> Tx:
        """Spend ``side``'s own delayed output of its broadcast commitment via
        the locktime branch; fails on-chain before the locktime height."""
        located = self._broadcast_index.get(broadcast_txid)
        if located is None:
            raise ChannelError(f"transaction {broadcast_txid.hex()} is not a known commitment")
        owner, index, commitment_tx = located
        if owner is not side:
            raise ChannelError(f"delayed output of {broadcast_txid.hex()} belongs to {owner.value}")
        delayed = commitment_tx.outputs[0]
        locktime = (
            self.params.locktime_borrower if side is Side.BORROWER else self.params.locktime_lender
        )
        addr = self.params.addr_borrower if side is Side.BORROWER else self.params.addr_lender
        sweep = Tx(
            inputs=(TxIn(broadcast_txid, 0),),
            outputs=(TxOut(delayed.amount, p2pkh_script(addr)),),
            locktime=locktime,
        )
        sig = _keys.sign(sighash(sweep, 0, delayed), self._keys[side])
        sweep.inputs[0].witness = (sig, b"\x01")
        chain.submit_tx(sweep)
        return sweep

    # -- HTLC updates -------------------------------------------------------------

    def add_htlc(self, offerer: Side, amount: int, payment_hash: bytes, cltv_expiry: int) -> CommitmentPair:
        if self.balances[offerer] < amount:
            raise InsufficientBalance(f"{offerer.value} holds {self.balances[offerer]}, needs {amount}")
        self.balances[offerer] -= amount
        self.htlcs.append(Htlc(offerer, amount, payment_hash, cltv_expiry))
        return self.commitment_pair(self.current_index)

    def fulfill_htlc(self, preimage: bytes, height: int) -> CommitmentPair:
        htlc = self._single_htlc()
        if sha256(preimage) != htlc.payment_hash:
            raise WrongPreimage("preimage does not hash to the payment hash")
        if height >= htlc.expiry:
            raise Expired(f"height {height} at or past expiry {htlc.expiry}")
        self.balances[htlc.offerer.other()] += htlc.amount
        self.htlcs.remove(htlc)
        return self.commitment_pair(self.current_index)

    def fail_htlc(self) -> CommitmentPair:
        htlc = self._single_htlc()
        self.balances[htlc.offerer] += htlc.amount
        self.htlcs.remove(htlc)
        return self.commitment_pair(self.current_index)

    def _single_htlc(self) -> Htlc:
        if not self.htlcs:
            raise ChannelError("no HTLC pending")
        return self.htlcs[-1]

    # -- closing ---------------------------------------------------------------------

    def build_close_tx(self, to_lender: int) -> Tx:
        """Mutual close paying ``to_lender`` and the remainder immediately."""
        if not 0 <= to_lender <= self.params.collateral:
            raise AmountOutOfRange(f"{to_lender} outside [0, {self.params.collateral}]")
        if self.funding_txid is None:
            raise ChannelError("funding transaction not built yet")
        tx = Tx(
            inputs=(TxIn(self.funding_txid, 0),),
            outputs=(
                TxOut(to_lender, p2pkh_script(self.params.addr_lender)),
                TxOut(self.params.collateral - to_lender, p2pkh_script(self.params.addr_borrower)),
            ),
        )
        tx.inputs[0].witness = self.funding_witness(tx)
        return tx

    def broadcast_close(self, chain, to_lender: int) -> bytes:
        tx = self.build_close_tx(to_lender)
        txid = chain.submit_tx(tx)
        self.status = ChannelStatus.CLOSED
        return txid
