"""The loan contract: offer lifecycle, USD ledger, deadline guards,
SPV-verified channel events, deposit settlement, oracle-driven bidirectional
liquidation, and collateralized-position arithmetic.

Money is integer-only: satoshis for BTC, minor units (cents) for USD, and the
oracle rate is cents per whole BTC. Ratios are exact fractions; every product
is floored and division remainders land on the final installment.

Timing guards follow one convention throughout: "at least X before the
deadline" is inclusive (deadline - now >= X) and "before the deadline" is
strict (now < deadline).
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from fractions import Fraction

from .btcsim.keys import Point, compress, point_mul, verify_sig
from .btcsim.script import hash160, is_p2pkh, p2pkh_script, p2wsh_script
from .btcsim.tx import Tx, TxIn, TxOut, sighash
from .channel import (
    Side,
    commitment_output_script,
    derive_revocation_pubkey,
    funding_script,
    split_amount,
)
from .spv import HeaderChain, SpvProof

SATS_PER_BTC = 100_000_000


class LoanError(Exception):
    pass


class UnknownOffer(LoanError):
    pass


class ValidationFailed(LoanError):
    def __init__(self, rule: str, message: str):
        super().__init__(f"{rule}: {message}")
        self.rule = rule


class WrongStatus(LoanError):
    pass


class NotLender(LoanError):
    pass


class NotBorrower(LoanError):
    pass


class TooLate(LoanError):
    pass


class TooEarly(LoanError):
    pass


class ZeroIdentity(LoanError):
    pass


class CollateralOutOfRange(LoanError):
    pass


class BadSignature(LoanError):
    pass


class InsufficientBalance(LoanError):
    pass


class DeadlinePassed(LoanError):
    pass


class BadSpvProof(LoanError):
    pass


class WrongFundingTx(LoanError):
    pass


class PreviousUnfinished(LoanError):
    pass


class BadCommitmentStructure(LoanError):
    pass


class BadSecret(LoanError):
    pass


class NotAChannelSpend(LoanError):
    pass


class NoTimeoutPending(LoanError):
    pass


class DivisionByZero(LoanError, ZeroDivisionError):
    pass


def _floor(value: Fraction | int) -> int:
    frac = Fraction(value)
    return frac.numerator // frac.denominator


def btc_value_cents(sats: int, rate_cents_per_btc: int) -> int:
    """USD value (cents) of a satoshi amount at an oracle rate."""
    return sats * rate_cents_per_btc // SATS_PER_BTC


# ---------------------------------------------------------------------------
# Ledger and oracle
# ---------------------------------------------------------------------------


class Ledger:
    """USD balances in minor units plus the contract escrow; every operation
    conserves the grand total."""

    def __init__(self, balances: dict[str, int] | None = None):
        self.balances: dict[str, int] = dict(balances or {})
        self.escrow = 0

    def balance(self, account: str) -> int:
        return self.balances.get(account, 0)

    def to_escrow(self, account: str, amount: int) -> None:
        if amount < 0:
            raise ValueError("negative amount")
        if self.balance(account) < amount:
            raise InsufficientBalance(f"{account} holds {self.balance(account)}, needs {amount}")
        self.balances[account] = self.balance(account) - amount
        self.escrow += amount

    def from_escrow(self, account: str, amount: int) -> None:
        if amount < 0:
            raise ValueError("negative amount")
        if self.escrow < amount:
            raise InsufficientBalance(f"escrow holds {self.escrow}, needs {amount}")
        self.escrow -= amount
        self.balances[account] = self.balance(account) + amount

    def total(self) -> int:
        return sum(self.balances.values()) + self.escrow


class PriceOracle:
    """Exchange-rate series (unix time, cents per BTC), times strictly
    increasing; reads return the latest rate at or before the query time."""

    def __init__(self, series: list[tuple[int, int]]):
        if not series:
            raise ValueError("empty price series")
        for (t0, _), (t1, _) in zip(series, series[1:]):
            if t1 <= t0:
                raise ValueError("price series times must be strictly increasing")
        self.series = list(series)

    def rate_at(self, time: int) -> int:
        rate = None
        for t, r in self.series:
            if t <= time:
                rate = r
            else:
                break
        if rate is None:
            raise ValueError(f"no rate known at {time}")
        return rate


# ---------------------------------------------------------------------------
# Offer state
# ---------------------------------------------------------------------------


class OfferStatus(str, enum.Enum):
    OFFERED = "Offered"
    REQUESTED = "Requested"
    ACCEPTED = "Accepted"
    OPENED = "Opened"
    SUCCESSFUL = "Successful"
    DEFAULTED_CLOSED = "DefaultedClosed"
    LIQUIDATED_CLOSED = "LiquidatedClosed"
    EXPIRED = "Expired"


class InstallmentStatus(str, enum.Enum):
    PENDING = "Pending"
    PAID = "PaidInstallment"
    TAKEN = "TookInstallment"
    BORROWER_KEY = "BorrowerRevocationKey"
    LENDER_KEY = "LenderRevocationKey"


@dataclass
class OfferTerms:
    """The lender's offer parameter set."""

    min_collateral: int  # satoshis
    max_collateral: int
    security_deposit: int  # cents
    interest_rate: Fraction
    collateral_ratio: Fraction
    installments: int
    installment_period: int  # seconds between deadlines
    response_penalty: int  # cents escrowed by each side against silence
    response_window: int  # seconds of per-step reaction time
    lender_pubkey: Point
    lender_node_id: bytes
    channel_deadline: int  # unix time by which the channel must be proven
    oracle_id: str
    liq_value_borrower: int  # cents: collateral value at which the borrower must cure
    liq_value_lender: int  # cents: collateral value at which the lender must cure
    lender_rev_basepoint: Point | None = None


@dataclass
class BorrowerRequest:
    """Everything the borrower submits against an open offer."""

    borrower: str
    borrower_pubkey: Point
    borrower_node_id: bytes
    collateral: int  # satoshis
    locktime_borrower: int
    locktime_lender: int
    funding_tx: Tx
    commitment_tx_borrower0: Tx
    borrower_rev_basepoint: Point | None = None
    borrower_commitment_points: tuple[Point, ...] = ()


@dataclass
class InstallmentRecord:
    index: int
    deadline: int
    status: InstallmentStatus = InstallmentStatus.PENDING
    tx_commitment_borrower: Tx | None = None
    sig_lender: bytes | None = None
    tx_commitment_lender: Tx | None = None
    sig_borrower: bytes | None = None
    prk_borrower: int | None = None
    prk_lender: int | None = None


@dataclass
class LiquidationEvent:
    side: Side  # whose position must be cured
    trigger_rate: int
    opened_at: int
    deadline: int
    cured: bool = False
    expired: bool = False

    def open(self) -> bool:
        return not self.cured and not self.expired


@dataclass
class Settlement:
    kind: str  # borrower_close | lender_close | cooperative | dispute | expiry
    deposit_to: str | None
    payouts: dict[str, int]
    status: OfferStatus


@dataclass
class LoanOffer:
    offer_id: int
    lender: str
    terms: OfferTerms
    status: OfferStatus = OfferStatus.OFFERED
    request: BorrowerRequest | None = None
    principal: int = 0  # cents, fixed at acceptance
    acceptance_rate: int = 0
    security_deposit: int = 0  # cents currently escrowed as the deposit
    liq_value_lender: int = 0  # moves up when the deposit is topped up
    collateral_topup: int = 0  # satoshis added to cure a borrower-side event
    sig_lender_on_borrower0: bytes | None = None
    sig_borrower_on_lender0: bytes | None = None
    commitment_tx_lender0: Tx | None = None
    lender_commitment_points: tuple[Point, ...] = ()
    installments: list[InstallmentRecord] = field(default_factory=list)
    liquidation: LiquidationEvent | None = None
    penalty_free_for: Side | None = None
    last_rate: int = 0

    @property
    def borrower(self) -> str:
        return self.request.borrower if self.request else ""

    @property
    def collateral(self) -> int:
        return self.request.collateral if self.request else 0

    def funding_txid(self) -> bytes:
        return self.request.funding_tx.txid()

    def current_installment(self) -> InstallmentRecord | None:
        for record in self.installments:
            if record.status is not InstallmentStatus.LENDER_KEY:
                return record
        return None

    def completed_installments(self) -> int:
        return sum(1 for r in self.installments if r.status is InstallmentStatus.LENDER_KEY)

    def remaining_collateral(self) -> int:
        """Satoshis still economically at risk: shrinks with each completed
        installment, grows with liquidation-cure funding."""
        done = self.completed_installments()
        base = self.collateral - split_amount(self.collateral, done, self.terms.installments)
        return base + self.collateral_topup


# ---------------------------------------------------------------------------
# CDP arithmetic
# ---------------------------------------------------------------------------


def cdp_bcr(collateral_amount: int, price: Fraction | int, loan_amount: int) -> Fraction:
    """Collateralization ratio: collateral value over the loan amount."""
    if loan_amount == 0:
        raise DivisionByZero("loan amount is zero")
    return Fraction(collateral_amount) * Fraction(price) / Fraction(loan_amount)


def cdp_mla(collateral_amount: int, price: Fraction | int, min_ratio: Fraction | int) -> Fraction:
    """Maximum loan amount the collateral supports at the minimum ratio."""
    if min_ratio == 0:
        raise DivisionByZero("minimum ratio is zero")
    return Fraction(collateral_amount) * Fraction(price) / Fraction(min_ratio)


def cdp_liquidatable(
    collateral_amount: int, price: Fraction | int, min_ratio: Fraction | int, outstanding_loan: int
) -> bool:
    return cdp_mla(collateral_amount, price, min_ratio) < outstanding_loan


# ---------------------------------------------------------------------------
# The contract
# ---------------------------------------------------------------------------

INTEREST_EACH = "interest_each"  # per installment: b/N + b*k
INTEREST_TOTAL = "interest_total"  # per installment: b*(1+k)/N


class LoanContract:
    """Serialized state machine over loan offers; operations are applied one
    at a time in harness order, each appending one structured event record."""

    def __init__(
        self,
        spv: HeaderChain,
        ledger: Ledger,
        *,
        installment_formula: str = INTEREST_EACH,
        cooperative_deposit_to: str = "lender",
        require_close_proof: bool = False,
        cure_window_factor: int = 2,  # cure windows default to this many response windows
    ):
        if installment_formula not in (INTEREST_EACH, INTEREST_TOTAL):
            raise ValueError(f"unknown installment formula {installment_formula!r}")
        self.spv = spv
        self.ledger = ledger
        self.installment_formula = installment_formula
        self.cooperative_deposit_to = cooperative_deposit_to
        self.require_close_proof = require_close_proof
        self.cure_window_factor = cure_window_factor
        self.offers: dict[int, LoanOffer] = {}
        self.events: list[dict] = []
        self._next_id = 1

    # -- plumbing ---------------------------------------------------------------

    def _offer(self, offer_id: int) -> LoanOffer:
        if offer_id not in self.offers:
            raise UnknownOffer(f"no offer {offer_id}")
        return self.offers[offer_id]

    def _emit(self, op: str, offer_id: int, now: int, outcome: str, **extra) -> None:
        digest = hashlib.sha256(repr(sorted(extra.items())).encode()).hexdigest()[:16]
        record = {"time": now, "op": op, "offer_id": offer_id, "params_digest": digest, "outcome": outcome}
        record.update(extra)
        self.events.append(record)

    def installment_amount(self, offer: LoanOffer, index: int) -> int:
        """Cents due for installment ``index``; the final one absorbs the
        division remainder so totals are exact."""
        b = offer.principal
        n = offer.terms.installments
        k = offer.terms.interest_rate
        if self.installment_formula == INTEREST_EACH:
            amount = b // n + _floor(b * k)
            if index == n:
                amount += b % n
            return amount
        total = _floor(b * (1 + k))
        per = total // n
        if index == n:
            per += total - n * per
        return per

    def expected_commitment_tx(self, offer: LoanOffer, side: Side, index: int) -> Tx:
        """The byte-exact commitment transaction the contract will accept for
        one side and state, reconstructed from the agreed channel material."""
        request = offer.request
        terms = offer.terms
        addr_borrower = hash160(compress(request.borrower_pubkey))
        addr_lender = hash160(compress(terms.lender_pubkey))
        bal_borrower = split_amount(request.collateral, index, terms.installments)
        bal_lender = request.collateral - bal_borrower
        inputs = (TxIn(offer.funding_txid(), 0),)
        if side is Side.BORROWER:
            rev = derive_revocation_pubkey(
                terms.lender_rev_basepoint, request.borrower_commitment_points[index]
            )
            outputs = (
                TxOut(
                    bal_borrower,
                    commitment_output_script(
                        request.locktime_borrower, request.borrower_pubkey, terms.lender_pubkey, rev
                    ),
                ),
                TxOut(bal_lender, p2pkh_script(addr_lender)),
            )
        else:
            rev = derive_revocation_pubkey(
                request.borrower_rev_basepoint, offer.lender_commitment_points[index]
            )
            outputs = (
                TxOut(
                    bal_lender,
                    commitment_output_script(
                        request.locktime_lender, terms.lender_pubkey, request.borrower_pubkey, rev
                    ),
                ),
                TxOut(bal_borrower, p2pkh_script(addr_borrower)),
            )
        return Tx(inputs=inputs, outputs=outputs)

    def _funding_output(self, offer: LoanOffer) -> TxOut:
        spk = p2wsh_script(funding_script(offer.terms.lender_pubkey, offer.request.borrower_pubkey))
        return TxOut(offer.request.collateral, spk)

    # -- lifecycle: creation through opening ---------------------------------------

    def create_loan_offer(self, terms: OfferTerms, lender: str, now: int) -> int:
        if terms.min_collateral > terms.max_collateral:
            raise ValidationFailed("collateral_range", "minimum exceeds maximum")
        if not terms.liq_value_borrower <= terms.liq_value_lender:
            raise ValidationFailed("liquidation_ratios", "borrower threshold above lender threshold")
        if terms.installments <= 0 or terms.installment_period <= 0 or terms.response_window <= 0:
            raise ValidationFailed("periods", "installment count, period and response window must be positive")
        if terms.lender_pubkey is None or not any(terms.lender_node_id):
            raise ValidationFailed("identity", "lender key and node id must be nonzero")
        if 4 * terms.response_window > terms.installment_period:
            raise ValidationFailed("response_window", "four response windows must fit in one period")
        self.ledger.to_escrow(lender, terms.response_penalty)
        offer_id = self._next_id
        self._next_id += 1
        offer = LoanOffer(offer_id=offer_id, lender=lender, terms=terms)
        offer.liq_value_lender = terms.liq_value_lender
        self.offers[offer_id] = offer
        self._emit("createLoanOffer", offer_id, now, "LoanOfferCreated")
        return offer_id

    def request_loan(self, offer_id: int, request: BorrowerRequest, now: int) -> None:
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OFFERED:
            raise WrongStatus(f"offer is {offer.status.value}")
        if request.borrower_pubkey is None or not any(request.borrower_node_id):
            raise ZeroIdentity("borrower key and node id must be nonzero")
        if not offer.terms.min_collateral <= request.collateral <= offer.terms.max_collateral:
            raise CollateralOutOfRange(
                f"{request.collateral} outside "
                f"[{offer.terms.min_collateral}, {offer.terms.max_collateral}]"
            )
        if offer.terms.channel_deadline - now < 2 * offer.terms.response_window:
            raise TooLate("less than two response windows before the channel deadline")
        self.ledger.to_escrow(request.borrower, offer.terms.response_penalty)
        offer.request = request
        offer.status = OfferStatus.REQUESTED
        self._emit("requestLoan", offer_id, now, "LoanRequested", borrower=request.borrower)

    def check_request(self, offer_id: int, request: BorrowerRequest) -> tuple[bool, list[str]]:
        """View-only structural validation of the borrower's transactions; no
        state change, failures come back as a reason list."""
        offer = self._offer(offer_id)
        terms = offer.terms
        reasons: list[str] = []
        expected_spk = p2wsh_script(funding_script(terms.lender_pubkey, request.borrower_pubkey))
        funding = request.funding_tx
        if len(funding.outputs) != 1:
            reasons.append("funding must have exactly one output")
        else:
            if funding.outputs[0].script_pubkey != expected_spk:
                reasons.append("funding output script is not the agreed multisig witness program")
            if funding.outputs[0].amount != request.collateral:
                reasons.append("funding amount does not match the requested collateral")
        comm0 = request.commitment_tx_borrower0
        if comm0.inputs[0].outpoint() != (funding.txid(), 0):
            reasons.append("initial commitment does not spend the funding output")
        if terms.lender_rev_basepoint is None or not request.borrower_commitment_points:
            reasons.append("revocation material missing")
        else:
            saved_request, offer.request = offer.request, request
            try:
                expected = self.expected_commitment_tx(offer, Side.BORROWER, 0)
            finally:
                offer.request = saved_request
            if comm0.serialize() != expected.serialize():
                reasons.append("initial commitment does not match the agreed structure")
        return (not reasons, reasons)

    def accept_loan(
        self,
        offer_id: int,
        commitment_tx_lender0: Tx,
        sig_lender: bytes,
        lender: str,
        rate: int,
        now: int,
        lender_commitment_points: tuple[Point, ...] = (),
    ) -> int:
        """Lender accepts; fixes the principal at floor(value / ratio) and
        locks principal plus deposit. Returns the principal."""
        offer = self._offer(offer_id)
        terms = offer.terms
        if offer.status is not OfferStatus.REQUESTED:
            raise WrongStatus(f"offer is {offer.status.value}")
        if lender != offer.lender:
            raise NotLender(f"{lender} did not create this offer")
        if terms.channel_deadline - now < terms.response_window:
            raise TooLate("less than one response window before the channel deadline")
        digest = sighash(offer.request.commitment_tx_borrower0, 0, self._funding_output(offer))
        if not verify_sig(digest, terms.lender_pubkey, sig_lender):
            raise BadSignature("lender signature over the borrower's initial commitment is invalid")
        value = btc_value_cents(offer.request.collateral, rate)
        if not terms.liq_value_borrower <= value <= terms.liq_value_lender:
            raise ValidationFailed(
                "liquidation_band", f"collateral value {value} outside [{terms.liq_value_borrower}, {terms.liq_value_lender}]"
            )
        principal = _floor(Fraction(value) / terms.collateral_ratio)
        self.ledger.to_escrow(lender, principal + terms.security_deposit)
        offer.principal = principal
        offer.acceptance_rate = rate
        offer.last_rate = rate
        offer.security_deposit = terms.security_deposit
        offer.sig_lender_on_borrower0 = sig_lender
        offer.commitment_tx_lender0 = commitment_tx_lender0
        offer.lender_commitment_points = tuple(lender_commitment_points)
        offer.status = OfferStatus.ACCEPTED
        self._emit("acceptLoan", offer_id, now, "LoanAccepted", principal=principal, rate=rate)
        return principal

    def open_channel(self, offer_id: int, sig_borrower: bytes, proof: SpvProof, borrower: str, now: int) -> None:
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.ACCEPTED:
            raise WrongStatus(f"offer is {offer.status.value}")
        if borrower != offer.borrower:
            raise NotBorrower(f"{borrower} is not the requesting borrower")
        if now >= offer.terms.channel_deadline:
            raise DeadlinePassed("the channel deadline has passed")
        if not self.spv.verify_tx(proof):
            raise BadSpvProof("inclusion proof does not verify")
        if proof.tx != offer.request.funding_tx.serialize():
            raise WrongFundingTx("proven transaction is not the agreed funding transaction")
        offer.sig_borrower_on_lender0 = sig_borrower
        self.ledger.from_escrow(borrower, offer.principal + offer.terms.response_penalty)
        deadline0 = offer.terms.channel_deadline
        offer.installments = [
            InstallmentRecord(index=i, deadline=deadline0 + i * offer.terms.installment_period)
            for i in range(1, offer.terms.installments + 1)
        ]
        offer.status = OfferStatus.OPENED
        self._emit("openChannel", offer_id, now, "ChannelOpened")

    def claim_expired(self, offer_id: int, lender: str, now: int) -> Settlement:
        """Recover escrowed funds once the channel deadline passes unproven."""
        offer = self._offer(offer_id)
        if lender != offer.lender:
            raise NotLender(f"{lender} did not create this offer")
        if offer.status not in (OfferStatus.OFFERED, OfferStatus.REQUESTED, OfferStatus.ACCEPTED):
            raise WrongStatus(f"offer is {offer.status.value}")
        if now < offer.terms.channel_deadline:
            raise TooEarly("the channel deadline has not passed")
        payouts: dict[str, int] = {}

        def pay(account: str, amount: int) -> None:
            if amount:
                self.ledger.from_escrow(account, amount)
                payouts[account] = payouts.get(account, 0) + amount

        refund = offer.terms.response_penalty
        if offer.status is OfferStatus.ACCEPTED:
            refund += offer.principal + offer.security_deposit
        if offer.status in (OfferStatus.REQUESTED, OfferStatus.ACCEPTED):
            refund += offer.terms.response_penalty  # the silent borrower forfeits theirs
        pay(lender, refund)
        offer.status = OfferStatus.EXPIRED
        self._emit("claimExpired", offer_id, now, "OfferExpired")
        return Settlement("expiry", None, payouts, offer.status)

    # -- installments ----------------------------------------------------------------

    def _window(self, offer: LoanOffer, record: InstallmentRecord, now: int, factor: int) -> None:
        if record.deadline - now < factor * offer.terms.response_window:
            raise TooLate(
                f"less than {factor} response windows before installment {record.index}'s deadline"
            )

    def _check_commitment_structure(self, offer: LoanOffer, side: Side, index: int, tx: Tx) -> None:
        expected = self.expected_commitment_tx(offer, side, index)
        if tx.serialize() != expected.serialize():
            raise BadCommitmentStructure(
                f"{side.value} commitment for installment {index} deviates from the agreed structure"
            )

    def pay_installment(self, offer_id: int, tx_commitment_borrower: Tx, borrower: str, now: int) -> int:
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OPENED:
            raise WrongStatus(f"offer is {offer.status.value}")
        if borrower != offer.borrower:
            raise NotBorrower(f"{borrower} is not the borrower")
        record = offer.current_installment()
        if record is None:
            raise WrongStatus("all installments already finished")
        if record.status is not InstallmentStatus.PENDING:
            raise PreviousUnfinished(f"installment {record.index} is {record.status.value}")
        self._window(offer, record, now, 3)
        self._check_commitment_structure(offer, Side.BORROWER, record.index, tx_commitment_borrower)
        amount = self.installment_amount(offer, record.index)
        self.ledger.to_escrow(borrower, amount)
        record.tx_commitment_borrower = tx_commitment_borrower
        record.status = InstallmentStatus.PAID
        self._emit("payInstallment", offer_id, now, "InstallmentPaid", installment=record.index, amount=amount)
        return amount

    def take_installment(
        self, offer_id: int, sig_lender: bytes, tx_commitment_lender: Tx, lender: str, now: int
    ) -> None:
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OPENED:
            raise WrongStatus(f"offer is {offer.status.value}")
        if lender != offer.lender:
            raise NotLender(f"{lender} is not the lender")
        record = offer.current_installment()
        if record is None or record.status is not InstallmentStatus.PAID:
            raise WrongStatus("no paid installment awaiting acceptance")
        self._window(offer, record, now, 2)
        digest = sighash(record.tx_commitment_borrower, 0, self._funding_output(offer))
        if not verify_sig(digest, offer.terms.lender_pubkey, sig_lender):
            raise BadSignature("lender signature over the borrower commitment is invalid")
        self._check_commitment_structure(offer, Side.LENDER, record.index, tx_commitment_lender)
        record.sig_lender = sig_lender
        record.tx_commitment_lender = tx_commitment_lender
        record.status = InstallmentStatus.TAKEN
        self._emit("takeInstallment", offer_id, now, "InstallmentAccepted", installment=record.index)

    def reveal_revocation_key_borrower(
        self, offer_id: int, sig_borrower: bytes, prk_borrower: int, borrower: str, now: int
    ) -> None:
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OPENED:
            raise WrongStatus(f"offer is {offer.status.value}")
        if borrower != offer.borrower:
            raise NotBorrower(f"{borrower} is not the borrower")
        record = offer.current_installment()
        if record is None or record.status is not InstallmentStatus.TAKEN:
            raise WrongStatus("no accepted installment awaiting the borrower key")
        self._window(offer, record, now, 1)
        expected_point = offer.request.borrower_commitment_points[record.index - 1]
        if point_mul(prk_borrower) != expected_point:
            raise BadSecret(f"revealed key does not open the borrower's state-{record.index - 1} point")
        digest = sighash(record.tx_commitment_lender, 0, self._funding_output(offer))
        if not verify_sig(digest, offer.request.borrower_pubkey, sig_borrower):
            raise BadSignature("borrower signature over the lender commitment is invalid")
        record.sig_borrower = sig_borrower
        record.prk_borrower = prk_borrower
        record.status = InstallmentStatus.BORROWER_KEY
        self._emit(
            "revealRevocationKeyBorrower", offer_id, now, "BorrowerRevocationKeyRevealed", installment=record.index
        )

    def reveal_revocation_key_lender(self, offer_id: int, prk_lender: int, lender: str, now: int) -> None:
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OPENED:
            raise WrongStatus(f"offer is {offer.status.value}")
        if lender != offer.lender:
            raise NotLender(f"{lender} is not the lender")
        record = offer.current_installment()
        if record is None or record.status is not InstallmentStatus.BORROWER_KEY:
            raise WrongStatus("no installment awaiting the lender key")
        if now >= record.deadline:
            raise DeadlinePassed(f"installment {record.index} deadline has passed")
        expected_point = offer.lender_commitment_points[record.index - 1]
        if point_mul(prk_lender) != expected_point:
            raise BadSecret(f"revealed key does not open the lender's state-{record.index - 1} point")
        record.prk_lender = prk_lender
        record.status = InstallmentStatus.LENDER_KEY
        amount = self.installment_amount(offer, record.index)
        self.ledger.from_escrow(lender, amount)
        self._emit(
            "revealRevocationKeyLender", offer_id, now, "LenderRevocationKeyRevealed", installment=record.index
        )
        if record.index == offer.terms.installments:
            self.ledger.from_escrow(lender, offer.security_deposit + offer.terms.response_penalty)
            self.ledger.from_escrow(offer.borrower, offer.terms.response_penalty)
            offer.status = OfferStatus.SUCCESSFUL
            self._emit("loanCompleted", offer_id, now, "LoanSuccessful")

    # -- closing and disputes ------------------------------------------------------------

    def _classify_close(self, offer: LoanOffer, tx: Tx) -> tuple[str, Side | None]:
        txid = tx.txid()
        borrower_txids = {offer.request.commitment_tx_borrower0.txid()}
        lender_txids = set()
        if offer.commitment_tx_lender0 is not None:
            lender_txids.add(offer.commitment_tx_lender0.txid())
        for record in offer.installments:
            if record.tx_commitment_borrower is not None:
                borrower_txids.add(record.tx_commitment_borrower.txid())
            if record.tx_commitment_lender is not None:
                lender_txids.add(record.tx_commitment_lender.txid())
        if txid in borrower_txids:
            return ("borrower_close", Side.BORROWER)
        if txid in lender_txids:
            return ("lender_close", Side.LENDER)
        addr_borrower = hash160(compress(offer.request.borrower_pubkey))
        addr_lender = hash160(compress(offer.terms.lender_pubkey))
        if len(tx.outputs) == 2 and all(is_p2pkh(o.script_pubkey) for o in tx.outputs):
            addrs = {tx.outputs[0].script_pubkey.items[2], tx.outputs[1].script_pubkey.items[2]}
            if addrs <= {addr_borrower, addr_lender}:
                return ("cooperative", None)
        raise NotAChannelSpend("funding spend does not match any agreed channel transaction")

    def _release_in_flight(self, offer: LoanOffer, to_account: str, payouts: dict[str, int]) -> None:
        record = offer.current_installment()
        if record is not None and record.status in (
            InstallmentStatus.PAID,
            InstallmentStatus.TAKEN,
            InstallmentStatus.BORROWER_KEY,
        ):
            amount = self.installment_amount(offer, record.index)
            self.ledger.from_escrow(to_account, amount)
            payouts[to_account] = payouts.get(to_account, 0) + amount

    def settle_on_chain_close(
        self, offer_id: int, proof: SpvProof, now: int, deposit_to: str | None = None
    ) -> Settlement:
        """Classify a proven funding spend and settle the deposit, response
        penalties and any in-flight installment accordingly."""
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OPENED:
            raise WrongStatus(f"offer is {offer.status.value}")
        if not self.spv.verify_tx(proof):
            raise BadSpvProof("inclusion proof does not verify")
        tx = Tx.parse(proof.tx)
        if tx.inputs[0].outpoint() != (offer.funding_txid(), 0):
            raise NotAChannelSpend("proven transaction does not spend the funding output")
        kind, closer = self._classify_close(offer, tx)
        payouts: dict[str, int] = {}

        def pay(account: str, amount: int) -> None:
            if amount:
                self.ledger.from_escrow(account, amount)
                payouts[account] = payouts.get(account, 0) + amount

        liquidation_close = offer.penalty_free_for is not None and closer is offer.penalty_free_for
        if kind == "cooperative":
            deposit_account = deposit_to or (
                offer.lender if self.cooperative_deposit_to == "lender" else offer.borrower
            )
        elif liquidation_close:
            # the flagged side closes without penalty: the deposit returns home
            deposit_account = offer.lender
            if closer is Side.BORROWER:
                deposit_account = offer.borrower
        elif closer is Side.BORROWER:
            deposit_account = offer.lender
        else:
            deposit_account = offer.borrower
        pay(deposit_account, offer.security_deposit)
        pay(offer.lender, offer.terms.response_penalty)
        pay(offer.borrower, offer.terms.response_penalty)
        self._release_in_flight(offer, offer.borrower, payouts)
        offer.status = (
            OfferStatus.LIQUIDATED_CLOSED if liquidation_close else OfferStatus.DEFAULTED_CLOSED
        )
        self._emit("settleOnChainClose", offer_id, now, "ChannelClosed", kind=kind, deposit_to=deposit_account)
        return Settlement(kind, deposit_account, payouts, offer.status)

    def dispute_timeout(self, offer_id: int, now: int, close_proof: SpvProof | None = None) -> Settlement:
        """Resolve a missed move: the silent side forfeits its response
        penalty and the deposit goes to the waiting counterparty."""
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OPENED:
            raise WrongStatus(f"offer is {offer.status.value}")
        record = offer.current_installment()
        if record is None:
            raise NoTimeoutPending("no installment in progress")
        irp = offer.terms.response_window
        status = record.status
        if status is InstallmentStatus.PENDING and now > record.deadline - 3 * irp:
            claimant, defaulter = offer.lender, offer.borrower
        elif status is InstallmentStatus.PAID and now > record.deadline - 2 * irp:
            claimant, defaulter = offer.borrower, offer.lender
        elif status is InstallmentStatus.TAKEN and now > record.deadline - irp:
            claimant, defaulter = offer.lender, offer.borrower
        elif status is InstallmentStatus.BORROWER_KEY and now >= record.deadline:
            claimant, defaulter = offer.borrower, offer.lender
        else:
            raise NoTimeoutPending(f"installment {record.index} is {status.value} and within its window")
        if self.require_close_proof:
            if close_proof is None:
                raise ValidationFailed("close_proof", "an on-chain close proof is required")
            if not self.spv.verify_tx(close_proof):
                raise BadSpvProof("close proof does not verify")
            closing_tx = Tx.parse(close_proof.tx)
            if closing_tx.inputs[0].outpoint() != (offer.funding_txid(), 0):
                raise NotAChannelSpend("close proof does not spend the funding output")
        payouts: dict[str, int] = {}

        def pay(account: str, amount: int) -> None:
            if amount:
                self.ledger.from_escrow(account, amount)
                payouts[account] = payouts.get(account, 0) + amount

        pay(claimant, offer.security_deposit + 2 * offer.terms.response_penalty)
        self._release_in_flight(offer, claimant, payouts)
        offer.status = OfferStatus.DEFAULTED_CLOSED
        self._emit("disputeTimeout", offer_id, now, "DisputeResolved", claimant=claimant, defaulter=defaulter)
        return Settlement("dispute", claimant, payouts, offer.status)

    # -- liquidation --------------------------------------------------------------------

    def on_price(self, offer_id: int, rate: int, now: int) -> LiquidationEvent | None:
        """Oracle tick: opens a cure window when the remaining collateral's
        value crosses either threshold; a reading back inside the band cancels
        an open event."""
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OPENED:
            raise WrongStatus(f"offer is {offer.status.value}")
        offer.last_rate = rate
        value = btc_value_cents(offer.remaining_collateral(), rate)
        event = offer.liquidation
        if event is not None and event.open():
            if offer.terms.liq_value_borrower < value < offer.liq_value_lender:
                event.cured = True
                self._emit("onPrice", offer_id, now, "LiquidationCancelled", rate=rate, value=value)
                return None
            return event
        window = self.cure_window_factor * offer.terms.response_window
        if value <= offer.terms.liq_value_borrower:
            offer.liquidation = LiquidationEvent(Side.BORROWER, rate, now, now + window)
            self._emit("onPrice", offer_id, now, "BorrowerLiquidationOpened", rate=rate, value=value)
            return offer.liquidation
        if value >= offer.liq_value_lender:
            offer.liquidation = LiquidationEvent(Side.LENDER, rate, now, now + window)
            self._emit("onPrice", offer_id, now, "LenderLiquidationOpened", rate=rate, value=value)
            return offer.liquidation
        return None

    def fund_collateral(self, offer_id: int, delta: int, proof: SpvProof, borrower: str, now: int) -> None:
        """Borrower cure: prove a top-up output locked to the channel's
        multisig; cancels the event once the value clears the threshold."""
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OPENED:
            raise WrongStatus(f"offer is {offer.status.value}")
        if borrower != offer.borrower:
            raise NotBorrower(f"{borrower} is not the borrower")
        event = offer.liquidation
        if event is None or not event.open() or event.side is not Side.BORROWER:
            raise NoTimeoutPending("no borrower-side liquidation event open")
        if now >= event.deadline:
            raise DeadlinePassed("the cure window has closed")
        if not self.spv.verify_tx(proof):
            raise BadSpvProof("top-up inclusion proof does not verify")
        tx = Tx.parse(proof.tx)
        spk = p2wsh_script(funding_script(offer.terms.lender_pubkey, offer.request.borrower_pubkey))
        if not any(out.script_pubkey == spk and out.amount == delta for out in tx.outputs):
            raise WrongFundingTx(f"no output locking {delta} satoshis to the channel multisig")
        offer.collateral_topup += delta
        value = btc_value_cents(offer.remaining_collateral(), offer.last_rate)
        if value > offer.terms.liq_value_borrower:
            event.cured = True
            self._emit("fundCollateral", offer_id, now, "LiquidationCancelled", delta=delta, value=value)
        else:
            self._emit("fundCollateral", offer_id, now, "CollateralAdded", delta=delta, value=value)

    def top_up_deposit(self, offer_id: int, delta: int, lender: str, now: int) -> None:
        """Lender cure: raise the deposit and with it the lender-side
        threshold; cancels the event once the value is back below it."""
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OPENED:
            raise WrongStatus(f"offer is {offer.status.value}")
        if lender != offer.lender:
            raise NotLender(f"{lender} is not the lender")
        event = offer.liquidation
        if event is None or not event.open() or event.side is not Side.LENDER:
            raise NoTimeoutPending("no lender-side liquidation event open")
        if now >= event.deadline:
            raise DeadlinePassed("the cure window has closed")
        self.ledger.to_escrow(lender, delta)
        offer.security_deposit += delta
        offer.liq_value_lender += delta
        value = btc_value_cents(offer.remaining_collateral(), offer.last_rate)
        if value < offer.liq_value_lender:
            event.cured = True
            self._emit("topUpDeposit", offer_id, now, "LiquidationCancelled", delta=delta, value=value)
        else:
            self._emit("topUpDeposit", offer_id, now, "DepositAdded", delta=delta, value=value)

    def liquidation_timeout(self, offer_id: int, now: int) -> Side:
        """Expire an uncured window: the counterparty may now close the
        channel penalty-free (settle keeps the deposit from switching sides)."""
        offer = self._offer(offer_id)
        if offer.status is not OfferStatus.OPENED:
            raise WrongStatus(f"offer is {offer.status.value}")
        event = offer.liquidation
        if event is None or not event.open():
            raise NoTimeoutPending("no liquidation event open")
        if now < event.deadline:
            raise NoTimeoutPending("the cure window is still open")
        event.expired = True
        offer.penalty_free_for = event.side.other()
        self._emit(
            "liquidationTimeout", offer_id, now, "LiquidationExpired", uncured=event.side.value
        )
        return offer.penalty_free_for
