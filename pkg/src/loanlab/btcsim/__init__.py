"""Miniature Bitcoin: keys, scripts, transactions, UTXO chain simulator."""

from .chain import (  # noqa: F401
    ANCHOR_SCRIPT,
    DEFAULT_BITS,
    BlockRecord,
    Clock,
    MissingUtxo,
    NonFinal,
    ScriptFailure,
    SimChain,
    TxRejected,
    ValueMismatch,
    grind_header,
)
from .keys import (  # noqa: F401
    GENERATOR,
    ORDER,
    InvalidScalar,
    KeyPair,
    Point,
    PointOffCurve,
    compress,
    decompress,
    is_on_curve,
    keygen,
    point_add,
    point_mul,
    sign,
    verify_sig,
)
from .script import (  # noqa: F401
    EvalContext,
    MalformedScript,
    Opcode,
    Script,
    eval_script,
    hash160,
    is_p2pkh,
    is_p2wsh,
    p2pkh_script,
    p2wsh_script,
    script_num,
)
from .tx import NULL_OUTPOINT, Tx, TxIn, TxOut, sighash  # noqa: F401
