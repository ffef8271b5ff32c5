"""secp256k1 keys and deterministic ECDSA.

Implemented in-package rather than via an external binding because replays
must be byte-identical across runs (RFC-6979 nonces, low-s normalization) and
the channel layer needs raw scalar/point arithmetic for revocation keys.
Jacobian coordinates keep a scalar multiplication under a millisecond, which
is ample at desk scale. Signatures are 64-byte big-endian r||s.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass

# Curve parameters from the secp256k1 specification.
FIELD_P = 2**256 - 2**32 - 977
ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
GENERATOR = (
    0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798,
    0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8,
)

Point = tuple  # (x, y) affine; None is the point at infinity


class InvalidScalar(ValueError):
    """Secret scalar outside [1, order)."""


class PointOffCurve(ValueError):
    """Point does not satisfy the curve equation."""


def is_on_curve(point: Point | None) -> bool:
    if point is None:
        return True
    x, y = point
    return (y * y - (x * x * x + 7)) % FIELD_P == 0


def _jac_double(p):
    x, y, z = p
    if not y:
        return (0, 0, 0)
    ysq = y * y % FIELD_P
    s = 4 * x * ysq % FIELD_P
    m = 3 * x * x % FIELD_P
    nx = (m * m - 2 * s) % FIELD_P
    ny = (m * (s - nx) - 8 * ysq * ysq) % FIELD_P
    nz = 2 * y * z % FIELD_P
    return (nx, ny, nz)


def _jac_add(p, q):
    if not p[1]:
        return q
    if not q[1]:
        return p
    u1 = p[0] * q[2] * q[2] % FIELD_P
    u2 = q[0] * p[2] * p[2] % FIELD_P
    s1 = p[1] * pow(q[2], 3, FIELD_P) % FIELD_P
    s2 = q[1] * pow(p[2], 3, FIELD_P) % FIELD_P
    if u1 == u2:
        if s1 != s2:
            return (0, 0, 1)
        return _jac_double(p)
    h = u2 - u1
    r = s2 - s1
    h2 = h * h % FIELD_P
    h3 = h * h2 % FIELD_P
    u1h2 = u1 * h2 % FIELD_P
    nx = (r * r - h3 - 2 * u1h2) % FIELD_P
    ny = (r * (u1h2 - nx) - s1 * h3) % FIELD_P
    nz = h * p[2] * q[2] % FIELD_P
    return (nx, ny, nz)


def _to_jac(point: Point | None):
    if point is None:
        return (0, 0, 0)
    return (point[0], point[1], 1)


def _to_affine(jac) -> Point | None:
    x, y, z = jac
    if not y or not z:
        return None
    zinv = pow(z, FIELD_P - 2, FIELD_P)
    zinv2 = zinv * zinv % FIELD_P
    return (x * zinv2 % FIELD_P, y * zinv2 * zinv % FIELD_P)


def point_add(a: Point | None, b: Point | None) -> Point | None:
    return _to_affine(_jac_add(_to_jac(a), _to_jac(b)))


def point_mul(k: int, point: Point | None = None) -> Point | None:
    """k times the point (the generator if omitted)."""
    if point is None:
        point = GENERATOR
    k %= ORDER
    if k == 0 or point is None:
        return None
    result = (0, 0, 0)
    addend = _to_jac(point)
    while k:
        if k & 1:
            result = _jac_add(result, addend)
        addend = _jac_double(addend)
        k >>= 1
    return _to_affine(result)


def compress(point: Point) -> bytes:
    if point is None or not is_on_curve(point):
        raise PointOffCurve(f"cannot compress {point!r}")
    x, y = point
    return bytes([2 + (y & 1)]) + x.to_bytes(32, "big")


def decompress(raw: bytes) -> Point:
    if len(raw) != 33 or raw[0] not in (2, 3):
        raise PointOffCurve(f"bad compressed point of {len(raw)} bytes")
    x = int.from_bytes(raw[1:], "big")
    if x >= FIELD_P:
        raise PointOffCurve("x out of field")
    y_sq = (pow(x, 3, FIELD_P) + 7) % FIELD_P
    y = pow(y_sq, (FIELD_P + 1) // 4, FIELD_P)
    if y * y % FIELD_P != y_sq:
        raise PointOffCurve("x has no square root on the curve")
    if y & 1 != raw[0] & 1:
        y = FIELD_P - y
    return (x, y)


@dataclass(frozen=True)
class KeyPair:
    sk: int
    pk: Point

    @classmethod
    def from_secret(cls, sk: int) -> "KeyPair":
        if not 1 <= sk < ORDER:
            raise InvalidScalar(f"secret {sk} outside [1, order)")
        return cls(sk, point_mul(sk))


def keygen(rng: random.Random) -> KeyPair:
    """Key pair drawn from the harness seed stream; deterministic per rng state."""
    sk = rng.getrandbits(256) % (ORDER - 1) + 1
    return KeyPair.from_secret(sk)


def _rfc6979_nonce(digest: bytes, sk: int, retry: int) -> int:
    k = b"\x00" * 32
    v = b"\x01" * 32
    key = sk.to_bytes(32, "big")
    k = hmac.new(k, v + b"\x00" + key + digest, hashlib.sha256).digest()
    v = hmac.new(k, v, hashlib.sha256).digest()
    k = hmac.new(k, v + b"\x01" + key + digest, hashlib.sha256).digest()
    v = hmac.new(k, v, hashlib.sha256).digest()
    while True:
        v = hmac.new(k, v, hashlib.sha256).digest()
        candidate = int.from_bytes(v, "big")
        if 1 <= candidate < ORDER:
            if retry == 0:
                return candidate
            retry -= 1
        k = hmac.new(k, v + b"\x00", hashlib.sha256).digest()
        v = hmac.new(k, v, hashlib.sha256).digest()


def sign(msg_digest: bytes, kp: KeyPair) -> bytes:
    """ECDSA with a deterministic nonce; two signings of (m, sk) are identical."""
    if not 1 <= kp.sk < ORDER:
        raise InvalidScalar("secret outside [1, order)")
    z = int.from_bytes(msg_digest, "big") % ORDER
    retry = 0
    while True:
        k = _rfc6979_nonce(msg_digest, kp.sk, retry)
        point = point_mul(k)
        r = point[0] % ORDER
        if r == 0:
            retry += 1
            continue
        s = pow(k, ORDER - 2, ORDER) * (z + r * kp.sk) % ORDER
        if s == 0:
            retry += 1
            continue
        if s > ORDER // 2:
            s = ORDER - s
        return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify_sig(msg_digest: bytes, pk: Point, sig: bytes) -> bool:
    if len(sig) != 64 or pk is None or not is_on_curve(pk):
        return False
    r = int.from_bytes(sig[:32], "big")
    s = int.from_bytes(sig[32:], "big")
    if not (1 <= r < ORDER and 1 <= s < ORDER):
        return False
    z = int.from_bytes(msg_digest, "big") % ORDER
    s_inv = pow(s, ORDER - 2, ORDER)
    u1 = z * s_inv % ORDER
    u2 = r * s_inv % ORDER
    point = point_add(point_mul(u1), point_mul(u2, pk))
    if point is None:
        return False
    return point[0] % ORDER == r
