"""Ristretto255 prime-order group on top of edwards25519.

Points are carried internally in extended twisted-Edwards coordinates
(X:Y:Z:T) over GF(2^255 - 19) using gmpy2 integers; the canonical 32-byte
ristretto encoding is only computed at the byte boundary.  Group operations
are variable-time.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import gmpy2
from gmpy2 import mpz

__all__ = [
    "GROUP_ORDER",
    "InvalidEncoding",
    "Point",
    "IDENTITY",
    "BASEPOINT",
    "msm",
    "FixedBaseTable",
    "hash_to_group",
]

# Order of the ristretto255 group (prime, ~2^252).
GROUP_ORDER = 2**252 + 27742317777372353535851937790883648493

_P = mpz(2**255 - 19)
_D = mpz(-121665) * gmpy2.invert(mpz(121666), _P) % _P
_D2 = 2 * _D % _P
_SQRT_M1 = gmpy2.powmod(mpz(2), (_P - 1) // 4, _P)
_SQRT_EXP = (_P - 5) // 8
_HALF_ORDER = GROUP_ORDER // 2


class InvalidEncoding(ValueError):
    """Raised when 32 bytes are not a canonical ristretto255 encoding."""


def _is_negative(x):
    return bool((x % _P) & 1)


def _abs(x):
    x %= _P
    return _P - x if x & 1 else x


def _sqrt_ratio_m1(u, v):
    """Return (was_square, r) with r the non-negative root of u/v or i*u/v."""
    v3 = v * v % _P * v % _P
    v7 = v3 * v3 % _P * v % _P
    r = u * v3 % _P * gmpy2.powmod(u * v7 % _P, _SQRT_EXP, _P) % _P
    check = v * r % _P * r % _P
    u = u % _P
    neg_u = (-u) % _P
    correct = check == u
    flipped = check == neg_u
    flipped_i = check == neg_u * _SQRT_M1 % _P
    if flipped or flipped_i:
        r = r * _SQRT_M1 % _P
    return correct or flipped, _abs(r)


_INVSQRT_A_MINUS_D = _sqrt_ratio_m1(mpz(1), (-1 - _D) % _P)[1]

_IDENT = (mpz(0), mpz(1), mpz(1), mpz(0))


def _add(p1, p2):
    x1, y1, z1, t1 = p1
    x2, y2, z2, t2 = p2
    a = (y1 - x1) * (y2 - x2) % _P
    b = (y1 + x1) * (y2 + x2) % _P
    c = t1 * _D2 % _P * t2 % _P
    d = 2 * z1 * z2 % _P
    e = b - a
    f = d - c
    g = d + c
    h = b + a
    return (e * f % _P, g * h % _P, f * g % _P, e * h % _P)


def _dbl(p1):
    x1, y1, z1, _ = p1
    a = x1 * x1 % _P
    b = y1 * y1 % _P
    c = 2 * z1 * z1 % _P
    e = ((x1 + y1) * (x1 + y1) - a - b) % _P
    g = b - a
    f = g - c
    h = -a - b
    return (e * f % _P, g * h % _P, f * g % _P, e * h % _P)


def _neg(p1):
    x, y, z, t = p1
    return ((-x) % _P, y, z, (-t) % _P)


def _eq(p1, p2):
    x1, y1, _, _ = p1
    x2, y2, _, _ = p2
    return (x1 * y2 - y1 * x2) % _P == 0 or (y1 * y2 - x1 * x2) % _P == 0


def _encode(p1) -> bytes:
    x0, y0, z0, t0 = p1
    u1 = (z0 + y0) * (z0 - y0) % _P
    u2 = x0 * y0 % _P
    _, invsqrt = _sqrt_ratio_m1(mpz(1), u1 * u2 % _P * u2 % _P)
    den1 = invsqrt * u1 % _P
    den2 = invsqrt * u2 % _P
    z_inv = den1 * den2 % _P * t0 % _P
    if _is_negative(t0 * z_inv):
        x, y = y0 * _SQRT_M1 % _P, x0 * _SQRT_M1 % _P
        den_inv = den1 * _INVSQRT_A_MINUS_D % _P
    else:
        x, y = x0, y0
        den_inv = den2
    if _is_negative(x * z_inv):
        y = -y
    s = _abs(den_inv * (z0 - y))
    return int(s).to_bytes(32, "little")


def _decode(data: bytes):
    if len(data) != 32:
        raise InvalidEncoding("ristretto255 encoding must be 32 bytes")
    s = mpz(int.from_bytes(data, "little"))
    if s >= _P or s & 1:
        raise InvalidEncoding("non-canonical field element")
    ss = s * s % _P
    u1 = (1 - ss) % _P
    u2 = (1 + ss) % _P
    u2_sqr = u2 * u2 % _P
    v = (-(_D * u1 % _P * u1) - u2_sqr) % _P
    was_square, invsqrt = _sqrt_ratio_m1(mpz(1), v * u2_sqr % _P)
    den_x = invsqrt * u2 % _P
    den_y = invsqrt * den_x % _P * v % _P
    x = _abs(2 * s * den_x)
    y = u1 * den_y % _P
    t = x * y % _P
    if not was_square or t & 1 or y == 0:
        raise InvalidEncoding("not a valid ristretto255 point")
    return (x, y, mpz(1), t)


class Point:
    """An element of the ristretto255 group."""

    __slots__ = ("_p",)

    def __init__(self, ext):
        self._p = ext

    @classmethod
    def decode(cls, data: bytes) -> "Point":
        return cls(_decode(bytes(data)))

    def encode(self) -> bytes:
        return _encode(self._p)

    def is_identity(self) -> bool:
        return _eq(self._p, _IDENT)

    def __add__(self, other: "Point") -> "Point":
        return Point(_add(self._p, other._p))

    def __sub__(self, other: "Point") -> "Point":
        return Point(_add(self._p, _neg(other._p)))

    def __neg__(self) -> "Point":
        return Point(_neg(self._p))

    def __mul__(self, k: int) -> "Point":
        return msm([k], [self])

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, Point):
            return NotImplemented
        return _eq(self._p, other._p)

    def __hash__(self) -> int:
        return hash(self.encode())

    def __repr__(self) -> str:
        return f"Point({self.encode().hex()})"


def _edwards_basepoint():
    y = 4 * gmpy2.invert(mpz(5), _P) % _P
    u = (y * y - 1) % _P
    v = (_D * y * y + 1) % _P
    ok, x = _sqrt_ratio_m1(u, v)
    assert ok
    return (x, y, mpz(1), x * y % _P)


IDENTITY = Point(_IDENT)
BASEPOINT = Point(_edwards_basepoint())


def _signed(k: int) -> int:
    k %= GROUP_ORDER
    return k - GROUP_ORDER if k > _HALF_ORDER else k


def _window_size(n: int, bits: int) -> int:
    best, best_cost = 2, None
    for c in range(2, 17):
        cost = (-(-bits // c) + 1) * (n + (1 << c)) + bits
        if best_cost is None or cost < best_cost:
            best, best_cost = c, cost
    return best


def _msm_raw(scalars: Sequence[int], points: Sequence[tuple]):
    ks = []
    pos = []
    neg = []
    for k, pt in zip(scalars, points):
        if k == 0:
            continue
        if k < 0:
            k = -k
            pt = _neg(pt)
        ks.append(k)
        pos.append(pt)
    if not ks:
        return _IDENT
    neg = [_neg(pt) for pt in pos]
    bits = max(k.bit_length() for k in ks)
    c = _window_size(len(ks), bits)
    mask = (1 << c) - 1
    half = 1 << (c - 1)
    nwin = -(-bits // c) + 1

    # Signed base-2^c recoding, digits in [-half, half).
    digits = []
    for k in ks:
        row = []
        for _ in range(nwin):
            dg = k & mask
            k >>= c
            if dg >= half:
                dg -= 1 << c
                k += 1
            row.append(dg)
        digits.append(row)

    acc = None
    for w in range(nwin - 1, -1, -1):
        if acc is not None:
            for _ in range(c):
                acc = _dbl(acc)
        buckets = [None] * half
        for i, row in enumerate(digits):
            dg = row[w]
            if dg > 0:
                b = buckets[dg - 1]
                buckets[dg - 1] = pos[i] if b is None else _add(b, pos[i])
            elif dg < 0:
                b = buckets[-dg - 1]
                buckets[-dg - 1] = neg[i] if b is None else _add(b, neg[i])
        running = None
        total = None
        for b in reversed(buckets):
            if b is not None:
                running = b if running is None else _add(running, b)
            if running is not None:
                total = running if total is None else _add(total, running)
        if total is not None:
            acc = total if acc is None else _add(acc, total)
    return _IDENT if acc is None else acc


def msm(scalars: Iterable[int], points: Sequence[Point]) -> Point:
    """Multi-scalar multiplication sum_i k_i * P_i (Pippenger, signed digits).

    Scalars are taken mod the group order and recentred, so small negative
    integers stay cheap.
    """
    ks = [_signed(int(k)) for k in scalars]
    if len(ks) != len(points):
        raise ValueError("scalars and points differ in length")
    return Point(_msm_raw(ks, [p._p for p in points]))


class FixedBaseTable:
    """Precomputed nibble table for repeated multiplication of one point."""

    def __init__(self, point: Point):
        self.point = point
        table = []
        base = point._p
        for _ in range(64):
            row = [_IDENT, base]
            for _ in range(14):
                row.append(_add(row[-1], base))
            table.append(row)
            for _ in range(4):
                base = _dbl(base)
        self._table = table

    def mul_raw(self, k: int):
        k %= GROUP_ORDER
        acc = None
        for row in self._table:
            nib = k & 15
            k >>= 4
            if nib:
                acc = row[nib] if acc is None else _add(acc, row[nib])
        return _IDENT if acc is None else acc

    def mul(self, k: int) -> Point:
        return Point(self.mul_raw(k))


def hash_to_group(seed: bytes, hash_name: str = "sha256") -> Point:
    """Map seed to a point with unknown discrete log by rejection sampling.

    Candidate i is H(seed || i) with the top bit cleared, accepted once it is a
    canonical, non-identity ristretto255 encoding.
    """
    retry = 0
    while True:
        h = hashlib.new(hash_name, seed + retry.to_bytes(4, "big")).digest()
        cand = h[:31] + bytes([h[31] & 0x7F])
        retry += 1
        try:
            pt = Point.decode(cand)
        except InvalidEncoding:
            continue
        if not pt.is_identity():
            return pt

