"""Fixed-point conversion that makes the LoRA product exact over the integers.

Weights and activations are stored at scale S = 2^f (``scale_exp = 1``);
the delta B·A·X of three such operands lives at scale S^3 (``scale_exp = 3``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "QuantizationError",
    "NonFinite",
    "Overflow",
    "QuantizedMatrix",
    "OverflowReport",
    "quantize",
    "dequantize",
    "delta_exact",
    "overflow_check",
    "quantization_error_bound",
    "ENTRY_LIMIT",
]

# Serialization limit on |entry|; field overflow is checked separately.
ENTRY_LIMIT = 2**62


class QuantizationError(ValueError):
    pass


class NonFinite(QuantizationError):
    pass


class Overflow(QuantizationError):
    pass


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    entries: np.ndarray  # int64, shape (rows, cols)
    scale_exp: int = 1

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2:
            raise ValueError("QuantizedMatrix needs a 2-d array")
        if e.dtype != np.int64:
            if e.dtype == object:
                if any(abs(int(x)) >= ENTRY_LIMIT for x in e.ravel()):
                    raise Overflow("entry magnitude reaches 2^62")
            e = e.astype(np.int64)
        if self.scale_exp not in (1, 3):
            raise ValueError("scale_exp must be 1 or 3")
        if e.size and int(np.abs(e).max()) >= ENTRY_LIMIT:
            raise Overflow("entry magnitude reaches 2^62")
        e = np.ascontiguousarray(e)
        e.flags.writeable = False
        object.__setattr__(self, "entries", e)

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def max_abs(self) -> int:
        return int(np.abs(self.entries).max()) if self.entries.size else 0

    def __eq__(self, other):
        if not isinstance(other, QuantizedMatrix):
            return NotImplemented
        return self.scale_exp == other.scale_exp and np.array_equal(self.entries, other.entries)

    def __repr__(self):
        return f"QuantizedMatrix({self.rows}x{self.cols}, scale_exp={self.scale_exp})"


def quantize(m, f: int) -> QuantizedMatrix:
    """Round m * 2^f to the nearest integer, ties to even."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    if not np.all(np.isfinite(a)):
        raise NonFinite("matrix contains NaN or infinity")
    scaled = np.rint(np.ldexp(a, f))
    if scaled.size and np.abs(scaled).max() >= ENTRY_LIMIT:
        raise Overflow("quantized entry reaches 2^62")
    return QuantizedMatrix(scaled.astype(np.int64), 1)


def dequantize(q: QuantizedMatrix, f: int) -> np.ndarray:
    return np.ldexp(q.entries.astype(np.float64), -f * q.scale_exp)


def _matmul_exact(a: np.ndarray, b: np.ndarray, bound: int) -> np.ndarray:
    # int64 is exact when every partial sum is bounded below 2^63
    if bound < 2**63:
        return a @ b
    return (a.astype(object) @ b.astype(object))


def delta_exact(A_q: QuantizedMatrix, B_q: QuantizedMatrix, X_q: QuantizedMatrix) -> QuantizedMatrix:
    """Integer delta B_q · (A_q · X_q) at scale S^3."""
    r, n = A_q.shape
    d, r2 = B_q.shape
    n2, _ = X_q.shape
    if r != r2 or n != n2:
        raise ValueError(f"dims do not conform: A {A_q.shape}, B {B_q.shape}, X {X_q.shape}")
    ax_bound = n * A_q.max_abs() * X_q.max_abs()
    ax = _matmul_exact(A_q.entries, X_q.entries, ax_bound)
    ax_max = int(np.abs(ax).max()) if ax.size else 0
    delta = _matmul_exact(B_q.entries, ax, r * B_q.max_abs() * ax_max)
    if delta.size and max(abs(int(x)) for x in (delta.max(), delta.min())) >= ENTRY_LIMIT:
        raise Overflow("delta entry reaches 2^62")
    return QuantizedMatrix(delta, 3)


@dataclass(frozen=True)
class OverflowReport:
    ok: bool
    bound: int
    limit: int


def overflow_check(n: int, r: int, m: int, f: int, maxA: int, maxB: int, maxX: int, p: int) -> OverflowReport:
    """Worst-case |delta| for integer operands against the centred field range.

    Only the integer stage matters: the verifier's challenge combinations
    are computed in the field.  ``m`` and ``f`` do not enter the bound.
    """
    bound = r * maxB * (n * maxA * maxX)
    limit = (p - 1) // 2
    return OverflowReport(bound <= limit, bound, limit)


def quantization_error_bound(maxA: float, maxB: float, maxX: float, n: int, r: int, f: int) -> float:
    """Sup-norm bound on dequantize(delta_exact(...)) - B·A·X."""
    if maxA == 0 or maxB == 0 or maxX == 0:
        # a zero operand quantizes to zero, so both products vanish exactly
        return 0.0
    eps = 2.0 ** (-f - 1)
    e_v = n * (maxA * eps + maxX * eps + eps * eps)
    max_v = n * maxA * maxX
    return r * (maxB * e_v + max_v * eps + eps * e_v)
