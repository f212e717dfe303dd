import numpy as np
import pytest

from zklora.field import DEFAULT_PROFILE
from zklora.quantizer import (ENTRY_LIMIT, NonFinite, Overflow, QuantizedMatrix, delta_exact, dequantize,
                              overflow_check, quantization_error_bound, quantize)

P = DEFAULT_PROFILE.p


def test_quantize_examples():
    assert quantize(0.5, 12).entries[0, 0] == 2048
    assert quantize(-0.25, 12).entries[0, 0] == -1024
    assert quantize(1 / 3, 12).entries[0, 0] == 1365


def test_ties_to_even():
    # 0.5 / 4096 and 1.5 / 4096 sit exactly halfway
    q = quantize(np.array([[0.5, 1.5, 2.5, -0.5, -1.5]]) / 4096, 12).entries
    assert q.tolist() == [[0, 2, 2, 0, -2]]


def test_quantize_errors():
    with pytest.raises(NonFinite):
        quantize([[np.nan]], 12)
    with pytest.raises(NonFinite):
        quantize([[np.inf]], 12)
    with pytest.raises(Overflow):
        quantize([[2.0**50]], 12)
    with pytest.raises(ValueError):
        QuantizedMatrix(np.array([[ENTRY_LIMIT]], dtype=object), 1)
    with pytest.raises(ValueError):
        QuantizedMatrix(np.zeros((2, 2), np.int64), 2)


def test_dequantize():
    assert dequantize(QuantizedMatrix(np.array([[2048]]), 1), 12)[0, 0] == 0.5
    assert dequantize(QuantizedMatrix(np.array([[2**36]]), 3), 12)[0, 0] == 1.0
    m = np.random.default_rng(0).uniform(-3, 3, (20, 20))
    for f in (4, 12, 24):
        assert np.abs(dequantize(quantize(m, f), f) - m).max() <= 2.0 ** (-f - 1)


def _q(a):
    return QuantizedMatrix(np.asarray(a, dtype=np.int64), 1)


def _oracle(A, B, X):
    # Python ints, schoolbook
    r, n = len(A), len(A[0])
    d, m = len(B), len(X[0])
    AX = [[sum(A[i][k] * X[k][j] for k in range(n)) for j in range(m)] for i in range(r)]
    return [[sum(B[i][k] * AX[k][j] for k in range(r)) for j in range(m)] for i in range(d)]


def test_delta_examples():
    assert delta_exact(_q([[1, 2]]), _q([[3]]), _q([[1], [1]])).entries.tolist() == [[9]]
    z = delta_exact(_q(np.ones((2, 3))), _q(np.zeros((4, 2))), _q(np.ones((3, 5))))
    assert not z.entries.any() and z.scale_exp == 3


def test_delta_exact_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, r, d, m = (int(v) for v in rng.integers(1, 9, 4))
        A = rng.integers(-2**16, 2**16 + 1, (r, n))
        B = rng.integers(-2**16, 2**16 + 1, (d, r))
        X = rng.integers(-2**16, 2**16 + 1, (n, m))
        got = delta_exact(_q(A), _q(B), _q(X)).entries
        assert got.tolist() == _oracle(A.tolist(), B.tolist(), X.tolist())


def test_delta_exact_wide_path():
    # partial sums above 2^63 take the object path and still come out exact
    A = np.full((4, 4), 2**40, dtype=np.int64)
    A[0, 0] += 3
    B = np.array([[1, -1, 1, -1]], dtype=np.int64)
    X = np.full((4, 1), 2**22, dtype=np.int64)
    got = delta_exact(_q(A), _q(B), _q(X)).entries
    assert got.tolist() == _oracle(A.tolist(), B.tolist(), X.tolist()) == [[3 * 2**22]]
    with pytest.raises(Overflow):
        delta_exact(_q(np.full((2, 2), 2**40)), _q(np.full((2, 2), 2**10)), _q(np.full((2, 2), 2**20)))


def test_delta_bilinear():
    rng = np.random.default_rng(2)
    A1, A2 = rng.integers(-999, 999, (3, 5)), rng.integers(-999, 999, (3, 5))
    B, X = rng.integers(-999, 999, (4, 3)), rng.integers(-999, 999, (5, 2))
    lhs = delta_exact(_q(A1 + A2), _q(B), _q(X)).entries
    rhs = delta_exact(_q(A1), _q(B), _q(X)).entries + delta_exact(_q(A2), _q(B), _q(X)).entries
    assert (lhs == rhs).all()


def test_overflow_check():
    rep = overflow_check(4096, 64, 15, 12, 2**16, 2**16, 2**16, P)
    # 64 * 2^16 * 4096 * 2^16 * 2^16
    assert rep.ok and rep.bound == 2**66 and rep.limit == (P - 1) // 2
    assert overflow_check(10, 3, 1, 12, 0, 5, 5, P).bound == 0
    assert not overflow_check(2**60, 2**10, 1, 12, 2**62, 2**62, 2**62, P).ok
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, r, d, m = (int(v) for v in rng.integers(1, 12, 4))
        A, B, X = (rng.integers(-5000, 5001, s) for s in ((r, n), (d, r), (n, m)))
        D = delta_exact(_q(A), _q(B), _q(X))
        rep = overflow_check(n, r, m, 12, _q(A).max_abs(), _q(B).max_abs(), _q(X).max_abs(), P)
        assert rep.bound >= D.max_abs()


def test_error_bound_basic():
    assert quantization_error_bound(0, 0, 0, 8, 4, 12) == 0
    assert quantization_error_bound(0, 1, 1, 8, 4, 12) == 0
    vals = [quantization_error_bound(1, 1, 1, 8, 4, f) for f in range(4, 25)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-4


@pytest.mark.parametrize("f", [4, 8, 12, 16])
def test_error_bound_empirical(f):
    rng = np.random.default_rng(f)
    for _ in range(100):
        n, r, d, m = (int(v) for v in rng.integers(1, 17, 4))
        scale = rng.uniform(0.1, 4)
        A, B, X = (rng.uniform(-scale, scale, s) for s in ((r, n), (d, r), (n, m)))
        D = dequantize(delta_exact(quantize(A, f), quantize(B, f), quantize(X, f)), f)
        err = np.abs(D - B @ (A @ X)).max()
        bound = quantization_error_bound(np.abs(A).max(), np.abs(B).max(), np.abs(X).max(), n, r, f)
        assert err <= bound
