import numpy as np
import pytest

from mfuser import tensor as T
from mfuser.ssm import (FlopCounter, SsmParams, discretize, linear_recurrence, scan_blocked, scan_cost,
                        scan_sequential, selective_scan)
from mfuser.tensor import ContractError, DimensionError, Tensor


def unrolled_oracle(x, p: SsmParams):
    """Straight-line loops: project, discretize, recur, read out; no vectorized scan."""
    x = np.asarray(x)
    Tn, d = x.shape
    n = p.d_state
    W, b = p.proj_w.data, p.proj_b.data
    A = -np.exp(p.A_log.data)
    y = np.zeros((Tn, d))
    h = np.zeros((d, n))
    for t in range(Tn):
        z = x[t] @ W + b
        Bt, Ct, raw = z[:n], z[n:2 * n], z[2 * n:]
        delta = np.log1p(np.exp(raw + p.dt_bias.data))
        for i in range(d):
            for s in range(n):
                h[i, s] = np.exp(delta[i] * A[i, s]) * h[i, s] + delta[i] * Bt[s] * x[t, i]
            y[t, i] = sum(Ct[s] * h[i, s] for s in range(n)) + p.D_skip.data[i] * x[t, i]
    return y


@pytest.mark.parametrize("seed", range(5))
def test_sequential_matches_unrolled_oracle(seed):
    rng = np.random.default_rng(seed)
    p = SsmParams(4, 3, rng)
    x = rng.normal(size=(23, 4))
    err = np.abs(scan_sequential(x, p).data - unrolled_oracle(x, p)).max()
    assert err < 1e-10


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("T_len", [1, 2, 7, 16, 33, 128])
def test_blocked_equals_sequential_all_blocks(seed, T_len):
    rng = np.random.default_rng(seed)
    p = SsmParams(3, 2, rng)
    x = rng.normal(size=(2, T_len, 3))
    ref = scan_sequential(x, p).data
    blocks = range(1, T_len + 2) if T_len <= 33 else [1, 2, 3, 5, 8, 16, 31, 64, 100, 128, 129]
    for block in blocks:
        assert np.abs(scan_blocked(x, p, block).data - ref).max() < 1e-9, block


def test_linear_recurrence_oracle():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 1, size=(37, 2, 3))
    u = rng.normal(size=(37, 2, 3))
    h = np.zeros((2, 3))
    ref = []
    for t in range(37):
        h = a[t] * h + u[t]
        ref.append(h.copy())
    for block in (None, 1, 4, 10, 37, 50):
        np.testing.assert_allclose(linear_recurrence(a, u, block), np.array(ref), atol=1e-12)


def test_discretize():
    A = -np.array([[1.0, 2.0]])
    Abar, Bbar = discretize(A, np.array([0.5, -1.0]), np.array([0.1]))
    np.testing.assert_allclose(Abar, np.exp([[-0.1, -0.2]]))
    np.testing.assert_allclose(Bbar, [[0.05, -0.1]])
    with pytest.raises(ContractError):
        discretize(A, np.array([0.5, -1.0]), np.array([0.0]))


def test_zero_input_gives_zero_state():
    p = SsmParams(3, 4, np.random.default_rng(0))
    assert np.all(scan_sequential(np.zeros((5, 3)), p).data == 0.0)


def test_causal_prefix_invariance():
    rng = np.random.default_rng(5)
    p = SsmParams(3, 2, rng)
    x = rng.normal(size=(20, 3))
    y = scan_blocked(x, p, 4).data
    x2 = x.copy()
    x2[11:] = rng.normal(size=(9, 3))
    assert np.array_equal(scan_blocked(x2, p, 4).data[:11], y[:11])


def test_errors():
    p = SsmParams(3, 2, np.random.default_rng(0))
    with pytest.raises(ContractError):
        scan_sequential(np.zeros((0, 3)), p)
    with pytest.raises(DimensionError):
        scan_sequential(np.zeros((4, 5)), p)
    with pytest.raises(ContractError):
        scan_blocked(np.zeros((4, 3)), p, 0)
    with pytest.raises(ContractError):
        selective_scan(np.ones((2, 3)), -np.ones((2, 3)), -np.ones((3, 2)), np.ones((2, 2)),
                       np.ones((2, 2)), np.ones(3))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("block", [None, 3])
def test_scan_gradients(seed, block):
    rng = np.random.default_rng(seed)
    p = SsmParams(3, 2, rng)
    w = rng.normal(size=(2, 9, 3))
    f = lambda x: (scan_blocked(x, p, block) if block else scan_sequential(x, p)) * w
    assert T.finite_diff_check(lambda x: f(x).sum(), rng.normal(size=(2, 9, 3))) < 1e-4
    x0 = Tensor(rng.normal(size=(2, 9, 3)))
    assert T.param_grad_check(lambda: f(x0).sum(), p.parameters(), seed=seed) < 1e-4


@pytest.mark.parametrize("dims", [(32, 4, 3), (5, 2, 1), (17, 8, 16)])
def test_instrumented_count_matches_analytic(dims):
    T_len, d, n = dims
    p = SsmParams(d, n, np.random.default_rng(0))
    c = FlopCounter()
    scan_sequential(np.random.default_rng(1).normal(size=(T_len, d)), p, counter=c)
    assert c.count == scan_cost(T_len, d, n)
    assert scan_cost(32, 4, 3) == 4824


def test_cost_is_linear_in_length():
    a, b, c = (scan_cost(t, 8, 4) for t in (100, 200, 300))
    assert b - a == c - b
