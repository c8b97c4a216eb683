import numpy as np
import pytest

from mfuser import tensor as T
from mfuser.tensor import ContractError, DimensionError, NonFiniteError, Tensor


def _fd(f, shape, seed, positive=False, **kw):
    x = np.random.default_rng(seed).normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return T.finite_diff_check(f, x, **kw)


W = np.random.default_rng(7).normal(size=(3, 4, 5))

UNARY = {
    "exp": lambda x: (T.exp(x) * W).sum(),
    "tanh": lambda x: (T.tanh(x) * W).sum(),
    "sigmoid": lambda x: (T.sigmoid(x) * W).sum(),
    "silu": lambda x: (T.silu(x) * W).sum(),
    "softplus": lambda x: (T.softplus(x) * W).sum(),
    "gelu": lambda x: (T.gelu(x) * W).sum(),
    "softmax": lambda x: (T.softmax(x, axis=-1) * W).sum(),
    "softmax_axis1": lambda x: (T.softmax(x, axis=1) * W).sum(),
    "log_softmax": lambda x: (T.log_softmax(x) * W).sum(),
    "l2_normalize": lambda x: (T.l2_normalize(x) * W).sum(),
    "mean": lambda x: (x.mean(axis=1, keepdims=True) * W).sum(),
    "reshape_transpose": lambda x: (x.reshape(3, 20).transpose().reshape(5, 4, 3) * W.transpose(2, 1, 0)).sum(),
    "getitem": lambda x: (x[:, 1:3] * W[:, :2]).sum() + (x[0, 0] * 2.0).sum(),
    "split_concat": lambda x: (T.concat(T.split(x, [2, 3], axis=-1)[::-1], axis=-1) * W).sum(),
    "square_div": lambda x: ((x * x) / (1.0 + x * x) * W).sum(),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(5))
def test_unary_gradients(name, seed):
    assert _fd(UNARY[name], (3, 4, 5), seed) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_log_gradient(seed):
    assert _fd(lambda x: (T.log(x) * W).sum(), (3, 4, 5), seed, positive=True) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_binary_broadcast_gradients(seed):
    rng = np.random.default_rng(seed)
    b = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    f = lambda x: ((x + b) * (x - b) / (2.0 + b * b) * W).sum()
    assert _fd(f, (3, 4, 5), seed) < 1e-4
    # gradient w.r.t. the broadcast operand
    x0 = Tensor(rng.normal(size=(3, 4, 5)))
    assert T.param_grad_check(lambda: ((x0 + b) * (x0 - b) / (2.0 + b * b) * W).sum(), [b]) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_matmul_and_layernorm_gradients(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    g = Tensor(rng.normal(size=5), requires_grad=True)
    bt = Tensor(rng.normal(size=5), requires_grad=True)
    w2 = rng.normal(size=(3, 4, 6))
    f = lambda x: (T.layer_norm(x, g, bt) @ w * w2).sum()
    assert _fd(f, (3, 4, 5), seed) < 1e-4
    x0 = Tensor(rng.normal(size=(3, 4, 5)))
    assert T.param_grad_check(lambda: (T.layer_norm(x0, g, bt) @ w * w2).sum(), [w, g, bt]) < 1e-4


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("causal", [True, False])
def test_conv1d_gradients(seed, causal):
    rng = np.random.default_rng(seed)
    k = Tensor(rng.normal(size=(4 if causal else 3, 5)), requires_grad=True)
    w = rng.normal(size=(2, 7, 5))
    assert _fd(lambda x: (T.conv1d(x, k, causal) * w).sum(), (2, 7, 5), seed) < 1e-4
    x0 = Tensor(rng.normal(size=(2, 7, 5)))
    assert T.param_grad_check(lambda: (T.conv1d(x0, k, causal) * w).sum(), [k]) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    k = Tensor(rng.normal(size=(3, 3, 2)), requires_grad=True)
    w = rng.normal(size=(2, 4, 5, 2))
    assert _fd(lambda x: (T.conv2d_depthwise(x, k) * w).sum(), (2, 4, 5, 2), seed) < 1e-4
    x0 = Tensor(rng.normal(size=(2, 4, 5, 2)))
    assert T.param_grad_check(lambda: (T.conv2d_depthwise(x0, k) * w).sum(), [k]) < 1e-4


def test_causal_conv_ignores_future():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(9, 3))
    k = rng.normal(size=(4, 3))
    y = T.conv1d(x, k, causal=True).data
    x2 = x.copy()
    x2[6:] += 5.0
    assert np.array_equal(T.conv1d(x2, k, causal=True).data[:6], y[:6])
    # direct oracle
    ref = np.array([sum(k[j] * x[t - 3 + j] for j in range(4) if t - 3 + j >= 0) for t in range(9)])
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv2d_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 5, 2))
    k = rng.normal(size=(3, 3, 2))
    ref = np.zeros_like(x)
    for i in range(4):
        for j in range(5):
            for a in range(3):
                for b in range(3):
                    ii, jj = i + a - 1, j + b - 1
                    if 0 <= ii < 4 and 0 <= jj < 5:
                        ref[i, j] += x[ii, jj] * k[a, b]
    np.testing.assert_allclose(T.conv2d_depthwise(x, k).data, ref, atol=1e-12)


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    T.backward((x * x + x).sum())
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_clears_tape_and_rejects_nonscalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    with pytest.raises(ContractError):
        T.backward(y)
    T.get_tape().clear()
    T.backward((x * 2.0).sum())
    assert len(T.get_tape().nodes) == 0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad and len(T.get_tape().nodes) == 0


def test_nonfinite_is_rejected():
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NonFiniteError):
        T.exp(Tensor(np.array([1000.0])))


def test_shape_errors():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_sigmoid_and_softplus_are_stable():
    x = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    s = T.sigmoid(x).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[-1] == 1.0
    np.testing.assert_allclose(T.softplus(x).data[-1], 800.0)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(size=(4, 6)) * 50
    np.testing.assert_allclose(T.softmax(x).data.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(T.log_softmax(x).data).sum(-1), 1.0, atol=1e-12)
