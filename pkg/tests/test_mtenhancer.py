import numpy as np
import pytest

from mfuser import tensor as T
from mfuser.layers import Attention
from mfuser.mtenhancer import (ENHANCER_MODES, ClassQuerySet, MambaBlock, MTEnhancer, VisualProjector,
                               conditional_mamba, enhance)
from mfuser.tensor import ConfigError, DimensionError, Tensor

from conftest import randomize


def _ln(x, m):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * m.gamma.data + m.beta.data


def _lin(x, m):
    y = x @ m.weight.data
    return y if m.bias is None else y + m.bias.data


def _silu(x):
    return x / (1 + np.exp(-x))


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def _attn(xq, xkv, m: Attention):
    h = m.heads
    q, k, v = _lin(xq, m.q), _lin(xkv, m.k), _lin(xkv, m.v)
    dh = q.shape[-1] // h
    out = np.zeros_like(q)
    for hi in range(h):
        sl = slice(hi * dh, (hi + 1) * dh)
        for i in range(len(xq)):
            s = np.array([q[i, sl] @ k[j, sl] for j in range(len(xkv))]) / np.sqrt(dh)
            p = np.exp(s - s.max())
            p /= p.sum()
            out[i, sl] = sum(p[j] * v[j, sl] for j in range(len(xkv)))
    return _lin(out, m.o)


def _mamba(s, mb: MambaBlock):
    xz = _lin(_ln(s, mb.norm), mb.in_proj)
    d = mb.d_inner
    x, z = xz[:, :d], xz[:, d:]
    k = mb.conv.shape[0]
    c = np.zeros_like(x)
    for t in range(len(x)):
        for j in range(k):
            if t - (k - 1) + j >= 0:
                c[t] += mb.conv.data[j] * x[t - (k - 1) + j]
    x = _silu(c + mb.conv_b.data)
    p = mb.ssm
    n = p.d_state
    A = -np.exp(p.A_log.data)
    h = np.zeros((d, n))
    y = np.zeros_like(x)
    for t in range(len(x)):
        zz = x[t] @ p.proj_w.data + p.proj_b.data
        B_t, C_t, raw = zz[:n], zz[n:2 * n], zz[2 * n:]
        dt = np.log1p(np.exp(raw + p.dt_bias.data))
        h = np.exp(dt[:, None] * A) * h + (dt * x[t])[:, None] * B_t
        y[t] = h @ C_t + p.D_skip.data * x[t]
    return _lin(y * _silu(z), mb.out_proj)


def straight_line_enhance(q, xv, enh: MTEnhancer, mode):
    if mode == "no_enhance":
        return q
    C = len(q)
    for st in enh.stages:
        q = q + _attn(_ln(q, st.attn_norm), _ln(q, st.attn_norm), st.attn)
        if mode == "full":
            out = _mamba(np.concatenate([q, xv, q]), st.mamba)
            q = q + out[:C] + out[-C:]
        elif mode == "cross_attention":
            q = q + _attn(_ln(q, st.xattn_norm_q), _ln(xv, st.xattn_norm_v), st.xattn)
        q = q + _lin(_gelu(_lin(_ln(q, st.mlp_norm), st.mlp.fc1)), st.mlp.fc2)
    return q


def _enhancer(rng, d=8, heads=2, repeats=1):
    enh = MTEnhancer(d, rng, heads=heads, d_state=3, repeats=repeats, scan_block=4)
    randomize(enh, rng)
    return enh


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("mode", ENHANCER_MODES)
def test_matches_straight_line_oracle(seed, mode):
    rng = np.random.default_rng(seed)
    enh = _enhancer(rng, repeats=2)
    q, xv = rng.normal(size=(4, 8)), rng.normal(size=(6, 8))
    out = enhance(Tensor(q), Tensor(xv), enh, mode).data
    assert np.abs(out - straight_line_enhance(q, xv, enh, mode)).max() < 1e-10


def test_identity_at_init():
    rng = np.random.default_rng(0)
    enh = MTEnhancer(8, rng, heads=2, d_state=3)
    q = rng.normal(size=(4, 8))
    for mode in ENHANCER_MODES:
        assert np.array_equal(enhance(Tensor(q), Tensor(rng.normal(size=(6, 8))), enh, mode).data, q)


@pytest.mark.parametrize("seed", range(5))
def test_prefix_copy_is_causal_and_suffix_sees_visual(seed):
    rng = np.random.default_rng(seed)
    enh = _enhancer(rng)
    st = enh.stages[0]
    C, Tv = 4, 6
    q, xv = Tensor(rng.normal(size=(C, 8))), rng.normal(size=(Tv, 8))
    _, out = conditional_mamba(q, Tensor(xv), st, return_internal=True)
    _, out2 = conditional_mamba(q, Tensor(xv + rng.normal(size=xv.shape)), st, return_internal=True)
    assert np.array_equal(out.data[:C], out2.data[:C])
    assert np.abs(out.data[-C:] - out2.data[-C:]).max() > 1e-6


def test_batched_queries_broadcast():
    rng = np.random.default_rng(1)
    enh = _enhancer(rng)
    q, xv = rng.normal(size=(4, 8)), rng.normal(size=(3, 6, 8))
    out = enhance(Tensor(q), Tensor(xv), enh, "full").data
    assert out.shape == (3, 4, 8)
    for b in range(3):
        np.testing.assert_allclose(out[b], enhance(Tensor(q), Tensor(xv[b]), enh, "full").data, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("mode", ["full", "cross_attention", "no_hybrid"])
def test_gradients(seed, mode):
    rng = np.random.default_rng(seed)
    enh = _enhancer(rng)
    xv = Tensor(rng.normal(size=(6, 8)))
    w = rng.normal(size=(4, 8))
    f = lambda q: (enhance(q, xv, enh, mode) * w).sum()
    assert T.finite_diff_check(f, rng.normal(size=(4, 8))) < 1e-4
    q0 = Tensor(rng.normal(size=(4, 8)))
    assert T.param_grad_check(lambda: f(q0), enh.used_parameters(mode), n_coords=2, seed=seed) < 1e-4


def test_used_parameters_by_mode():
    enh = MTEnhancer(8, np.random.default_rng(0), heads=2)
    sizes = {m: sum(p.size for p in enh.used_parameters(m)) for m in ENHANCER_MODES}
    assert sizes["no_enhance"] == 0
    assert sizes["no_hybrid"] < sizes["cross_attention"] and sizes["no_hybrid"] < sizes["full"]


def test_projector_pools_to_tv():
    rng = np.random.default_rng(2)
    proj = VisualProjector((6, 5), 8, rng, t_v=4)
    a, b = rng.normal(size=(2, 4, 6)), rng.normal(size=(2, 4, 5))
    xv = proj([Tensor(a), Tensor(b)]).data
    cat = np.concatenate([_lin(a, proj.projs[0]), _lin(b, proj.projs[1])], axis=1)
    np.testing.assert_allclose(xv, cat.reshape(2, 4, 2, 8).mean(axis=2), atol=1e-12)


def test_errors():
    rng = np.random.default_rng(3)
    enh = MTEnhancer(8, rng, heads=2)
    with pytest.raises(ConfigError):
        enhance(Tensor(np.zeros((4, 8))), Tensor(np.zeros((6, 8))), enh, "bogus")
    with pytest.raises(DimensionError):
        conditional_mamba(Tensor(np.zeros((4, 8))), Tensor(np.zeros((6, 7))), enh.stages[0])
    with pytest.raises(DimensionError):
        ClassQuerySet(Tensor(np.zeros((3, 8))), ("a", "b"))
    with pytest.raises(ConfigError):
        MTEnhancer(8, rng, repeats=0)
