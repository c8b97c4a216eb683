"""Adapter variants that can sit between the two frozen encoders.

Every adapter is called as ``adapter(x_vfm, x_vlm) -> (dx_vfm, dx_vlm)`` on
:class:`TokenSequence` inputs (either may be ``None`` for single-stream use),
shares the same per-stream norm / down-projection / zero-initialized
up-projection, and differs only in the token mixer in between.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Attention, LayerNorm, Linear, Module
from .mvfuser import MvFuserBlock, TokenSequence, fuse
from .mvfuser import flop_count as mvfuser_flops
from .mvfuser import param_count as mvfuser_params
from .tensor import ConfigError, Tensor

ADAPTER_MODES = ("mvfuser", "mvfuser_separate", "self_attn_concat", "self_attn_separate",
                 "conv_adapter", "cross_attn_adapter", "none")


class MvFuserAdapter(Module):
    def __init__(self, widths, d_low, rng, d_state=16, scan_block=16):
        d_vlm = widths[1] if len(widths) > 1 else None
        self.block = MvFuserBlock(widths[0], d_vlm, d_low, rng, d_state=d_state, scan_block=scan_block)
        self.single = len(widths) == 1

    def __call__(self, xa, xb):
        if self.single:
            x = xa if xa is not None else xb
            d, _ = fuse(x, None, self.block)
            return (d, None) if xa is not None else (None, d)
        return fuse(xa, xb, self.block)


class SeparateMvFuser(Module):
    """One single-stream MVFuser per encoder, no cross-stream path."""

    def __init__(self, widths, d_low, rng, d_state=16, scan_block=16):
        self.blocks = [MvFuserBlock(w, None, d_low, rng, d_state=d_state, scan_block=scan_block) for w in widths]

    def __call__(self, xa, xb):
        da, _ = fuse(xa, None, self.blocks[0])
        db, _ = fuse(xb, None, self.blocks[1])
        return da, db


class _Bottleneck(Module):
    def __init__(self, widths, d_low, rng):
        self.norms = [LayerNorm(w) for w in widths]
        self.down = [Linear(w, d_low, rng) for w in widths]
        self.up = [Linear(d_low, w, rng, bias=False, zero_init=True) for w in widths]

    def _low(self, xs):
        return [dn(nm(x.tokens)) for x, nm, dn in zip(xs, self.norms, self.down)]


class SelfAttnConcat(_Bottleneck):
    """Self-attention over the token-axis concatenation of both streams."""

    def __init__(self, widths, d_low, rng, heads=1):
        super().__init__(widths, d_low, rng)
        self.attn = Attention(d_low, heads, rng)

    def __call__(self, xa, xb):
        a, b = self._low([xa, xb])
        n = a.shape[-2]
        mixed = self.attn(T.concat([a, b], axis=-2))
        pa, pb = T.split(mixed, [n, b.shape[-2]], axis=-2)
        return self.up[0](pa), self.up[1](pb)


class SelfAttnSeparate(_Bottleneck):
    """Two attentions: VFM queries over VLM keys/values and vice versa."""

    def __init__(self, widths, d_low, rng, heads=1):
        super().__init__(widths, d_low, rng)
        self.attn_ab = Attention(d_low, heads, rng)
        self.attn_ba = Attention(d_low, heads, rng)

    def __call__(self, xa, xb):
        a, b = self._low([xa, xb])
        return self.up[0](self.attn_ab(a, b)), self.up[1](self.attn_ba(b, a))


class ConvAdapter(_Bottleneck):
    """Spatial-branch-style gated 2-D conv adapter, weights shared by both streams."""

    def __init__(self, widths, d_low, rng, k=3):
        super().__init__(widths, d_low, rng)
        self.conv_a = Tensor(rng.normal(0, 1.0 / k, size=(k, k, d_low)), requires_grad=True)
        self.conv_a_b = Tensor(np.zeros(d_low), requires_grad=True)
        self.conv_b = Tensor(rng.normal(0, 1.0 / k, size=(k, k, d_low)), requires_grad=True)
        self.conv_b_b = Tensor(np.zeros(d_low), requires_grad=True)

    def _mix(self, low, grid):
        lead = low.shape[:-2]
        plane = low.reshape(*lead, grid[0], grid[1], low.shape[-1])
        a = T.silu(T.conv2d_depthwise(plane, self.conv_a) + self.conv_a_b)
        g = T.silu(T.conv2d_depthwise(plane, self.conv_b) + self.conv_b_b)
        return (a * g).reshape(low.shape)

    def __call__(self, xa, xb):
        a, b = self._low([xa, xb])
        return self.up[0](self._mix(a, xa.grid)), self.up[1](self._mix(b, xb.grid))


class CrossAttnAdapter(_Bottleneck):
    """Patch tokens of both streams attend to one shared set of learnable tokens."""

    def __init__(self, widths, d_low, rng, n_tokens=16, heads=1):
        super().__init__(widths, d_low, rng)
        self.tokens = Tensor(rng.normal(0, 0.5, size=(n_tokens, d_low)), requires_grad=True)
        self.attn = Attention(d_low, heads, rng)

    def __call__(self, xa, xb):
        a, b = self._low([xa, xb])
        return self.up[0](self.attn(a, self.tokens)), self.up[1](self.attn(b, self.tokens))


def build_adapter(mode: str, widths, d_low: int, rng: np.random.Generator, d_state: int = 16,
                  scan_block: int | None = 16):
    if mode == "mvfuser":
        return MvFuserAdapter(widths, d_low, rng, d_state, scan_block)
    if len(widths) != 2:
        raise ConfigError(f"adapter {mode!r} needs both streams")
    if mode == "mvfuser_separate":
        return SeparateMvFuser(widths, d_low, rng, d_state, scan_block)
    if mode == "self_attn_concat":
        return SelfAttnConcat(widths, d_low, rng)
    if mode == "self_attn_separate":
        return SelfAttnSeparate(widths, d_low, rng)
    if mode == "conv_adapter":
        return ConvAdapter(widths, d_low, rng)
    if mode == "cross_attn_adapter":
        return CrossAttnAdapter(widths, d_low, rng)
    raise ConfigError(f"unknown adapter mode {mode!r}; expected one of {ADAPTER_MODES}")


# -- analytic accounting ------------------------------------------------

def _bottleneck_params(widths, d):
    return sum(2 * D + D * d + d + d * D for D in widths)


def _bottleneck_flops(widths, d, T_len):
    return sum(T_len * (8 * D + D * d + d + d * D) for D in widths)


def _attn_params(d):
    return 4 * (d * d + d)


def _attn_flops(n_q, n_kv, d):
    proj = n_q * 2 * (d * d + d) + n_kv * 2 * (d * d + d)      # q, o and k, v
    return proj + n_q * n_kv * (2 * d + 3)                      # scores, softmax, weighted sum


def adapter_params(mode: str, widths, d_low: int, d_state: int = 16, n_tokens: int = 16) -> int:
    """Trainable parameter count of one adapter."""
    d = d_low
    if mode == "mvfuser":
        return mvfuser_params(widths=widths, d_low=d, d_state=d_state)
    if mode == "mvfuser_separate":
        return sum(mvfuser_params(widths=(w,), d_low=d, d_state=d_state) for w in widths)
    base = _bottleneck_params(widths, d)
    if mode == "self_attn_concat":
        return base + _attn_params(d)
    if mode == "self_attn_separate":
        return base + 2 * _attn_params(d)
    if mode == "conv_adapter":
        return base + 2 * (9 * d + d)
    if mode == "cross_attn_adapter":
        return base + n_tokens * d + _attn_params(d)
    if mode == "none":
        return 0
    raise ConfigError(f"unknown adapter mode {mode!r}")


def adapter_flops(mode: str, widths, d_low: int, T_len: int, d_state: int = 16, n_tokens: int = 16) -> int:
    """Forward op count of one adapter for ``T_len`` tokens per stream."""
    d = d_low
    if mode == "mvfuser":
        return mvfuser_flops(widths=widths, d_low=d, d_state=d_state, T_len=T_len)
    if mode == "mvfuser_separate":
        return sum(mvfuser_flops(widths=(w,), d_low=d, d_state=d_state, T_len=T_len) for w in widths)
    base = _bottleneck_flops(widths, d, T_len)
    n = len(widths) * T_len
    if mode == "self_attn_concat":
        return base + _attn_flops(n, n, d)
    if mode == "self_attn_separate":
        return base + 2 * _attn_flops(T_len, T_len, d)
    if mode == "conv_adapter":
        return base + n * 2 * (9 * d + d + 4 * d) + n * d
    if mode == "cross_attn_adapter":
        return base + len(widths) * _attn_flops(T_len, n_tokens, d)
    if mode == "none":
        return 0
    raise ConfigError(f"unknown adapter mode {mode!r}")
