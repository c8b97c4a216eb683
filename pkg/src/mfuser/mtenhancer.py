"""Hybrid attention/Mamba refiner for class text queries.

Per stage, with every residual branch zero-initialized at its output::

    q <- q + Attn(LN q)                                   class self-attention
    [dq; dx_v; dq_copy] = Mamba([q; x_v; q])              conditional Mamba
    q <- q + dq + dq_copy
    q <- q + MLP(LN q)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import MLP, Attention, LayerNorm, Linear, Module
from .ssm import SsmParams, scan_blocked, scan_sequential
from .tensor import ConfigError, DimensionError, Tensor

ENHANCER_MODES = ("full", "no_enhance", "no_hybrid", "cross_attention")


@dataclass
class ClassQuerySet:
    queries: Tensor             # (..., C, D_t)
    class_names: tuple[str, ...]

    def __post_init__(self):
        if self.queries.shape[-2] != len(self.class_names) or not self.class_names:
            raise DimensionError(f"{len(self.class_names)} class names for queries {self.queries.shape}")

    def with_queries(self, q: Tensor) -> "ClassQuerySet":
        return ClassQuerySet(q, self.class_names)


@dataclass
class VisualSummary:
    x_v: Tensor                 # (..., T_v, D_t)


class MambaBlock(Module):
    """Pre-norm Mamba: in-proj to (x, z), causal conv -> SiLU -> scan, gate by SiLU(z), out-proj."""

    def __init__(self, d: int, rng: np.random.Generator, d_state: int = 16, expand: int = 1,
                 k_conv: int = 4, scan_block: int | None = 16):
        d_inner = expand * d
        self.d_inner = d_inner
        self.norm = LayerNorm(d)
        self.in_proj = Linear(d, 2 * d_inner, rng)
        self.conv = Tensor(rng.normal(0.0, 1.0 / np.sqrt(k_conv), size=(k_conv, d_inner)), requires_grad=True)
        self.conv_b = Tensor(np.zeros(d_inner), requires_grad=True)
        self.ssm = SsmParams(d_inner, d_state, rng)
        self.out_proj = Linear(d_inner, d, rng, bias=False, zero_init=True)
        self.scan_block = scan_block

    def __call__(self, s):
        xz = self.in_proj(self.norm(s))
        x, z = T.split(xz, [self.d_inner, self.d_inner], axis=-1)
        x = T.silu(T.conv1d(x, self.conv, causal=True) + self.conv_b)
        if self.scan_block is None:
            y = scan_sequential(x, self.ssm)
        else:
            y = scan_blocked(x, self.ssm, self.scan_block)
        return self.out_proj(y * T.silu(z))


class EnhancerStage(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, d_state: int = 16,
                 expand: int = 1, scan_block: int | None = 16):
        self.attn_norm = LayerNorm(d)
        self.attn = Attention(d, heads, rng, zero_out=True)
        self.mamba = MambaBlock(d, rng, d_state=d_state, expand=expand, scan_block=scan_block)
        self.xattn_norm_q = LayerNorm(d)
        self.xattn_norm_v = LayerNorm(d)
        self.xattn = Attention(d, heads, rng, zero_out=True)
        self.mlp_norm = LayerNorm(d)
        self.mlp = MLP(d, 4 * d, rng, zero_out=True)


class MTEnhancer(Module):
    def __init__(self, d_t: int, rng: np.random.Generator, heads: int = 1, d_state: int = 16,
                 expand: int = 1, repeats: int = 1, scan_block: int | None = 16):
        if repeats < 1:
            raise ConfigError("MTEnhancer needs at least one stage")
        self.d_t = d_t
        self.stages = [EnhancerStage(d_t, heads, rng, d_state, expand, scan_block) for _ in range(repeats)]

    def used_parameters(self, mode: str) -> list[Tensor]:
        """Parameters that the given mode actually touches."""
        if mode == "no_enhance":
            return []
        out = []
        for st in self.stages:
            parts = [st.attn_norm, st.attn, st.mlp_norm, st.mlp]
            if mode == "full":
                parts.append(st.mamba)
            elif mode == "cross_attention":
                parts += [st.xattn_norm_q, st.xattn_norm_v, st.xattn]
            for p in parts:
                out += p.parameters()
        return out


def class_self_attention(q, stage: EnhancerStage) -> Tensor:
    """Inter-class self-attention with residual."""
    return q + stage.attn(stage.attn_norm(q))


def _broadcast_queries(q: Tensor, x_v: Tensor) -> Tensor:
    lead = x_v.shape[:-2]
    if q.shape[:-2] == lead:
        return q
    return T.add(q, np.zeros(lead + q.shape[-2:]))


def conditional_mamba(q, x_v, stage: EnhancerStage, return_internal: bool = False):
    """Run Mamba over ``[q; x_v; q]`` and add the two text-copy deltas to ``q``.

    With ``return_internal`` also returns the raw Mamba output over the whole
    ``2C + T_v`` sequence.
    """
    q, x_v = T._as_tensor(q), T._as_tensor(x_v)
    if q.shape[-1] != x_v.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} vs visual width {x_v.shape[-1]}")
    q = _broadcast_queries(q, x_v)
    C, Tv = q.shape[-2], x_v.shape[-2]
    seq = T.concat([q, x_v, q], axis=-2)
    out = stage.mamba(seq)
    dq, _dxv, dq_copy = T.split(out, [C, Tv, C], axis=-2)
    new_q = q + dq + dq_copy
    return (new_q, out) if return_internal else new_q


def cross_attention(q, x_v, stage: EnhancerStage) -> Tensor:
    q = _broadcast_queries(T._as_tensor(q), T._as_tensor(x_v))
    return q + stage.xattn(stage.xattn_norm_q(q), stage.xattn_norm_v(x_v))


def enhancer_mlp(q, stage: EnhancerStage) -> Tensor:
    return q + stage.mlp(stage.mlp_norm(q))


def enhance(q, x_v, enhancer: MTEnhancer, mode: str = "full") -> Tensor:
    """Refine ``q`` (``C x D_t`` or batched) with visual tokens ``x_v`` under an ablation mode."""
    if mode not in ENHANCER_MODES:
        raise ConfigError(f"unknown enhancer mode {mode!r}; expected one of {ENHANCER_MODES}")
    if mode == "no_enhance":
        return q
    for stage in enhancer.stages:
        q = class_self_attention(q, stage)
        if mode == "full":
            q = conditional_mamba(q, x_v, stage)
        elif mode == "cross_attention":
            q = cross_attention(q, x_v, stage)
        q = enhancer_mlp(q, stage)
    return q


class VisualProjector(Module):
    """Builds ``x_v``: per-stream linear maps to ``D_t``, token-axis concat, average pooling."""

    def __init__(self, widths, d_t: int, rng: np.random.Generator, t_v: int = 64):
        self.projs = [Linear(d, d_t, rng) for d in widths]
        self.t_v = t_v

    def __call__(self, streams) -> Tensor:
        parts = [p(s) for p, s in zip(self.projs, streams)]
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=-2)
        n = x.shape[-2]
        if n <= self.t_v:
            return x
        if n % self.t_v:
            raise ConfigError(f"cannot pool {n} tokens to {self.t_v}")
        w = n // self.t_v
        lead = x.shape[:-2]
        return x.reshape(*lead, self.t_v, w, x.shape[-1]).mean(axis=-2)
