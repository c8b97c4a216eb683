"""Mamba-based co-adapter fusing two frozen token streams.

The VFM and VLM tokens of one layer are normalized, projected to a shared
bottleneck width and concatenated along the token axis (VFM first). A
sequential branch (causal conv -> SiLU -> selective scan) and a spatial branch
(per-stream 3x3 depthwise conv on the patch grid) run in parallel; their
product is projected back to each stream's width as a residual offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, Module
from .ssm import SsmParams, scan_blocked, scan_cost, scan_sequential
from .tensor import ConfigError, DimensionError, Tensor

__all__ = [
    "TokenSequence",
    "FusionError",
    "MvFuserBlock",
    "fuse",
    "seq_branch",
    "spa_branch",
    "apply_layerwise",
    "adapted_layers",
    "param_count",
    "flop_count",
]


class FusionError(ValueError):
    """The two streams cannot be fused (grid mismatch)."""


@dataclass
class TokenSequence:
    tokens: Tensor              # (..., T, D)
    grid: tuple[int, int]
    source: str = "VFM"

    def __post_init__(self):
        h, w = self.grid
        if h * w != self.tokens.shape[-2]:
            raise DimensionError(f"grid {self.grid} does not cover {self.tokens.shape[-2]} tokens")

    @property
    def width(self) -> int:
        return self.tokens.shape[-1]

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.grid, self.source)


class MvFuserBlock(Module):
    """One fusion adapter.

    ``d_vlm=None`` builds a single-stream block (used by the separate-adapter
    ablation); otherwise both streams are fused.
    """

    def __init__(self, d_vfm: int, d_vlm: int | None, d_low: int, rng: np.random.Generator,
                 d_state: int = 16, k_seq: int = 4, k_spa: int = 3, scan_block: int | None = 16):
        if d_low < 1 or k_seq < 1 or k_spa % 2 == 0:
            raise ConfigError(f"bad MVFuser dims d_low={d_low} k_seq={k_seq} k_spa={k_spa}")
        self.widths = (d_vfm,) if d_vlm is None else (d_vfm, d_vlm)
        self.d_low, self.d_state, self.k_seq, self.k_spa = d_low, d_state, k_seq, k_spa
        self.scan_block = scan_block
        self.norms = [LayerNorm(d) for d in self.widths]
        self.proj_down = [Linear(d, d_low, rng) for d in self.widths]
        self.conv_seq = Tensor(rng.normal(0.0, 1.0 / np.sqrt(k_seq), size=(k_seq, d_low)), requires_grad=True)
        self.conv_seq_b = Tensor(np.zeros(d_low), requires_grad=True)
        self.ssm = SsmParams(d_low, d_state, rng)
        self.conv_spa = Tensor(rng.normal(0.0, 1.0 / k_spa, size=(k_spa, k_spa, d_low)), requires_grad=True)
        self.conv_spa_b = Tensor(np.zeros(d_low), requires_grad=True)
        self.proj_up = [Linear(d_low, d, rng, bias=False, zero_init=True) for d in self.widths]

    # exposed for accounting
    @property
    def n_streams(self) -> int:
        return len(self.widths)


def _scan(x, block: MvFuserBlock):
    if block.scan_block is None:
        return scan_sequential(x, block.ssm)
    return scan_blocked(x, block.ssm, block.scan_block)


def seq_branch(x_cat, block: MvFuserBlock) -> Tensor:
    """SSM(SiLU(causal conv(x_cat))) over the concatenated token sequence."""
    c = T.conv1d(x_cat, block.conv_seq, causal=True) + block.conv_seq_b
    return _scan(T.silu(c), block)


def spa_branch(x_cat, grids, block: MvFuserBlock) -> Tensor:
    """Per-stream depthwise 2-D conv on each stream's patch grid, re-concatenated."""
    lengths = []
    for g in grids:
        if len(g) != 2 or g[0] < 1 or g[1] < 1:
            raise DimensionError(f"non-rectangular grid {g}")
        lengths.append(g[0] * g[1])
    x_cat = T._as_tensor(x_cat)
    if sum(lengths) != x_cat.shape[-2]:
        raise DimensionError(f"grids {list(grids)} do not cover {x_cat.shape[-2]} tokens")
    lead = x_cat.shape[:-2]
    d = x_cat.shape[-1]
    outs = []
    for part, (h, w) in zip(T.split(x_cat, lengths, axis=-2), grids):
        plane = part.reshape(*lead, h, w, d)
        conv = T.conv2d_depthwise(plane, block.conv_spa) + block.conv_spa_b
        outs.append(conv.reshape(*lead, h * w, d))
    return outs[0] if len(outs) == 1 else T.concat(outs, axis=-2)


def _down(streams, block):
    return [proj(norm(s.tokens)) for s, norm, proj in zip(streams, block.norms, block.proj_down)]


def fuse(x_vfm: TokenSequence, x_vlm: TokenSequence | None, block: MvFuserBlock):
    """Offsets ``(dx_vfm, dx_vlm)`` for one layer; ``dx_vlm`` is None for single-stream blocks."""
    streams = [x_vfm] if x_vlm is None else [x_vfm, x_vlm]
    if len(streams) != block.n_streams:
        raise ConfigError(f"block expects {block.n_streams} streams, got {len(streams)}")
    if x_vlm is not None and tuple(x_vfm.grid) != tuple(x_vlm.grid):
        raise FusionError(f"cannot fuse grids {x_vfm.grid} (VFM) and {x_vlm.grid} (VLM)")
    for s, d in zip(streams, block.widths):
        if s.width != d:
            raise DimensionError(f"{s.source} width {s.width} vs block width {d}")
    low = _down(streams, block)
    x_cat = low[0] if len(low) == 1 else T.concat(low, axis=-2)
    x_seq = seq_branch(x_cat, block)
    x_spa = spa_branch(x_cat, [s.grid for s in streams], block)
    gated = x_seq * T.silu(x_spa)
    lengths = [s.tokens.shape[-2] for s in streams]
    parts = [gated] if len(streams) == 1 else T.split(gated, lengths, axis=-2)
    deltas = [up(p) for up, p in zip(block.proj_up, parts)]
    return (deltas[0], None) if len(deltas) == 1 else (deltas[0], deltas[1])


def adapted_layers(depth: int, every_n: int) -> list[int]:
    """0-based layer indices after which an adapter runs: every ``every_n``-th block."""
    if every_n < 1:
        raise ConfigError(f"stride must be >= 1, got {every_n}")
    return [i for i in range(depth) if (i + 1) % every_n == 0]


def apply_layerwise(x_vfm: TokenSequence, x_vlm: TokenSequence, vfm_blocks, vlm_blocks,
                    fusers, every_n: int = 1):
    """Run two block stacks in lockstep, fusing after every ``every_n``-th layer.

    ``vfm_blocks``/``vlm_blocks`` are callables on token tensors of equal depth.
    Returns the final refined ``(x_vfm, x_vlm)`` token sequences.
    """
    if len(vfm_blocks) != len(vlm_blocks):
        raise ConfigError("apply_layerwise needs equal-depth stacks")
    layers = adapted_layers(len(vfm_blocks), every_n)
    if len(fusers) != len(layers):
        raise ConfigError(f"{len(fusers)} adapters for {len(layers)} adapted layers (stride {every_n})")
    a, b = x_vfm.tokens, x_vlm.tokens
    slot = {layer: i for i, layer in enumerate(layers)}
    for i, (fa, fb) in enumerate(zip(vfm_blocks, vlm_blocks)):
        a, b = fa(a), fb(b)
        if i in slot:
            da, db = fuse(x_vfm.with_tokens(a), x_vlm.with_tokens(b), fusers[slot[i]])
            a, b = a + da, b + db
    return x_vfm.with_tokens(a), x_vlm.with_tokens(b)


def param_count(block: MvFuserBlock | None = None, *, widths=None, d_low: int | None = None,
                d_state: int = 16, k_seq: int = 4, k_spa: int = 3) -> int:
    """Trainable parameters, from a block or from its defining dims."""
    if block is not None:
        widths, d_low, d_state = block.widths, block.d_low, block.d_state
        k_seq, k_spa = block.k_seq, block.k_spa
    d = d_low
    per_stream = sum(2 * D + D * d + d + d * D for D in widths)   # norm, down (+bias), up
    n_out = 2 * d_state + d
    ssm = d * n_out + n_out + d * d_state + d + d
    return per_stream + (k_seq * d + d) + ssm + (k_spa * k_spa * d + d)


def flop_count(block: MvFuserBlock | None = None, T_len: int = 1, *, widths=None,
               d_low: int | None = None, d_state: int = 16, k_seq: int = 4, k_spa: int = 3) -> int:
    """Forward op count for ``T_len`` tokens per stream (multiply-add = 1)."""
    if block is not None:
        widths, d_low, d_state = block.widths, block.d_low, block.d_state
        k_seq, k_spa = block.k_seq, block.k_spa
    d = d_low
    L = T_len * len(widths)
    # layer norm ~ 8 ops per element, down-proj MACs + bias, up-proj MACs
    streams = sum(T_len * (8 * D + D * d + d + d * D) for D in widths)
    seq = L * (k_seq * d + d + 4 * d) + scan_cost(L, d, d_state)     # conv, bias, SiLU
    spa = L * (k_spa * k_spa * d + d)
    gate = L * (4 * d + d)                                           # SiLU + product
    return streams + seq + spa + gate
