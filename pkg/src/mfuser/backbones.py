"""Frozen toy stand-ins for the two visual encoders and the text encoder.

Both visual encoders are pre-norm transformers with seeded Gaussian weights.
The "VFM" embeds raw full-resolution RGB patches (fine but style-sensitive);
the "VLM" embeds contrast-normalized luminance and edge strength at half
resolution (coarse but more style-robust). Parameters never change after
construction; :func:`frozen_hash` fingerprints them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import MLP, Attention, LayerNorm, Linear, Module
from .mvfuser import TokenSequence, adapted_layers
from .tensor import ConfigError, DimensionError, Tensor

__all__ = [
    "EncoderBlock",
    "FrozenEncoder",
    "ToyTextEncoder",
    "VocabularyError",
    "sinusoidal_positions",
    "tokenize",
    "layer_alignment",
    "forward_with_adapters",
    "encode_classes",
    "frozen_hash",
    "pyramid_layers",
]


class VocabularyError(KeyError):
    """A class name is not in the text encoder's vocabulary."""


def sinusoidal_positions(h: int, w: int, d: int) -> np.ndarray:
    """Fixed 2-D sin/cos embedding: half the channels for rows, half for columns."""
    if d % 4:
        raise ConfigError(f"positional width {d} must be divisible by 4")
    quarter = d // 4
    freq = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.mgrid[0:h, 0:w]
    ay = ys.ravel()[:, None] * freq
    ax = xs.ravel()[:, None] * freq
    return np.concatenate([np.sin(ay), np.cos(ay), np.sin(ax), np.cos(ax)], axis=1)


class EncoderBlock(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, branch_scale: float):
        self.norm1 = LayerNorm(d, trainable=False)
        self.attn = Attention(d, heads, rng, out_scale=branch_scale / np.sqrt(d), trainable=False)
        self.norm2 = LayerNorm(d, trainable=False)
        self.mlp = MLP(d, 4 * d, rng, out_scale=branch_scale / np.sqrt(4 * d), trainable=False)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _luma(images: np.ndarray) -> np.ndarray:
    return images @ np.array([0.299, 0.587, 0.114])


def _vlm_features(images: np.ndarray) -> np.ndarray:
    """Per-image standardized luminance and edge magnitude, 2x2 average-pooled."""
    y = _luma(images)
    y = (y - y.mean(axis=(1, 2), keepdims=True)) / (y.std(axis=(1, 2), keepdims=True) + 1e-3)
    gy = np.zeros_like(y)
    gx = np.zeros_like(y)
    gy[:, 1:-1] = 0.5 * (y[:, 2:] - y[:, :-2])
    gx[:, :, 1:-1] = 0.5 * (y[:, :, 2:] - y[:, :, :-2])
    edge = np.sqrt(gx * gx + gy * gy)
    edge = edge / (edge.mean(axis=(1, 2), keepdims=True) + 1e-3)
    feats = np.stack([y, edge], axis=-1)
    B, H, W, c = feats.shape
    return feats.reshape(B, H // 2, 2, W // 2, 2, c).mean(axis=(2, 4))


class FrozenEncoder(Module):
    """Patch tokenizer plus ``depth`` frozen pre-norm transformer blocks."""

    def __init__(self, tag: str, width: int, depth: int, patch_size: int = 8, heads: int = 4,
                 seed: int = 0, image_size: int = 64):
        if tag not in ("VFM", "VLM"):
            raise ConfigError(f"encoder tag must be VFM or VLM, got {tag!r}")
        if patch_size % 2:
            raise ConfigError("patch size must be even")
        self.tag, self.width, self.depth = tag, width, depth
        self.patch_size, self.heads, self.seed = patch_size, heads, seed
        rng = np.random.default_rng([seed, 17 if tag == "VFM" else 29])
        if tag == "VFM":
            self.patch_dim = patch_size * patch_size * 3
        else:
            self.patch_dim = (patch_size // 2) ** 2 * 2
        self.embed = Linear(self.patch_dim, width, rng, trainable=False)
        scale = 1.0 / np.sqrt(depth)
        self.blocks = [EncoderBlock(width, heads, rng, branch_scale=scale) for _ in range(depth)]
        self.pos_scale = 0.5

    def grid_for(self, H: int, W: int) -> tuple[int, int]:
        ps = self.patch_size
        if H % ps or W % ps:
            raise DimensionError(f"image {H}x{W} not divisible by patch size {ps}")
        return H // ps, W // ps

    def patches(self, images: np.ndarray) -> np.ndarray:
        B, H, W, _ = images.shape
        gh, gw = self.grid_for(H, W)
        if self.tag == "VFM":
            src, ps = images - 0.5, self.patch_size
        else:
            src, ps = _vlm_features(images), self.patch_size // 2
        c = src.shape[-1]
        p = src.reshape(B, gh, ps, gw, ps, c).transpose(0, 1, 3, 2, 4, 5)
        return p.reshape(B, gh * gw, ps * ps * c)


def tokenize(images, enc: FrozenEncoder) -> TokenSequence:
    """Embed non-overlapping patches and add fixed sinusoidal positions.

    Accepts ``(H, W, 3)`` or ``(B, H, W, 3)``; the token tensor keeps the batch axis
    only when the input had one.
    """
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    gh, gw = enc.grid_for(images.shape[1], images.shape[2])
    pos = sinusoidal_positions(gh, gw, enc.width) * enc.pos_scale
    tokens = enc.embed(Tensor(enc.patches(images))) + pos
    if single:
        tokens = tokens[0]
    return TokenSequence(tokens, (gh, gw), enc.tag)


def layer_alignment(depth_vfm: int, depth_vlm: int, every_n: int) -> list[tuple[int, int]]:
    """Adapted (VFM layer, VLM layer) pairs, 0-based.

    Adapters sit after every ``every_n``-th VFM block; the partner VLM block is
    the one at the proportionally matched depth, ``floor((i+1) * N_vlm / N_vfm) - 1``.
    """
    pairs = []
    for i in adapted_layers(depth_vfm, every_n):
        j = max(0, (i + 1) * depth_vlm // depth_vfm - 1)
        pairs.append((i, j))
    return pairs


def pyramid_layers(depth: int) -> list[int]:
    """0-based indices of the layers at depths N/4, N/2, 3N/4 and N."""
    return sorted({max(1, (depth * k) // 4) - 1 for k in (1, 2, 3, 4)})


@dataclass
class AdaptedFeatures:
    vfm: TokenSequence | None
    vlm: TokenSequence | None
    pyramid_vfm: list[Tensor]
    pyramid_vlm: list[Tensor]


def forward_with_adapters(images, vfm: FrozenEncoder | None, vlm: FrozenEncoder | None,
                          adapters=(), every_n: int = 1) -> AdaptedFeatures:
    """Run both encoders in lockstep, applying residual adapter offsets.

    ``adapters`` holds one callable per adapted layer pair; each maps
    ``(TokenSequence | None, TokenSequence | None)`` to offsets for both streams
    (``None`` for an absent stream). Pass an empty sequence for no adaptation.
    Either encoder may be ``None`` for single-stream operation.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    xa = tokenize(images, vfm) if vfm is not None else None
    xb = tokenize(images, vlm) if vlm is not None else None
    if xa is not None and xb is not None and xa.grid != xb.grid:
        raise DimensionError(f"encoders tokenize to different grids {xa.grid} and {xb.grid}")
    if vfm is not None and vlm is not None:
        pairs = layer_alignment(vfm.depth, vlm.depth, every_n) if adapters else []
    else:
        enc = vfm if vfm is not None else vlm
        layers = adapted_layers(enc.depth, every_n) if adapters else []
        pairs = [(i, None) if vfm is not None else (None, i) for i in layers]
    if adapters and len(adapters) != len(pairs):
        raise ConfigError(f"{len(adapters)} adapters for {len(pairs)} adapted layers (stride {every_n})")

    pyr_a: list[Tensor] = []
    pyr_b: list[Tensor] = []
    keep_a = set(pyramid_layers(vfm.depth)) if vfm is not None else set()
    keep_b = set(pyramid_layers(vlm.depth)) if vlm is not None else set()
    ia = ib = 0  # next block index to run in each stream

    def advance_a(upto):
        nonlocal xa, ia
        while ia <= upto:
            xa = xa.with_tokens(vfm.blocks[ia](xa.tokens))
            if ia in keep_a and ia not in adapted_a:
                pyr_a.append(xa.tokens)
            ia += 1

    def advance_b(upto):
        nonlocal xb, ib
        while ib <= upto:
            xb = xb.with_tokens(vlm.blocks[ib](xb.tokens))
            if ib in keep_b and ib not in adapted_b:
                pyr_b.append(xb.tokens)
            ib += 1

    adapted_a = {i for i, _ in pairs if i is not None}
    adapted_b = {j for _, j in pairs if j is not None}
    for adapter, (i, j) in zip(adapters, pairs):
        if i is not None:
            advance_a(i)
        if j is not None:
            advance_b(j)
        da, db = adapter(xa, xb)
        if i is not None:
            xa = xa.with_tokens(xa.tokens + da)
            if i in keep_a:
                pyr_a.append(xa.tokens)
        if j is not None:
            xb = xb.with_tokens(xb.tokens + db)
            if j in keep_b:
                pyr_b.append(xb.tokens)
    if vfm is not None:
        advance_a(vfm.depth - 1)
    if vlm is not None:
        advance_b(vlm.depth - 1)
    return AdaptedFeatures(xa, xb, pyr_a, pyr_b)


class ToyTextEncoder(Module):
    """Frozen word table and one frozen residual block; prompt vectors are trainable.

    Each class name's token sequence is ``[prompts; words]``. The block output is
    mean-pooled over the word rows and mapped through the shared alignment
    projection.
    """

    def __init__(self, vocab: dict[str, np.ndarray], width: int, n_prompts: int = 4, seed: int = 0,
                 align: np.ndarray | None = None):
        rng = np.random.default_rng([seed, 41])
        self.width = width
        self.vocab = {w: Tensor(np.asarray(v, dtype=np.float64)) for w, v in vocab.items()}
        self.block = EncoderBlock(width, 1, rng, branch_scale=0.3)
        if align is None:
            align = np.linalg.qr(rng.normal(size=(width, width)))[0]
        self.align = Tensor(align)
        self.prompts = Tensor(rng.normal(0.0, 0.02, size=(n_prompts, width)), requires_grad=n_prompts > 0)
        self.n_prompts = n_prompts

    def words(self, name: str) -> list[str]:
        return name.replace("-", " ").replace("_", " ").split()

    def embed_name(self, name: str, prompts: Tensor | None = None) -> Tensor:
        prompts = self.prompts if prompts is None else prompts
        n_p = prompts.shape[0]
        toks = self.words(name)
        missing = [w for w in toks if w not in self.vocab]
        if missing or not toks:
            raise VocabularyError(f"unknown words {missing or [name]} in class name {name!r}")
        word_rows = T.concat([self.vocab[w].reshape(1, self.width) for w in toks], axis=0)
        seq = word_rows if n_p == 0 else T.concat([prompts, word_rows], axis=0)
        out = self.block(seq)
        pooled = out[n_p:].mean(axis=0, keepdims=True)
        return pooled @ self.align


def encode_classes(text_enc: ToyTextEncoder, class_names, prompts: Tensor | None = None) -> Tensor:
    """``C x D_t`` class embeddings with unit-norm rows.

    ``prompts`` overrides the encoder's own prompt vectors (prompt tuning keeps
    the trainable copy outside the frozen encoder).
    """
    names = list(class_names)
    if not names:
        raise ValueError("encode_classes needs at least one class name")
    rows = T.concat([text_enc.embed_name(n, prompts) for n in names], axis=0)
    return T.l2_normalize(rows, axis=-1)


def frozen_hash(*modules: Module) -> str:
    """SHA-256 over names, shapes and little-endian bytes of all frozen tensors."""
    h = hashlib.sha256()
    for m_i, m in enumerate(modules):
        for name, t in m.named_tensors(f"{m_i}."):
            if t.requires_grad:
                continue
            h.update(name.encode())
            h.update(np.asarray(t.shape, dtype="<u8").tobytes())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()
