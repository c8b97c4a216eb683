"""Class-anchored mask decoder, segmentation/alignment losses and mIoU.

Query ``k`` is permanently assigned to class ``k``; there is no bipartite
matching. Mask losses are computed at decoder resolution against per-cell
class area fractions of the full-resolution labels.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import MLP, Attention, LayerNorm, Linear, Module
from .tensor import ConfigError, ContractError, DimensionError, Tensor

# Cityscapes ordering: road, sidewalk, building, wall, fence, pole, ...
PALETTE = np.array([
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
    (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
    (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
    (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
], dtype=np.uint8)


@dataclass
class LossWeights:
    bce: float = 5.0
    dice: float = 5.0
    cls: float = 2.0
    align_variant: str = "softmax"
    temperature: float = 0.07
    no_object_weight: float = 0.1

    def __post_init__(self):
        for name in ("bce", "dice", "cls", "no_object_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name}={v} must be finite and nonnegative")
        if self.align_variant not in ("softmax", "sigmoid"):
            raise ConfigError(f"align_variant must be softmax or sigmoid, got {self.align_variant!r}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass
class SegPrediction:
    mask_logits: Tensor         # (B, C, H', W')
    class_logits: Tensor        # (B, C, C + 1)
    pixel_embed: Tensor         # (B, H', W', D_t)
    queries: Tensor             # (B, C, D_t) enhanced text queries used for alignment


@dataclass
class LossTerms:
    total: Tensor
    parts: dict[str, float] = field(default_factory=dict)
    all_ignored: bool = False


class DecoderStage(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.cross_norm = LayerNorm(d)
        self.mem_norm = LayerNorm(d)
        self.cross = Attention(d, heads, rng)
        self.self_norm = LayerNorm(d)
        self.self_attn = Attention(d, heads, rng)
        self.mlp_norm = LayerNorm(d)
        self.mlp = MLP(d, 4 * d, rng)


class MaskDecoder(Module):
    """Pixel decoder over the feature pyramid plus a 3-stage query decoder.

    ``level_widths`` lists the channel width of each pyramid level; ``upscale`` is
    the pixel-shuffle factor from the token grid to the mask grid.
    """

    def __init__(self, level_widths, d_t: int, n_classes: int, rng: np.random.Generator,
                 stages: int = 3, heads: int = 4, upscale: int = 2):
        self.d_t, self.n_classes, self.upscale = d_t, n_classes, upscale
        self.level_projs = [Linear(w, d_t, rng) for w in level_widths]
        self.level_norms = [LayerNorm(d_t) for _ in level_widths]
        self.pixel_proj = Linear(d_t, upscale * upscale * d_t, rng)
        self.stages = [DecoderStage(d_t, heads, rng) for _ in range(stages)]
        self.out_norm = LayerNorm(d_t)
        self.mask_embed = Linear(d_t, d_t, rng)
        self.class_head = Linear(d_t, n_classes + 1, rng)


def pixel_shuffle(x: Tensor, grid: tuple[int, int], r: int) -> Tensor:
    """``(B, h*w, r*r*d)`` -> ``(B, h*r, w*r, d)``."""
    B = x.shape[0]
    h, w = grid
    d = x.shape[-1] // (r * r)
    x = x.reshape(B, h, w, r, r, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, h * r, w * r, d)


def mask_head(mask_queries, pixel_embed) -> Tensor:
    """Dot product of every query with every pixel embedding: ``(B,C,D),(B,H,W,D) -> (B,C,H,W)``."""
    mask_queries, pixel_embed = T._as_tensor(mask_queries), T._as_tensor(pixel_embed)
    B, H, W, D = pixel_embed.shape
    flat = pixel_embed.reshape(B, H * W, D)
    return (mask_queries @ flat.swapaxes(-1, -2)).reshape(B, mask_queries.shape[-2], H, W)


def decode(queries, pyramid, grid: tuple[int, int], dec: MaskDecoder) -> SegPrediction:
    """Text queries attend to the pyramid; masks are query/pixel dot products."""
    if not pyramid:
        raise ContractError("decode: empty feature pyramid")
    if len(pyramid) != len(dec.level_projs):
        raise DimensionError(f"decoder expects {len(dec.level_projs)} levels, got {len(pyramid)}")
    levels = [norm(proj(f)) for f, proj, norm in zip(pyramid, dec.level_projs, dec.level_norms)]
    B = levels[0].shape[0]
    q0 = T._as_tensor(queries)
    if q0.ndim == 2:
        q0 = T.add(q0, np.zeros((B,) + q0.shape))
    fused = levels[0]
    for lv in levels[1:]:
        fused = fused + lv
    pixel = pixel_shuffle(dec.pixel_proj(fused), grid, dec.upscale)
    q = q0
    for s, st in enumerate(dec.stages):
        mem = st.mem_norm(levels[s % len(levels)])
        q = q + st.cross(st.cross_norm(q), mem)
        q = q + st.self_attn(st.self_norm(q))
        q = q + st.mlp(st.mlp_norm(q))
    q = dec.out_norm(q)
    masks = mask_head(dec.mask_embed(q), pixel)
    return SegPrediction(masks, dec.class_head(q), pixel, q0)


# -- targets -----------------------------------------------------------

def cell_targets(labels: np.ndarray, n_classes: int, out_hw: tuple[int, int], ignore_index: int):
    """Per-cell class area fractions and valid-pixel fractions.

    Returns ``(frac (B,C,h,w), valid (B,h,w), present (B,C))`` where ``present``
    marks classes with at least one non-ignored pixel in the full-res labels.
    """
    labels = np.asarray(labels)
    B, H, W = labels.shape
    h, w = out_hw
    if H % h or W % w:
        raise DimensionError(f"labels {H}x{W} not divisible into {h}x{w} cells")
    valid = labels != ignore_index
    onehot = np.zeros((B, n_classes, H, W))
    for c in range(n_classes):
        onehot[:, c] = (labels == c) & valid
    fy, fx = H // h, W // w
    frac = onehot.reshape(B, n_classes, h, fy, w, fx).mean(axis=(3, 5))
    vfrac = valid.reshape(B, h, fy, w, fx).mean(axis=(2, 4))
    present = onehot.reshape(B, n_classes, -1).any(axis=-1)
    return frac, vfrac, present


def cell_labels(labels: np.ndarray, n_classes: int, out_hw, ignore_index: int) -> np.ndarray:
    """Majority class per cell; cells without valid pixels become ``ignore_index``."""
    frac, vfrac, _ = cell_targets(labels, n_classes, out_hw, ignore_index)
    out = frac.argmax(axis=1)
    out[vfrac == 0] = ignore_index
    return out


# -- losses ------------------------------------------------------------

def bce_with_logits(logits, target) -> Tensor:
    """Elementwise ``softplus(x) - y*x``."""
    logits = T._as_tensor(logits)
    return T.softplus(logits) - logits * target


def dice_loss(prob, target, weight, smooth: float = 1.0) -> Tensor:
    """``1 - (2 sum(p*y) + s) / (sum p + sum y + s)`` over the last axis, per mask."""
    prob = T._as_tensor(prob)
    p = prob * weight
    y = np.asarray(target) * weight
    inter = (p * y).sum(axis=-1)
    denom = p.sum(axis=-1) + y.sum(axis=-1)
    return 1.0 - (inter * 2.0 + smooth) / (denom + smooth)


def loss_seg(pred: SegPrediction, labels: np.ndarray, w: LossWeights, ignore_index: int = 255) -> LossTerms:
    """Weighted BCE + dice over present classes and no-object-aware class CE."""
    B, C, h, wd = pred.mask_logits.shape
    frac, vfrac, present = cell_targets(labels, C, (h, wd), ignore_index)
    if not vfrac.any():
        warnings.warn("loss_seg: every pixel is ignored", RuntimeWarning, stacklevel=2)
        zero = T.mul(pred.mask_logits.sum(), 0.0)
        return LossTerms(zero, {"bce": 0.0, "dice": 0.0, "cls": 0.0}, all_ignored=True)
    logits = pred.mask_logits.reshape(B, C, h * wd)
    y = frac.reshape(B, C, h * wd)
    vw = np.broadcast_to(vfrac.reshape(B, 1, h * wd), y.shape)
    sel = present.astype(np.float64)
    n_sel = max(sel.sum(), 1.0)
    # per-mask BCE averaged over valid area, then over present masks
    area = np.maximum(vw.sum(axis=-1), 1e-12)
    bce_mask = (bce_with_logits(logits, y) * vw).sum(axis=-1) / area
    bce = (bce_mask * sel).sum() / n_sel
    dice = (dice_loss(T.sigmoid(logits), y, vw) * sel).sum() / n_sel
    # query k targets class k when present, else no-object (index C)
    target = np.where(present, np.arange(C)[None, :], C)
    logp = T.log_softmax(pred.class_logits, axis=-1)
    onehot = np.zeros(pred.class_logits.shape)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    cw = np.where(present, 1.0, w.no_object_weight)
    cls = -((logp * onehot).sum(axis=-1) * cw).sum() / cw.sum()
    total = bce * w.bce + dice * w.dice + cls * w.cls
    return LossTerms(total, {"bce": bce.item(), "dice": dice.item(), "cls": cls.item()})


def loss_align(pixel_embed, queries, labels: np.ndarray, variant: str = "softmax",
               tau: float = 0.07, ignore_index: int = 255) -> Tensor:
    """Pixel-text alignment over L2-normalized embeddings.

    ``pixel_embed`` is ``(B, H, W, D)``, ``queries`` ``(B, C, D)`` or ``(C, D)`` and
    ``labels`` ``(B, H, W)`` at the same resolution as ``pixel_embed``.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if variant not in ("softmax", "sigmoid"):
        raise ConfigError(f"unknown alignment variant {variant!r}")
    pixel_embed, queries = T._as_tensor(pixel_embed), T._as_tensor(queries)
    B, H, W, D = pixel_embed.shape
    C = queries.shape[-2]
    pe = T.l2_normalize(pixel_embed.reshape(B, H * W, D), axis=-1)
    qn = T.l2_normalize(queries, axis=-1)
    sim = (pe @ qn.swapaxes(-1, -2)) * (1.0 / tau)             # (B, P, C)
    lab = np.asarray(labels).reshape(B, H * W)
    valid = lab != ignore_index
    n_valid = valid.sum()
    if n_valid == 0:
        return T.mul(sim.sum(), 0.0)
    onehot = np.zeros((B, H * W, C))
    idx = np.where(valid, lab, 0)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot *= valid[..., None]
    if variant == "softmax":
        per = -(T.log_softmax(sim, axis=-1) * onehot).sum(axis=-1)
    else:
        per = (bce_with_logits(sim, onehot) * valid[..., None].astype(float)).sum(axis=-1)
    return per.sum() * (1.0 / n_valid)


def loss_total(pred: SegPrediction, labels: np.ndarray, w: LossWeights, ignore_index: int = 255) -> LossTerms:
    """Segmentation loss plus the unweighted alignment term."""
    seg = loss_seg(pred, labels, w, ignore_index)
    h, wd = pred.pixel_embed.shape[1:3]
    lab = cell_labels(labels, pred.mask_logits.shape[1], (h, wd), ignore_index)
    align = loss_align(pred.pixel_embed, pred.queries, lab, w.align_variant, w.temperature, ignore_index)
    parts = dict(seg.parts, seg=seg.total.item(), align=align.item())
    total = seg.total + align
    parts["total"] = total.item()
    return LossTerms(total, parts, seg.all_ignored)


# -- inference and metrics ---------------------------------------------

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` half-pixel-centered linear interpolation weights."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        t = src - lo
        m[i, lo] += 1 - t
        m[i, hi] += t
    return m


def upsample_bilinear(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes of ``x``."""
    my = bilinear_matrix(x.shape[-2], out_hw[0])
    mx = bilinear_matrix(x.shape[-1], out_hw[1])
    return np.einsum("yh,...hw,xw->...yx", my, x, mx)


def semantic_scores(pred: SegPrediction) -> np.ndarray:
    """Class-probability-weighted sigmoid masks, ``(B, C, H', W')``."""
    cls = pred.class_logits.data
    prob = np.exp(cls - cls.max(axis=-1, keepdims=True))
    prob /= prob.sum(axis=-1, keepdims=True)
    masks = T._sigmoid_np(pred.mask_logits.data)
    return np.einsum("bqc,bqhw->bchw", prob[..., :-1], masks)


def predict_labels(pred: SegPrediction, out_hw: tuple[int, int]) -> np.ndarray:
    return upsample_bilinear(semantic_scores(pred), out_hw).argmax(axis=1)


def confusion_matrix(pred_labels, gt_labels, n_classes: int, ignore_index: int = 255) -> np.ndarray:
    pred_labels, gt_labels = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise DimensionError(f"prediction {pred_labels.shape} vs ground truth {gt_labels.shape}")
    keep = gt_labels != ignore_index
    idx = gt_labels[keep].astype(np.int64) * n_classes + pred_labels[keep].astype(np.int64)
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou(pred_labels, gt_labels, n_classes: int, ignore_index: int = 255):
    """Per-class IoU (NaN where the union is empty) and their mean over defined classes."""
    cm = confusion_matrix(pred_labels, gt_labels, n_classes, ignore_index)
    return iou_from_confusion(cm)


def iou_from_confusion(cm: np.ndarray):
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
    defined = ~np.isnan(iou)
    mean = float(iou[defined].mean()) if defined.any() else float("nan")
    return iou, mean


# -- dumps -------------------------------------------------------------

def write_label_grid(path, labels: np.ndarray) -> None:
    """Raw grid: uint32 LE width, uint32 LE height, then row-major class bytes."""
    labels = np.asarray(labels)
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", w, h))
        f.write(labels.astype(np.uint8).tobytes())


def read_label_grid(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h = struct.unpack_from("<II", raw)
    return np.frombuffer(raw, dtype=np.uint8, offset=8).reshape(h, w).copy()


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    # exactly one whitespace byte separates the header from the payload
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1).reshape(h, w, 3).copy()


def colorize(labels: np.ndarray, ignore_index: int = 255) -> np.ndarray:
    labels = np.asarray(labels)
    rgb = PALETTE[np.clip(labels, 0, len(PALETTE) - 1)]
    rgb[labels == ignore_index] = 0
    return rgb
