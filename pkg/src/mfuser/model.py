"""Assembly of the full segmentation pipeline from an :class:`ExperimentConfig`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .adapters import adapter_params, build_adapter
from .backbones import (FrozenEncoder, ToyTextEncoder, encode_classes, forward_with_adapters,
                        frozen_hash, layer_alignment, pyramid_layers)
from .config import ExperimentConfig
from .data import CANONICAL, CLASS_NAMES, generate_dataset
from .layers import Module
from .mtenhancer import MTEnhancer, VisualProjector, enhance
from .mvfuser import adapted_layers
from .seghead import MaskDecoder, SegPrediction, decode
from .tensor import Tensor

FILLER_WORDS = ("a", "photo", "of", "the", "object", "region", "thing")


def _token_class_centroids(vlm: FrozenEncoder, proj: np.ndarray, n_images: int, seed: int) -> np.ndarray:
    """Mean projected final VLM token per class over patches with a clear majority label."""
    batch = generate_dataset(CANONICAL, n_images, seed, batch_size=n_images)[0]
    with T.no_grad():
        feats = forward_with_adapters(batch.images, None, vlm).vlm.tokens.data @ proj
    ps = vlm.patch_size
    B, H, W = batch.labels.shape
    lab = batch.labels.reshape(B, H // ps, ps, W // ps, ps).transpose(0, 1, 3, 2, 4).reshape(B, -1, ps * ps)
    C = len(CLASS_NAMES)
    counts = np.stack([(lab == c).mean(axis=-1) for c in range(C)], axis=-1)
    major = counts.argmax(axis=-1)
    clear = counts.max(axis=-1) > 0.75
    cent = np.zeros((C, proj.shape[1]))
    for c in range(C):
        sel = feats[clear & (major == c)]
        cent[c] = sel.mean(axis=0) if len(sel) else 0.0
    cent -= cent.mean(axis=0, keepdims=True)
    return cent / (np.linalg.norm(cent, axis=1, keepdims=True) + 1e-12)


class Backbones(Module):
    """The frozen VFM, VLM and text encoder; identical for every run with the same backbone seed."""

    def __init__(self, cfg: ExperimentConfig):
        s = cfg.backbone_seed
        self.vfm = FrozenEncoder("VFM", cfg.vfm_width, cfg.vfm_depth, cfg.patch_size, seed=s)
        self.vlm = FrozenEncoder("VLM", cfg.vlm_width, cfg.vlm_depth, cfg.patch_size, seed=s)
        rng = np.random.default_rng([s, 53])
        d_t = cfg.text_width
        # fixed image-side alignment head shared with the text encoder's output space
        self.image_align = Tensor(rng.normal(0, 1 / np.sqrt(cfg.vlm_width), size=(cfg.vlm_width, d_t)))
        text_align = np.linalg.qr(rng.normal(size=(d_t, d_t)))[0]
        cent = _token_class_centroids(self.vlm, self.image_align.data, 16, seed=s + 7919)
        vocab = {}
        for c, name in enumerate(CLASS_NAMES):
            # word vector whose aligned image is near the class centroid, plus noise
            noisy = cent[c] + 0.5 * rng.normal(0, 1 / np.sqrt(d_t), size=d_t)
            vocab[name] = np.sqrt(d_t) * noisy @ text_align.T / np.linalg.norm(noisy)
        for w in FILLER_WORDS:
            vocab[w] = rng.normal(0, 1, size=d_t)
        self.text = ToyTextEncoder(vocab, d_t, n_prompts=0, seed=s, align=text_align)

    def frozen_hash(self) -> str:
        return frozen_hash(self)


class MFuserModel(Module):
    """Frozen backbones plus the trainable adapters, enhancer, decoder and prompts."""

    def __init__(self, cfg: ExperimentConfig, backbones: Backbones | None = None):
        self.cfg = cfg
        self.backbones = backbones if backbones is not None else Backbones(cfg)
        self.class_names = CLASS_NAMES
        rng = np.random.default_rng([cfg.seed, 101])
        bb = self.backbones
        self.use_vfm = cfg.fusion in ("fused", "concat_frozen", "vfm_only")
        self.use_vlm = cfg.fusion in ("fused", "concat_frozen", "vlm_only")
        widths = []
        if self.use_vfm:
            widths.append(cfg.vfm_width)
        if self.use_vlm:
            widths.append(cfg.vlm_width)
        self.widths = tuple(widths)
        # prompt vectors live on the model so the backbones stay purely frozen
        self.prompts = Tensor(rng.normal(0.0, 0.02, size=(cfg.n_prompts, cfg.text_width)),
                              requires_grad=cfg.n_prompts > 0)
        if cfg.adapter == "none":
            n_adapt = 0
        elif len(widths) == 2:
            n_adapt = len(layer_alignment(cfg.vfm_depth, cfg.vlm_depth, cfg.stride))
        else:
            n_adapt = len(adapted_layers(cfg.vfm_depth if self.use_vfm else cfg.vlm_depth, cfg.stride))
        self.adapters = [build_adapter(cfg.adapter, self.widths, cfg.d_low, rng, cfg.d_state, cfg.scan_block)
                         for _ in range(n_adapt)]
        self.projector = VisualProjector(self.widths, cfg.text_width, rng, cfg.t_v)
        self.enhancer = MTEnhancer(cfg.text_width, rng, heads=cfg.enhancer_heads, d_state=cfg.d_state,
                                   repeats=cfg.enhancer_repeats, scan_block=cfg.scan_block)
        n_levels = len(pyramid_layers(cfg.vfm_depth if self.use_vfm else cfg.vlm_depth))
        self.decoder = MaskDecoder([sum(self.widths)] * n_levels, cfg.text_width, len(CLASS_NAMES), rng,
                                   stages=cfg.decoder_stages, heads=cfg.decoder_heads,
                                   upscale=cfg.patch_size // 4)

    # -- parameters ------------------------------------------------------
    def trainable_parameters(self) -> list[Tensor]:
        """Parameters the configured modes actually use, in a fixed order."""
        out = [self.prompts] if self.prompts.requires_grad else []
        for a in self.adapters:
            out += a.parameters()
        out += self.projector.parameters() if self.cfg.enhancer in ("full", "cross_attention") else []
        out += self.enhancer.used_parameters(self.cfg.enhancer)
        out += self.decoder.parameters()
        return out

    def named_trainable(self) -> list[tuple[str, Tensor]]:
        ids = {id(t) for t in self.trainable_parameters()}
        return [(n, t) for n, t in self.named_tensors() if id(t) in ids]

    def census(self) -> dict[str, int]:
        cfg = self.cfg
        used = {id(t) for t in self.trainable_parameters()}

        def count(mod):
            return sum(t.size for t in mod.parameters() if id(t) in used)

        return {
            "prompts": self.prompts.size if self.prompts.requires_grad else 0,
            "adapters": sum(count(a) for a in self.adapters),
            "enhancer": count(self.projector) + count(self.enhancer),
            "decoder": count(self.decoder),
            "adapters_analytic": len(self.adapters) * adapter_params(cfg.adapter, self.widths, cfg.d_low, cfg.d_state),
        }

    def frozen_hash(self) -> str:
        return self.backbones.frozen_hash()

    # -- forward ---------------------------------------------------------
    def class_queries(self) -> Tensor:
        return encode_classes(self.backbones.text, self.class_names, self.prompts)

    def forward(self, images, adapted: bool = True) -> SegPrediction:
        """Full pipeline; ``adapted=False`` bypasses adapters and the enhancer."""
        cfg = self.cfg
        bb = self.backbones
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        adapters = self.adapters if adapted else []
        feats = forward_with_adapters(images, bb.vfm if self.use_vfm else None,
                                      bb.vlm if self.use_vlm else None, adapters, cfg.stride)
        streams = [s for s in (feats.vfm, feats.vlm) if s is not None]
        pyrs = [p for p, use in ((feats.pyramid_vfm, self.use_vfm), (feats.pyramid_vlm, self.use_vlm)) if use]
        pyramid = [lv[0] if len(lv) == 1 else T.concat(list(lv), axis=-1) for lv in zip(*pyrs)]
        q = self.class_queries()
        mode = cfg.enhancer if adapted else "no_enhance"
        if mode != "no_enhance":
            x_v = self.projector([s.tokens for s in streams])
            q = enhance(q, x_v, self.enhancer, mode)
        return decode(q, pyramid, streams[0].grid, self.decoder)

    __call__ = forward
