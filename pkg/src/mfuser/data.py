"""Synthetic domain-shift segmentation task.

Geometry (disks, squares, stripes on a background) is drawn from a stream that
depends only on ``(seed, index)``; rendering style comes from a separate
stream keyed by the domain name. The same seed therefore yields identical
label maps in every domain while colors, textures, illumination and noise
change.
"""

from __future__ import annotations

import colorsys
import zlib
from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("background", "disk", "square", "stripe")
IGNORE_INDEX = 255


@dataclass
class SegBatch:
    images: np.ndarray          # (B, H, W, 3) in [0, 1]
    labels: np.ndarray          # (B, H, W) int64
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.images.shape[:3] != self.labels.shape:
            raise ValueError(f"labels {self.labels.shape} do not match images {self.images.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def check_classes(self, n_classes: int) -> None:
        valid = self.labels[self.labels != self.ignore_index]
        if valid.size and (valid.min() < 0 or valid.max() >= n_classes):
            raise ValueError(f"label outside 0..{n_classes - 1}")


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Rendering style of one domain.

    ``hues`` gives the hue center for disk, square and stripe; ``None`` draws
    object hues uniformly. ``hue_spread`` is the jitter around each center.
    """

    name: str
    hues: tuple[float, float, float] | None = (0.0, 0.33, 0.62)
    hue_spread: float = 0.05
    background: str = "gradient"         # gradient | noise | checker | waves
    illumination: float = 1.0
    noise: float = 0.02
    saturation: tuple[float, float] = (0.6, 0.9)
    value: tuple[float, float] = (0.6, 0.95)


SOURCE = SyntheticDomainSpec("source")
SHIFTED = (
    SyntheticDomainSpec("palette", hues=(0.33, 0.62, 0.0), background="noise", noise=0.04),
    SyntheticDomainSpec("lowlight", hues=None, background="gradient", illumination=0.55, noise=0.07),
    SyntheticDomainSpec("texture", hues=None, background="checker", saturation=(0.3, 0.7),
                        value=(0.5, 1.0), noise=0.03),
)
CANONICAL = SyntheticDomainSpec("canonical", hues=None, background="gradient", noise=0.0)
DOMAINS = {d.name: d for d in (SOURCE, CANONICAL) + SHIFTED}


def get_domain(name: str) -> SyntheticDomainSpec:
    try:
        return DOMAINS[name]
    except KeyError:
        raise ValueError(f"unknown domain {name!r}; known: {sorted(DOMAINS)}") from None


def draw_geometry(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Label map with 2-4 objects painted in random order."""
    labels = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    n_obj = int(rng.integers(2, 5))
    kinds = rng.integers(1, 4, size=n_obj)
    for kind in kinds:
        if kind == 1:
            r = rng.uniform(0.11, 0.18) * size
            cy, cx = rng.uniform(r, size - r, size=2)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == 2:
            s = int(rng.uniform(0.22, 0.34) * size)
            y0, x0 = rng.integers(0, size - s, size=2)
            mask = (yy >= y0) & (yy < y0 + s) & (xx >= x0) & (xx < x0 + s)
        else:
            w = int(rng.uniform(0.08, 0.12) * size)
            p = int(rng.integers(0, size - w))
            mask = (yy >= p) & (yy < p + w) if rng.random() < 0.5 else (xx >= p) & (xx < p + w)
        labels[mask] = kind
    return labels


def _background(rng, spec: SyntheticDomainSpec, size: int) -> np.ndarray:
    base = np.array(colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.05, 0.3), rng.uniform(0.3, 0.7)))
    yy, xx = np.mgrid[0:size, 0:size] / size
    if spec.background == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        field_ = (np.cos(theta) * xx + np.sin(theta) * yy) * 0.3
    elif spec.background == "noise":
        coarse = rng.normal(0, 0.15, size=(size // 8, size // 8))
        field_ = np.kron(coarse, np.ones((8, 8)))
    elif spec.background == "checker":
        cell = int(rng.integers(4, 9))
        field_ = (((yy * size) // cell + (xx * size) // cell) % 2) * 0.3 - 0.15
    else:
        f = rng.uniform(2, 6)
        field_ = 0.15 * np.sin(2 * np.pi * f * (xx + yy))
    return np.clip(base[None, None, :] + field_[..., None], 0, 1)


def render(labels: np.ndarray, spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    size = labels.shape[0]
    img = _background(rng, spec, size)
    for kind in (1, 2, 3):
        mask = labels == kind
        if not mask.any():
            continue
        hue = rng.random() if spec.hues is None else (spec.hues[kind - 1] + rng.normal(0, spec.hue_spread)) % 1.0
        rgb = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(*spec.saturation), rng.uniform(*spec.value)))
        img[mask] = rgb
    img = img * spec.illumination + rng.normal(0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _domain_key(name: str) -> int:
    return zlib.crc32(name.encode())


def make_image(spec: SyntheticDomainSpec, seed: int, index: int, size: int = 64):
    labels = draw_geometry(np.random.default_rng([seed, index, 0]), size)
    image = render(labels, spec, np.random.default_rng([seed, index, 1, _domain_key(spec.name)]))
    return image, labels


def generate_dataset(spec: SyntheticDomainSpec, n: int, seed: int, batch_size: int = 1,
                     size: int = 64) -> list[SegBatch]:
    """``n`` images of ``spec`` grouped into batches; deterministic in ``(spec, seed)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pairs = [make_image(spec, seed, i, size) for i in range(n)]
    out = []
    for s in range(0, n, batch_size):
        chunk = pairs[s:s + batch_size]
        out.append(SegBatch(np.stack([p[0] for p in chunk]), np.stack([p[1] for p in chunk])))
    return out


def collate(batches: list[SegBatch]) -> SegBatch:
    return SegBatch(np.concatenate([b.images for b in batches]), np.concatenate([b.labels for b in batches]))


def augment(batch: SegBatch, rng: np.random.Generator, jitter: float = 0.1) -> SegBatch:
    """Random horizontal flip and brightness/contrast jitter, per image."""
    images = batch.images.copy()
    labels = batch.labels.copy()
    for i in range(len(batch)):
        if rng.random() < 0.5:
            images[i] = images[i, :, ::-1]
            labels[i] = labels[i, :, ::-1]
        bright = rng.uniform(-jitter, jitter)
        contrast = rng.uniform(1 - jitter, 1 + jitter)
        mean = images[i].mean()
        images[i] = np.clip((images[i] - mean) * contrast + mean + bright, 0, 1)
    return SegBatch(images, labels, batch.ignore_index)


@dataclass
class ClassHistogram:
    counts: np.ndarray = field(default_factory=lambda: np.zeros(len(CLASS_NAMES), dtype=np.int64))

    def update(self, labels: np.ndarray) -> None:
        valid = labels[labels != IGNORE_INDEX]
        self.counts += np.bincount(valid.ravel(), minlength=len(self.counts))[: len(self.counts)]
