"""Ablation grid runner over configuration axes."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .model import Backbones, MFuserModel
from .tensor import ConfigError
from .train import evaluate, train

# each axis is a list of (label, config overrides)
FUSION_ROWS = [
    ("vfm_only", {"fusion": "vfm_only", "adapter": "mvfuser"}),
    ("vlm_only", {"fusion": "vlm_only", "adapter": "mvfuser"}),
    ("frozen_concat", {"fusion": "concat_frozen", "adapter": "none"}),
    ("convolution", {"fusion": "fused", "adapter": "conv_adapter"}),
    ("cross_attention", {"fusion": "fused", "adapter": "cross_attn_adapter"}),
    ("separate_mvfuser", {"fusion": "fused", "adapter": "mvfuser_separate"}),
    ("mvfuser", {"fusion": "fused", "adapter": "mvfuser"}),
]
ENHANCER_ROWS = [(m, {"enhancer": m}) for m in ("no_enhance", "no_hybrid", "cross_attention", "full")]
STRIDE_ROWS = [(f"stride_{n}", {"stride": n}) for n in (1, 2, 4, 8)]
ATTENTION_ROWS = [(m, {"fusion": "fused", "adapter": m}) for m in ("self_attn_concat", "self_attn_separate")]

PRESETS = {"fusion": FUSION_ROWS, "enhancer": ENHANCER_ROWS, "stride": STRIDE_ROWS, "attention": ATTENTION_ROWS}


def parse_axis(spec: str):
    """``fusion`` / ``enhancer`` / ``stride`` / ``attention`` or ``key=v1,v2,...``."""
    if spec in PRESETS:
        return PRESETS[spec]
    if "=" not in spec:
        raise ConfigError(f"unknown axis {spec!r}; use one of {sorted(PRESETS)} or key=v1,v2")
    key, raw = spec.split("=", 1)
    key = key.strip()
    return [(f"{key}={v.strip()}", {key: ExperimentConfig.parse_value(key, v)}) for v in raw.split(",")]


@dataclass
class Cell:
    label: str
    seed: int
    overrides: dict
    config_hash: str = ""
    params: int = 0
    mious: dict = field(default_factory=dict)
    skipped: str = ""

    @property
    def ok(self) -> bool:
        return not self.skipped


def grid_cells(base: ExperimentConfig, axes, seeds=(0,)):
    """Yield ``(label, seed, overrides, config | error)`` for the cartesian product of the axes."""
    for combo in itertools.product(*axes):
        label = "/".join(lbl for lbl, _ in combo)
        overrides = {}
        for _, o in combo:
            overrides.update(o)
        for s in seeds:
            try:
                cfg = base.replace(seed=s, **overrides)
            except ConfigError as e:
                yield label, s, overrides, e
                continue
            yield label, s, overrides, cfg


def trainable_count(cfg: ExperimentConfig, backbones: Backbones | None = None) -> int:
    return sum(t.size for t in MFuserModel(cfg, backbones).trainable_parameters())


def ablation_grid(base: ExperimentConfig, axes, seeds=(0,), out_dir=None, log=None,
                  backbones: Backbones | None = None, dry_run: bool = False) -> list[Cell]:
    """Train and evaluate every valid cell with shared seeds; invalid cells are skipped with a reason.

    ``dry_run`` only builds each model to count parameters.
    """
    out = Path(out_dir) if out_dir is not None else None
    if backbones is None:
        backbones = Backbones(base)
    cells = []
    lines = []

    def emit(msg):
        lines.append(msg)
        if log:
            log(msg)

    for label, seed, overrides, cfg in grid_cells(base, axes, seeds):
        cell = Cell(label, seed, overrides)
        cells.append(cell)
        if isinstance(cfg, Exception):
            cell.skipped = str(cfg)
            emit(f"skip {label} seed {seed}: {cfg}")
            continue
        cell.config_hash = cfg.hash()
        cell.params = trainable_count(cfg, backbones)
        if dry_run:
            emit(f"cell {label} seed {seed} config {cell.config_hash} params {cell.params}")
            continue
        run_dir = out / f"{label.replace('/', '__')}_s{seed}" if out is not None else None
        res = train(cfg, run_dir, backbones)
        cell.mious = evaluate(res.model)
        emit(f"cell {label} seed {seed} config {cell.config_hash} params {cell.params} "
             + " ".join(f"{k} {v:.4f}" for k, v in cell.mious.items()))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(format_report(cells))
        (out / "ablate.log").write_text("\n".join(lines) + "\n")
    return cells


def format_report(cells: list[Cell]) -> str:
    domains = []
    for c in cells:
        domains += [d for d in c.mious if d not in domains]
    head = ["label", "seed", "config_hash", "params"] + domains + ["skipped"]
    rows = [",".join(head)]
    for c in cells:
        vals = [f"{c.mious[d]:.6f}" if d in c.mious else "" for d in domains]
        rows.append(",".join([c.label, str(c.seed), c.config_hash, str(c.params)] + vals
                             + [c.skipped.replace(",", ";")]))
    return "\n".join(rows) + "\n"


def median_by_label(cells: list[Cell], key: str = "avg_shifted") -> dict[str, float]:
    groups: dict[str, list[float]] = {}
    for c in cells:
        if c.ok and key in c.mious:
            groups.setdefault(c.label, []).append(c.mious[key])
    return {k: float(np.median(v)) for k, v in groups.items()}
