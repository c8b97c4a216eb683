"""Training loop, learning-rate schedule, optimizer and evaluation."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_into, load_tensors, save_checkpoint
from .config import ExperimentConfig
from .data import CLASS_NAMES, SegBatch, augment, collate, generate_dataset, get_domain
from .model import Backbones, MFuserModel
from .seghead import LossWeights, loss_total, miou, predict_labels
from .tensor import NonFiniteError, Tensor

METRIC_FIELDS = ("iter", "lr", "loss", "bce", "dice", "cls", "align", "source_miou")


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or gradient; carries the iteration and last-good checkpoint."""

    def __init__(self, iteration: int, checkpoint: str | None, reason: str):
        super().__init__(f"training aborted at iteration {iteration}: {reason}"
                         + (f"; last good checkpoint at {checkpoint}" if checkpoint else ""))
        self.iteration = iteration
        self.checkpoint = checkpoint


def lr_at(it: int, cfg: ExperimentConfig) -> float:
    """Linear warm-up from 0 to ``cfg.lr`` at ``warmup``, then linear decay to 0 at ``iters - 1``."""
    if cfg.warmup > 0 and it <= cfg.warmup:
        return cfg.lr * it / cfg.warmup
    span = cfg.iters - 1 - cfg.warmup
    if span <= 0:
        return cfg.lr
    return cfg.lr * max(0.0, (cfg.iters - 1 - it) / span)


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only, not biases or norms."""

    def __init__(self, params: list[Tensor], weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.wd, (self.b1, self.b2), self.eps = weight_decay, betas, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if p.data.ndim >= 2 and self.wd:
                p.data = p.data * (1 - lr * self.wd)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def loss_weights(cfg: ExperimentConfig) -> LossWeights:
    return LossWeights(cfg.bce_weight, cfg.dice_weight, cfg.cls_weight, cfg.align_variant, cfg.temperature)


# -- evaluation ----------------------------------------------------------

def predict(model: MFuserModel, images: np.ndarray, chunk: int = 8) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), chunk):
            pred = model(images[i:i + chunk])
            out.append(predict_labels(pred, images.shape[1:3]))
    return np.concatenate(out)


def evaluate(model: MFuserModel, domains=None, n_images: int | None = None, seed: int | None = None) -> dict:
    """Per-domain mIoU plus ``avg_shifted`` over the configured target domains."""
    cfg = model.cfg
    if domains is None:
        domains = [cfg.source_domain] + cfg.domains
    n = n_images or cfg.eval_images
    seed = cfg.eval_seed if seed is None else seed
    out = {}
    for name in domains:
        data = collate(generate_dataset(get_domain(name), n, seed, size=cfg.image_size))
        pred = predict(model, data.images)
        out[name] = miou(pred, data.labels, len(CLASS_NAMES), data.ignore_index)[1]
    shifted = [out[d] for d in cfg.domains if d in out]
    if shifted:
        out["avg_shifted"] = float(np.mean(shifted))
    return out


# -- training ------------------------------------------------------------

@dataclass
class TrainResult:
    model: MFuserModel
    metrics: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    hash_before: str = ""
    hash_after: str = ""
    seconds: float = 0.0
    out_dir: Path | None = None


def census_lines(model: MFuserModel) -> list[str]:
    c = model.census()
    total = c["prompts"] + c["adapters"] + c["enhancer"] + c["decoder"]
    counted = sum(t.size for t in model.trainable_parameters())
    return [f"census prompts={c['prompts']} adapters={c['adapters']} (analytic {c['adapters_analytic']}) "
            f"enhancer={c['enhancer']} decoder={c['decoder']} total={total} counted={counted}"]


def _snapshot(params):
    return [p.data.copy() for p in params]


def train(cfg: ExperimentConfig, out_dir=None, backbones: Backbones | None = None, log=None,
          max_iters: int | None = None) -> TrainResult:
    """Train the trainable modules of one configuration; the frozen encoders never change.

    With ``out_dir`` the run writes ``config.txt``, ``log.txt``, ``metrics.csv`` and
    ``checkpoint.bin``. ``log`` is an optional callable receiving each log line.
    """
    t_start = time.perf_counter()
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    lines: list[str] = []

    def emit(msg: str):
        lines.append(msg)
        if log is not None:
            log(msg)

    model = MFuserModel(cfg, backbones)
    params = model.trainable_parameters()
    opt = AdamW(params, cfg.weight_decay, (cfg.beta1, cfg.beta2))
    weights = loss_weights(cfg)
    result = TrainResult(model, hash_before=model.frozen_hash(), out_dir=out)

    emit(f"config hash {cfg.hash()}")
    lines.extend("config " + s for s in cfg.to_text().splitlines())
    emit(census_lines(model)[0])
    emit(f"frozen hash {result.hash_before}")

    train_set = generate_dataset(get_domain(cfg.source_domain), cfg.train_images, cfg.seed, size=cfg.image_size)
    rng = np.random.default_rng([cfg.seed, 211])
    last_good = _snapshot(params)
    n_iters = cfg.iters if max_iters is None else min(max_iters, cfg.iters)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())

    def abort(it, reason):
        path = None
        if out is not None:
            for p, d in zip(params, last_good):
                p.data = d
            path = str(out / "last_good.bin")
            save_checkpoint(path, model, _meta(cfg, it), params)
        emit(f"abort iter {it}: {reason}")
        _write_logs(out, lines, result.metrics)
        raise TrainingAborted(it, path, reason)

    for it in range(n_iters):
        idx = rng.choice(len(train_set), size=cfg.batch_size, replace=False)
        batch = collate([train_set[i] for i in idx])
        if cfg.augment:
            batch = augment(batch, rng)
        lr = lr_at(it, cfg)
        try:
            terms = loss_total(model(batch.images), batch.labels, weights, batch.ignore_index)
            loss = float(terms.total.data)
            if not np.isfinite(loss):
                raise NonFiniteError(f"loss {loss}")
            T.backward(terms.total)
        except NonFiniteError as e:
            T.get_tape().clear()
            abort(it, f"non-finite value ({e})")
        if not all(p.grad is None or np.isfinite(p.grad).all() for p in params):
            abort(it, "non-finite gradient")
        last_good = _snapshot(params)
        opt.step(lr)
        for p in params:
            p.grad = None
        result.losses.append(loss)
        result.lrs.append(lr)
        parts = {k: float(terms.parts.get(k, 0.0)) for k in ("bce", "dice", "cls", "align")}
        lines.append(f"iter {it} lr {lr:.6e} loss {loss:.6f} " + " ".join(f"{k} {v:.6f}" for k, v in parts.items()))
        is_eval = (it + 1) % cfg.eval_every == 0 or it == n_iters - 1
        if is_eval:
            src = evaluate(model, [cfg.source_domain])[cfg.source_domain]
            row = {"iter": it, "lr": lr, "loss": loss, **parts, "source_miou": src}
            result.metrics.append(row)
            emit(f"eval iter {it} source_miou {src:.4f} loss {loss:.4f}")

    result.hash_after = model.frozen_hash()
    if result.hash_after != result.hash_before:
        raise T.ContractError("frozen encoder parameters changed during training")
    emit(f"frozen hash after {result.hash_after}")
    result.seconds = time.perf_counter() - t_start
    emit(f"done {n_iters} iters in {result.seconds:.1f}s")
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", model, _meta(cfg, n_iters), params)
        _write_logs(out, lines, result.metrics)
    return result


def _meta(cfg: ExperimentConfig, iteration: int) -> dict:
    return {"config": cfg.to_text(), "iteration": iteration, "classes": list(CLASS_NAMES)}


def _write_logs(out: Path | None, lines: list[str], metrics: list[dict]) -> None:
    if out is None:
        return
    (out / "log.txt").write_text("\n".join(lines) + "\n")
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in metrics:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def load_model(path, backbones: Backbones | None = None) -> MFuserModel:
    """Rebuild a model from a checkpoint; the class list must match this build."""
    sections, meta = load_tensors(path)
    classes = meta.get("classes")
    if classes is not None and list(classes) != list(CLASS_NAMES):
        raise T.ConfigError(f"checkpoint has {len(classes)} classes {classes}, "
                            f"this build has {len(CLASS_NAMES)} {list(CLASS_NAMES)}")
    cfg = ExperimentConfig.from_text(meta["config"])
    model = MFuserModel(cfg, backbones)
    load_into(model, sections)
    return model


def evaluate_checkpoint(path, domains=None, n_images: int | None = None, seed: int | None = None) -> dict:
    return evaluate(load_model(path), domains, n_images, seed)
