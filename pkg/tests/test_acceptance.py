"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal summary.
Criteria 4, 8 and 9 share one grid of full-length training runs (about 80 minutes
on one core); set MFUSER_SKIP_GRID=1 to skip them during development.
"""
import hashlib
import os
import subprocess
import sys
import time
from pathlib import Path
from statistics import median

import numpy as np
import pytest

from mfuser import tensor as T
from mfuser.bench import bench_adapters, check_ordering
from mfuser.config import ExperimentConfig
from mfuser.model import Backbones, MFuserModel
from mfuser.train import evaluate, load_model, train

from conftest import record_criterion

HERE = Path(__file__).parent
SEEDS = (0, 1, 2)
GRID = {
    "fused": dict(),
    "vfm_only": dict(fusion="vfm_only"),
    "vlm_only": dict(fusion="vlm_only"),
    "concat_frozen": dict(fusion="concat_frozen", adapter="none"),
    "no_enhance": dict(enhancer="no_enhance"),
}
skip_grid = pytest.mark.skipif(os.environ.get("MFUSER_SKIP_GRID") == "1", reason="MFUSER_SKIP_GRID=1")


def _run_tests(*args) -> tuple[bool, float, str]:
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *args],
                          cwd=HERE.parent, capture_output=True, text=True)
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    return proc.returncode == 0, time.perf_counter() - t0, last


def _check(n, ok, detail):
    record_criterion(n, ok, detail)
    assert ok, detail


@pytest.fixture(scope="session")
def grid():
    """Full-length runs for every (configuration, seed); shared backbones, shared seeds."""
    bb = Backbones(ExperimentConfig())
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        for name, kw in GRID.items():
            res = train(ExperimentConfig(seed=seed, **kw), backbones=bb)
            # keep only what the criteria need, not the models
            out[name, seed] = (evaluate(res.model), (res.hash_before, res.hash_after, res.model.cfg.iters))
    return out, time.perf_counter() - t0


def test_criterion_01_gradient_suite():
    ok, secs, last = _run_tests("tests/test_tensor.py", "tests/test_ssm.py", "tests/test_mvfuser.py",
                                "tests/test_mtenhancer.py", "tests/test_seghead.py", "-k", "gradient")
    _check(1, ok and secs < 120, f"finite-difference suite: {last}; {secs:.1f}s (limit 120s)")


def test_criterion_02_scan_oracles():
    ok, secs, last = _run_tests("tests/test_ssm.py", "-k", "unrolled_oracle or blocked_equals_sequential")
    _check(2, ok, f"blocked == sequential < 1e-9, sequential == unrolled < 1e-10: {last}")


def test_criterion_03_identity_at_init():
    model = MFuserModel(ExperimentConfig())
    imgs = np.random.default_rng(0).uniform(size=(2, 64, 64, 3))
    with T.no_grad():
        a, b = model(imgs, adapted=True), model(imgs, adapted=False)
    fields = ("mask_logits", "class_logits", "pixel_embed", "queries")
    same = all(np.array_equal(getattr(a, f).data, getattr(b, f).data) for f in fields)
    _check(3, same, f"adapted vs unadapted outputs bit-identical: {same}")


@skip_grid
def test_criterion_04_frozen_contract(grid):
    runs, _ = grid
    hashes = {k: v[1] for k, v in runs.items()}
    iters = {v[2] for v in hashes.values()}
    ok = all(before == after for before, after, _ in hashes.values()) and iters == {2000}
    _check(4, ok, f"frozen SHA-256 unchanged over {len(hashes)} runs of {sorted(iters)} iterations")


def test_criterion_05_efficiency():
    t0 = time.perf_counter()
    order = check_ordering(T_len=1024)
    _, fits = bench_adapters(T_grid=(1024, 2048, 4096, 8192))
    secs = time.perf_counter() - t0
    lin, quad = fits["mvfuser"], fits["self_attn_concat"]
    ok = (all(order.values()) and lin.r2_linear > 0.98 and quad.r2_quadratic > quad.r2_linear
          and secs < 600)
    _check(5, ok, f"orderings {list(order.values())}; mvfuser linear R2 {lin.r2_linear:.4f}; "
                  f"concat R2 lin {quad.r2_linear:.4f} quad {quad.r2_quadratic:.4f}; {secs:.0f}s")


def test_criterion_06_module_oracles():
    ok, _, last = _run_tests("tests/test_mvfuser.py", "tests/test_mtenhancer.py", "-k", "straight_line_oracle")
    _check(6, ok, f"fuser and enhancer match straight-line evaluation < 1e-10: {last}")


def test_criterion_07_causality():
    ok, _, last = _run_tests("tests/test_mtenhancer.py", "tests/test_ssm.py", "-k", "causal")
    _check(7, ok, f"prefix copy exactly invariant to visual tokens, suffix copy not: {last}")


def _medians(runs, name):
    return median(runs[name, s][0]["avg_shifted"] for s in SEEDS)


@skip_grid
def test_criterion_08_fusion_direction(grid):
    runs, secs = grid
    m = {k: _medians(runs, k) for k in ("fused", "vfm_only", "vlm_only", "concat_frozen")}
    ok = m["fused"] >= max(m["vfm_only"], m["vlm_only"]) and m["fused"] >= m["concat_frozen"] and secs < 7200
    detail = ", ".join(f"{k} {v:.4f}" for k, v in m.items())
    _check(8, ok, f"median shifted mIoU: {detail}; grid {secs / 60:.0f} min")


@skip_grid
def test_criterion_09_enhancer_direction(grid):
    runs, _ = grid
    full, base = _medians(runs, "fused"), _medians(runs, "no_enhance")
    _check(9, full >= base, f"median shifted mIoU: full {full:.4f}, no_enhance {base:.4f}")


def test_criterion_10_miou_oracle():
    ok, _, last = _run_tests("tests/test_seghead.py", "-k", "miou_matches_oracle")
    _check(10, ok, f"mIoU equals confusion-matrix oracle on 100 grids: {last}")


def test_criterion_11_determinism_and_roundtrip(tmp_path):
    cfg = ExperimentConfig(iters=20, warmup=5, eval_every=10)
    bb = Backbones(cfg)
    a = train(cfg, tmp_path / "a", bb)
    b = train(cfg, tmp_path / "b", bb)
    same_run = a.losses == b.losses and all(
        np.array_equal(p.data, q.data) for p, q in zip(a.model.trainable_parameters(), b.model.trainable_parameters()))
    same_files = all(hashlib.sha256((tmp_path / r / "checkpoint.bin").read_bytes()).digest()
                     == hashlib.sha256((tmp_path / "a" / "checkpoint.bin").read_bytes()).digest() for r in "ab")
    same_eval = evaluate(load_model(tmp_path / "a" / "checkpoint.bin", bb)) == evaluate(a.model)
    _check(11, same_run and same_files and same_eval,
           f"repeat run identical {same_run}, checkpoints identical {same_files}, reload eval identical {same_eval}")
