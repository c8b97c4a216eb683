"""Adapter efficiency benchmark: analytic parameter/op counts and measured wall time."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapters import ADAPTER_MODES, SelfAttnConcat, adapter_flops, adapter_params, build_adapter
from .mvfuser import TokenSequence
from .tensor import Tensor

BENCH_MODES = tuple(m for m in ADAPTER_MODES if m != "none")


@dataclass
class BenchRow:
    mode: str
    T_len: int
    params: int
    flops: int
    seconds: float = float("nan")


@dataclass
class Fit:
    r2_linear: float            # time ~ a + b T
    r2_quadratic: float         # time ~ a + c T^2
    loglog_slope: float


def analytic_table(widths=(1024, 1024), d_low: int = 256, T_grid=(1024,), d_state: int = 16,
                   modes=BENCH_MODES) -> list[BenchRow]:
    return [BenchRow(m, t, adapter_params(m, widths, d_low, d_state), adapter_flops(m, widths, d_low, t, d_state))
            for m in modes for t in T_grid]


def check_ordering(widths=(1024, 1024), d_low: int = 256, T_len: int = 1024, d_state: int = 16) -> dict[str, bool]:
    """The three efficiency orderings, evaluated on the analytic counters."""
    p = {m: adapter_params(m, widths, d_low, d_state) for m in ("mvfuser", "self_attn_concat")}
    f = {m: adapter_flops(m, widths, d_low, T_len, d_state)
         for m in ("mvfuser", "self_attn_separate", "self_attn_concat")}
    return {
        "params mvfuser < self_attn_concat": p["mvfuser"] < p["self_attn_concat"],
        "flops mvfuser < self_attn_separate": f["mvfuser"] < f["self_attn_separate"],
        "flops self_attn_separate < self_attn_concat": f["self_attn_separate"] < f["self_attn_concat"],
    }


def grid_shape(T_len: int) -> tuple[int, int]:
    """Near-square factorization ``h x w = T_len`` with ``h <= w``."""
    h = int(np.sqrt(T_len))
    while T_len % h:
        h -= 1
    return h, T_len // h


def _concat_chunked(adapter: SelfAttnConcat, xa, xb, chunk: int):
    # queries are independent, so evaluate attention a row block at a time to bound memory
    a, b = adapter._low([xa, xb])
    x = T.concat([a, b], axis=-2)
    rows = [adapter.attn(x[..., i:i + chunk, :], x) for i in range(0, x.shape[-2], chunk)]
    mixed = T.concat(rows, axis=-2)
    pa, pb = T.split(mixed, [a.shape[-2], b.shape[-2]], axis=-2)
    return adapter.up[0](pa), adapter.up[1](pb)


def time_adapter(mode: str, T_len: int, widths=(64, 48), d_low: int = 16, d_state: int = 16,
                 repeats: int = 3, seed: int = 0, chunk: int = 1024) -> float:
    """Median forward wall time (seconds) of one adapter on random tokens."""
    rng = np.random.default_rng([seed, T_len])
    adapter = build_adapter(mode, widths, d_low, rng, d_state, scan_block=64)
    grid = grid_shape(T_len)
    xs = [TokenSequence(Tensor(rng.normal(size=(T_len, w))), grid, tag) for w, tag in zip(widths, ("VFM", "VLM"))]
    times = []
    with T.no_grad():
        for _ in range(repeats):
            t0 = time.perf_counter()
            if mode == "self_attn_concat" and 2 * T_len > chunk:
                _concat_chunked(adapter, xs[0], xs[1], chunk)
            else:
                adapter(xs[0], xs[1])
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _r2(y, X):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(1 - (resid ** 2).sum() / ss_tot) if ss_tot > 0 else 1.0


def fit_scaling(T_grid, seconds) -> Fit:
    t = np.asarray(T_grid, dtype=np.float64)
    y = np.asarray(seconds, dtype=np.float64)
    one = np.ones_like(t)
    slope = np.polyfit(np.log(t), np.log(y), 1)[0]
    return Fit(_r2(y, np.stack([one, t], 1)), _r2(y, np.stack([one, t * t], 1)), float(slope))


def bench_adapters(widths=(1024, 1024), d_low: int = 256, T_grid=(1024, 2048, 4096, 8192),
                   time_modes=("mvfuser", "self_attn_concat"), time_widths=(64, 48), time_d_low: int = 16,
                   repeats: int = 3, log=None) -> tuple[list[BenchRow], dict[str, Fit]]:
    """Analytic counts at the given dims plus measured wall time and scaling fits.

    Wall time is measured at the smaller ``time_widths`` / ``time_d_low`` so the
    quadratic baseline stays within desktop memory; only the T-scaling is compared.
    """
    rows = analytic_table(widths, d_low, T_grid)
    by_key = {(r.mode, r.T_len): r for r in rows}
    fits = {}
    for m in time_modes:
        secs = []
        for t in T_grid:
            s = time_adapter(m, t, time_widths, time_d_low, repeats=repeats)
            by_key[(m, t)].seconds = s
            secs.append(s)
            if log:
                log(f"time {m} T={t} {s:.4f}s")
        fits[m] = fit_scaling(T_grid, secs)
    return rows, fits


def format_table(rows: list[BenchRow]) -> str:
    out = ["mode,T,params,flops,seconds"]
    out += [f"{r.mode},{r.T_len},{r.params},{r.flops},{r.seconds:.6g}" for r in rows]
    return "\n".join(out) + "\n"
