"""Selective state-space scan.

Recurrence per channel ``c`` and state ``j``::

    A      = -exp(A_log)
    delta  = softplus(delta_raw + delta_bias)
    Abar_t = exp(delta_t * A)
    Bbar_t = delta_t * B_t
    h_t    = Abar_t * h_{t-1} + Bbar_t * x_t        (h_0 = 0)
    y_t    = <C_t, h_t> + D * x_t

``B_t``, ``C_t`` and ``delta_raw_t`` come from one linear projection of ``x_t``.
The scan itself is a single tape primitive whose adjoint is a reverse-time
recurrence of the same form, so both directions share the blocked evaluator.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Module
from .tensor import ContractError, DimensionError, Tensor

__all__ = [
    "SsmParams",
    "FlopCounter",
    "discretize",
    "linear_recurrence",
    "selective_scan",
    "scan_sequential",
    "scan_blocked",
    "scan_cost",
]


class FlopCounter:
    """Tallies elementwise ops and multiply-adds as they execute."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SsmParams(Module):
    def __init__(self, d_inner: int, d_state: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1, trainable: bool = True):
        self.d_inner, self.d_state = d_inner, d_state
        n_out = 2 * d_state + d_inner
        self.proj_w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_inner), size=(d_inner, n_out)),
                             requires_grad=trainable)
        self.proj_b = Tensor(np.zeros(n_out), requires_grad=trainable)
        # decay rates 1..d_state for every channel
        self.A_log = Tensor(np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1)),
                            requires_grad=trainable)
        self.D_skip = Tensor(np.ones(d_inner), requires_grad=trainable)
        dt = rng.uniform(dt_min, dt_max, size=d_inner)
        self.dt_bias = Tensor(_inv_softplus(dt), requires_grad=trainable)

    def project(self, x):
        """Input-dependent ``(delta, B, C)`` for ``x`` of shape ``(..., T, d_inner)``."""
        z = x @ self.proj_w + self.proj_b
        n = self.d_state
        Bm, Cm, draw = T.split(z, [n, n, self.d_inner], axis=-1)
        delta = T.softplus(draw + self.dt_bias)
        return delta, Bm, Cm

    @property
    def A(self) -> Tensor:
        return T.neg(T.exp(self.A_log))


def discretize(A, B_t, delta_t):
    """Zero-order-hold transition with an Euler input map.

    Returns ``(Abar, Bbar)`` with ``Abar = exp(delta*A)`` and ``Bbar = delta*B``,
    each of shape ``(d_inner, d_state)`` for a single step.
    """
    A = np.asarray(A, dtype=np.float64)
    B_t = np.asarray(B_t, dtype=np.float64)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if np.any(delta_t <= 0):
        raise ContractError("discretize: step sizes must be positive")
    Abar = np.exp(delta_t[..., None] * A)
    Bbar = delta_t[..., None] * B_t[..., None, :]
    return Abar, Bbar


def linear_recurrence(a: np.ndarray, u: np.ndarray, block: int | None = None) -> np.ndarray:
    """Solve ``h_t = a_t * h_{t-1} + u_t`` with ``h_{-1} = 0`` along axis 0.

    With ``block`` set, each block of ``block`` steps is first scanned from a zero
    state (vectorized across blocks) while accumulating the block's transition
    product. The carried state between blocks is then propagated through those
    affine maps ``h -> P*h + b`` and added back, so work stays O(T).
    """
    n = a.shape[0]
    if block is None or block >= n:
        h = np.empty_like(u)
        prev = np.zeros_like(u[0])
        for t in range(n):
            prev = a[t] * prev + u[t]
            h[t] = prev
        return h
    if block < 1:
        raise ContractError(f"block must be >= 1, got {block}")
    if block == 1:
        return linear_recurrence(a, u, None)
    nb = -(-n // block)
    pad = nb * block - n
    if pad:
        tail = (pad,) + a.shape[1:]
        a = np.concatenate([a, np.ones(tail)], axis=0)
        u = np.concatenate([u, np.zeros(tail)], axis=0)
    a = a.reshape((nb, block) + a.shape[1:])
    u = u.reshape((nb, block) + u.shape[1:])
    local = np.empty_like(u)
    prod = np.empty_like(a)
    local[:, 0] = u[:, 0]
    prod[:, 0] = a[:, 0]
    for j in range(1, block):
        local[:, j] = a[:, j] * local[:, j - 1] + u[:, j]
        prod[:, j] = a[:, j] * prod[:, j - 1]
    carry = np.zeros_like(local[:, 0])
    for b in range(1, nb):
        carry[b] = prod[b - 1, -1] * carry[b - 1] + local[b - 1, -1]
    h = local + prod * carry[:, None]
    h = h.reshape((nb * block,) + h.shape[2:])
    return h[:n]


def selective_scan(x, delta, A, Bm, Cm, D, block: int | None = None,
                   counter: FlopCounter | None = None) -> Tensor:
    """Differentiable scan primitive.

    Shapes: ``x, delta`` are ``(..., T, d)``; ``A`` is ``(d, n)``; ``Bm, Cm`` are
    ``(..., T, n)``; ``D`` is ``(d,)``. Returns ``y`` of shape ``(..., T, d)``.
    """
    x, delta, A, Bm, Cm, D = (T._as_tensor(v) for v in (x, delta, A, Bm, Cm, D))
    if x.shape[-2] == 0:
        raise ContractError("selective_scan: empty sequence")
    d, n = A.shape
    if x.shape[-1] != d or delta.shape != x.shape or D.shape != (d,):
        raise DimensionError(f"selective_scan: x {x.shape}, delta {delta.shape}, A {A.shape}, D {D.shape}")
    if Bm.shape[-1] != n or Cm.shape != Bm.shape or Bm.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"selective_scan: B {Bm.shape}, C {Cm.shape} vs x {x.shape}, state {n}")
    if np.any(delta.data <= 0):
        raise ContractError("selective_scan: step sizes must be positive")

    xv, dv, Av, Bv, Cv, Dv = x.data, delta.data, A.data, Bm.data, Cm.data, D.data
    t_axis = xv.ndim - 2
    dA = dv[..., None] * Av                           # (..., T, d, n)
    Abar = np.exp(dA)
    dx = dv * xv                                      # (..., T, d)
    u = dx[..., None] * Bv[..., None, :]
    a_t = np.moveaxis(Abar, t_axis, 0)
    u_t = np.moveaxis(u, t_axis, 0)
    h = np.moveaxis(linear_recurrence(a_t, u_t, block), 0, t_axis)
    y = (h * Cv[..., None, :]).sum(axis=-1) + Dv * xv
    if counter is not None:
        steps = xv.size // d
        per = d * n
        # dA, exp, dx, u, a*h, +u, C*h, reduce, D*x, +skip
        counter.add(steps * (per + per + d + per + per + per + per + d * (n - 1) + d + d))

    def bw(gy):
        gh = gy[..., None] * Cv[..., None, :]
        # reverse-time recurrence G_t = gh_t + Abar_{t+1} G_{t+1}
        g_t = np.moveaxis(gh, t_axis, 0)[::-1]
        a_next = np.moveaxis(Abar, t_axis, 0)
        a_shift = np.concatenate([np.ones_like(a_next[:1]), a_next[:0:-1]], axis=0)
        G = np.moveaxis(linear_recurrence(a_shift, g_t, block)[::-1], 0, t_axis)
        lead = tuple(range(xv.ndim - 1))
        if Cm.requires_grad:
            T._accum(Cm, (gy[..., None] * h).sum(axis=-2))
        h_prev = np.concatenate([np.zeros_like(np.take(h, [0], axis=t_axis)),
                                 np.take(h, np.arange(h.shape[t_axis] - 1), axis=t_axis)], axis=t_axis)
        g_dA = G * h_prev * Abar
        g_dx = (G * Bv[..., None, :]).sum(axis=-1)
        if A.requires_grad:
            T._accum(A, (g_dA * dv[..., None]).sum(axis=lead))
        if Bm.requires_grad:
            T._accum(Bm, (G * dx[..., None]).sum(axis=-2))
        if delta.requires_grad:
            T._accum(delta, (g_dA * Av).sum(axis=-1) + g_dx * xv)
        if x.requires_grad:
            T._accum(x, g_dx * dv + gy * Dv)
        if D.requires_grad:
            T._accum(D, (gy * xv).sum(axis=lead))

    return T._make(y, (x, delta, A, Bm, Cm, D), bw, "selective_scan")


def _scan(x, p: SsmParams, block, counter):
    x = T._as_tensor(x)
    if x.shape[-2] == 0:
        raise ContractError("scan: empty sequence")
    if x.shape[-1] != p.d_inner:
        raise DimensionError(f"scan: input width {x.shape[-1]} vs d_inner {p.d_inner}")
    delta, Bm, Cm = p.project(x)
    if counter is not None:
        steps = x.size // p.d_inner
        n_out = 2 * p.d_state + p.d_inner
        # projection MACs + bias, delta bias + softplus, A = -exp(A_log)
        counter.add(steps * (p.d_inner * n_out + n_out + 2 * p.d_inner) + 2 * p.d_inner * p.d_state)
    return selective_scan(x, delta, p.A, Bm, Cm, p.D_skip, block=block, counter=counter)


def scan_sequential(x, p: SsmParams, counter: FlopCounter | None = None) -> Tensor:
    """Left-to-right scan, one step per token."""
    return _scan(x, p, None, counter)


def scan_blocked(x, p: SsmParams, block: int, counter: FlopCounter | None = None) -> Tensor:
    """Same result as :func:`scan_sequential`, evaluated through block-composed affine maps."""
    if block < 1:
        raise ContractError(f"block must be >= 1, got {block}")
    return _scan(x, p, block, counter)


def scan_cost(T_len: int, d_inner: int, d_state: int) -> int:
    """Exact op count of :func:`scan_sequential` (multiply-add = 1, elementwise op = 1)."""
    d, n = d_inner, d_state
    n_out = 2 * n + d
    proj = d * n_out + n_out + 2 * d
    core = 6 * d * n + d * (n - 1) + 3 * d
    return T_len * (proj + core) + 2 * d * n
