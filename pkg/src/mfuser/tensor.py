"""Dense float64 tensors with a reverse-mode tape.

Every differentiable op builds its output through :func:`_make`, which checks
finiteness and, when any input participates in differentiation, appends a node
to the active tape. :func:`backward` replays the tape in reverse order exactly
once and then clears it.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "NonFiniteError",
    "ContractError",
    "ConfigError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "get_tape",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "silu",
    "softplus",
    "gelu",
    "tanh",
    "layer_norm",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "concat",
    "split",
    "conv1d",
    "conv2d_depthwise",
    "finite_diff_check",
    "param_grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf from finite inputs."""


class ContractError(RuntimeError):
    """A call violated an operation's precondition."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.enabled = True

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    """Disable recording on this thread's tape."""
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, opname: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{opname} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = get_tape()
    if tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.record(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that requires it, then clear the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if not tape.nodes or not loss.requires_grad:
        raise ContractError("backward called with an empty tape")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(tape.nodes):
            g = node.grad
            if g is None:
                continue
            node._backward(g)
            # interior grads are transient
            node.grad = None
    finally:
        for node in tape.nodes:
            node.grad = None
            node._parents = ()
            node._backward = None
        tape.clear()


# -- binary ops --------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accum(a, -g), "neg")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# -- pointwise ---------------------------------------------------------

def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: _accum(a, g / a.data), "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * (1.0 - out * out)), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out * (1.0 - out)), "sigmoid")


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid_np(a.data)
    out = a.data * s
    return _make(out, (a,), lambda g: _accum(a, g * (s + out * (1.0 - s))), "silu")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = _softplus_np(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * _sigmoid_np(a.data)), "softplus")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _accum(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner))

    return _make(out, (a,), bw, "gelu")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        _accum(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = _as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    out = x.data / norm

    def bw(g):
        _accum(x, (g - out * (g * out).sum(axis=axis, keepdims=True)) / norm)

    return _make(out, (x,), bw, "l2_normalize")


# -- structural --------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: _accum(a, g.reshape(a.shape)), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: _accum(a, np.transpose(g, inv)), "transpose")


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accum(a, full)

    return _make(np.array(out), (a,), bw, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            _accum(t, piece)

    return _make(out, ts, bw, "concat")


def split(a, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    a = _as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    pieces = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        pieces.append(getitem(a, tuple(idx)))
        start += n
    return pieces


# -- convolutions ------------------------------------------------------

def conv1d(x, kernel, causal: bool = False) -> Tensor:
    """Depthwise 1-D convolution along the token axis (second to last).

    ``x`` is ``(..., T, d)`` and ``kernel`` is ``(k, d)``. Output has length T
    with zero padding; causal mode pads on the left only, so output ``t`` sees
    inputs ``t-k+1 .. t``. Same-padding mode requires odd ``k``.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if kernel.ndim != 2 or kernel.shape[0] < 1:
        raise ConfigError(f"conv1d: kernel must be (k, d) with k >= 1, got {kernel.shape}")
    k, d = kernel.shape
    if x.shape[-1] != d:
        raise DimensionError(f"conv1d: input width {x.shape[-1]} vs kernel width {d}")
    if not causal and k % 2 == 0:
        raise ConfigError(f"conv1d: same padding needs odd kernel, got k={k}")
    T = x.shape[-2]
    left = k - 1 if causal else k // 2
    right = 0 if causal else k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j:j + T, :] * kernel.data[j]

    def bw(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[j] = (xp[..., j:j + T, :] * g).reshape(-1, d).sum(axis=0)
            _accum(kernel, gk)
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[..., j:j + T, :] += g * kernel.data[j]
            _accum(x, gp[..., left:left + T, :])

    return _make(out, (x, kernel), bw, "conv1d")


def conv2d_depthwise(x, kernel) -> Tensor:
    """Depthwise same-padded 2-D convolution.

    ``x`` is ``(..., H, W, d)``; ``kernel`` is ``(kh, kw, d)`` with odd sizes.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    kh, kw, d = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d_depthwise: kernel must be odd-sized, got {kernel.shape}")
    if x.shape[-1] != d:
        raise DimensionError(f"conv2d_depthwise: input width {x.shape[-1]} vs kernel width {d}")
    H, W = x.shape[-3], x.shape[-2]
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out += xp[..., i:i + H, j:j + W, :] * kernel.data[i, j]

    def bw(g):
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i in range(kh):
                for j in range(kw):
                    gk[i, j] = (xp[..., i:i + H, j:j + W, :] * g).reshape(-1, d).sum(axis=0)
            _accum(kernel, gk)
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[..., i:i + H, j:j + W, :] += g * kernel.data[i, j]
            _accum(x, gp[..., ph:ph + H, pw:pw + W, :])

    return _make(out, (x, kernel), bw, "conv2d_depthwise")


# -- verification ------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-4,
                      eps: float = 1e-6, coords: Sequence[int] | None = None) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` maps a tensor to a scalar tensor and must be pure. When ``coords`` is
    given only those flat indices are probed. The denominator floor ``eps`` is
    scaled by ``max(1, |f|)``: central-difference roundoff grows like
    ``|f| * machine_eps / h``, which would otherwise register as relative error
    on coordinates whose true gradient is exactly zero.
    """
    if h <= 0:
        raise ContractError("finite_diff_check: step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    get_tape().clear()
    f0 = f(xt)
    floor = eps * max(1.0, abs(f0.item()))
    backward(f0)
    analytic = xt.grad.ravel()
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            xp = base.copy().ravel()
            xm = base.copy().ravel()
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(base.shape))).item()
            fm = f(Tensor(xm.reshape(base.shape))).item()
            num = (fp - fm) / (2 * h)
            if not (np.isfinite(num) and np.isfinite(analytic[i])):
                raise ContractError(f"finite_diff_check: NaN at coordinate {i}")
            err = abs(analytic[i] - num) / (abs(analytic[i]) + abs(num) + floor)
            worst = max(worst, err)
    return worst


def param_grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], n_coords: int = 6,
                     h: float = 1e-4, eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative error of tape gradients of ``f()`` w.r.t. ``params`` vs central differences.

    ``f`` takes no arguments and reads the parameters by reference; ``n_coords``
    random flat coordinates of each parameter are probed (all if fewer). The
    error floor scales with ``|f|`` as in :func:`finite_diff_check`.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    get_tape().clear()
    f0 = f()
    floor = eps * max(1.0, abs(f0.item()))
    backward(f0)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros(p.size) if p.grad is None else p.grad.ravel().copy()
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            picks = range(p.size) if p.size <= n_coords else rng.choice(p.size, n_coords, replace=False)
            for i in picks:
                keep = flat[i]
                flat[i] = keep + h
                fp = f().item()
                flat[i] = keep - h
                fm = f().item()
                flat[i] = keep
                num = (fp - fm) / (2 * h)
                worst = max(worst, abs(analytic[i] - num) / (abs(analytic[i]) + abs(num) + floor))
            p.grad = None
    return worst
