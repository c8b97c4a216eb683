"""Parameter containers built on :mod:`mfuser.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container.

    Tensor attributes, child modules and lists of child modules are discovered
    by name, so ``named_parameters`` is deterministic given construction order.
    """

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for k in sorted(val):
                    item = val[k]
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{k}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{k}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def freeze(self) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def _param(arr, trainable: bool) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=trainable)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False, scale: float | None = None, trainable: bool = True):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            std = (1.0 / np.sqrt(d_in)) if scale is None else scale
            w = rng.normal(0.0, std, size=(d_in, d_out))
        self.weight = _param(w, trainable)
        self.bias = _param(np.zeros(d_out), trainable) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x):
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d: int, trainable: bool = True, eps: float = 1e-5):
        self.gamma = _param(np.ones(d), trainable)
        self.beta = _param(np.zeros(d), trainable)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Two-layer GELU MLP; ``zero_out`` zero-initializes the second layer."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator, zero_out: bool = False,
                 out_scale: float | None = None, trainable: bool = True):
        self.fc1 = Linear(d, hidden, rng, trainable=trainable)
        self.fc2 = Linear(hidden, d, rng, zero_init=zero_out, scale=out_scale, trainable=trainable)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head dot-product attention with separate query and key/value inputs."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, d_kv: int | None = None,
                 zero_out: bool = False, out_scale: float | None = None, trainable: bool = True):
        if d % heads:
            raise T.ConfigError(f"width {d} not divisible by {heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.heads = heads
        self.q = Linear(d, d, rng, trainable=trainable)
        self.k = Linear(d_kv, d, rng, trainable=trainable)
        self.v = Linear(d_kv, d, rng, trainable=trainable)
        self.o = Linear(d, d, rng, zero_init=zero_out, scale=out_scale, trainable=trainable)

    def _split_heads(self, x):
        *lead, n, d = x.shape
        h = self.heads
        x = x.reshape(*lead, n, h, d // h)
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return x.transpose(axes)

    def _merge_heads(self, x):
        *lead, h, n, dh = x.shape
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return x.transpose(axes).reshape(*lead, n, h * dh)

    def __call__(self, x, kv=None):
        kv = x if kv is None else kv
        q = self._split_heads(self.q(x))
        k = self._split_heads(self.k(kv))
        v = self._split_heads(self.v(kv))
        scale = 1.0 / np.sqrt(q.shape[-1])
        attn = T.softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)
        return self.o(self._merge_heads(attn @ v))
