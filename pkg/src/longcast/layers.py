"""Parameter containers shared by the model components."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


def glorot_uniform(rng: Rng, shape: tuple, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, shape).astype(dtype), requires_grad=True)


def zeros(shape: tuple, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape: tuple, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Module:
    """Walks attributes in definition order to enumerate named parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        # shared sub-modules are reported once, under their first path
        seen = set()
        for path, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield path, p

    def _walk(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value._walk(path + ".")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{key}", item
                    elif isinstance(item, Module):
                        yield from item._walk(f"{path}.{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, dtype, bias: bool = True):
        self.weight = glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype)
        self.bias = zeros((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype, eps: float = 1e-5):
        self.gain = ones((d,), dtype)
        self.offset = zeros((d,), dtype)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.offset, self._eps)


class FeedForward(Module):
    """Position-wise d_model -> d_ffn -> d_model with GELU."""

    def __init__(self, d_model: int, d_ffn: int, rng: Rng, dtype):
        self.inner = Linear(d_model, d_ffn, rng, dtype)
        self.outer = Linear(d_ffn, d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.gelu(self.inner(x)))


class Conv1d(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, dtype, width: int = 3,
                 bias: bool = True, padding: str = "replicate"):
        self.weight = glorot_uniform(rng, (width, d_in, d_out), width * d_in, width * d_out, dtype)
        self.bias = zeros((d_out,), dtype) if bias else None
        self._padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self._padding)
