"""Layer building blocks on top of the tape engine."""
from __future__ import annotations

import math

import numpy as np

from .rng import RngStream
from .tensor import Parameter, Tensor, concat, gelu, layernorm


class Module:
    """Holds named parameters and sub-modules; names are dotted paths."""

    def __init__(self, name: str):
        self.name = name

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for value in vars(self).values():
            if isinstance(value, Parameter):
                out[value.name] = value
            elif isinstance(value, Module):
                out.update(value.parameters())
            elif isinstance(value, (list, tuple)):
                for v in value:
                    if isinstance(v, Module):
                        out.update(v.parameters())
        return out

    def _param(self, suffix, data):
        return Parameter(data, f"{self.name}.{suffix}")


class Linear(Module):
    def __init__(self, name, d_in, d_out, rng: RngStream, bias=True, zero=False):
        super().__init__(name)
        w = np.zeros((d_in, d_out)) if zero else rng.normal((d_in, d_out), std=1.0 / math.sqrt(max(d_in, 1)))
        self.W = self._param("W", w)
        self.b = self._param("b", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = x @ self.W
        return y + self.b if self.b is not None else y


class MLP(Module):
    """Two linear layers with GELU in between."""

    def __init__(self, name, d_in, d_hidden, d_out, rng: RngStream):
        super().__init__(name)
        self.fc1 = Linear(f"{name}.fc1", d_in, d_hidden, rng)
        self.fc2 = Linear(f"{name}.fc2", d_hidden, d_out, rng)

    def __call__(self, *xs):
        x = xs[0] if len(xs) == 1 else concat(xs)
        return self.fc2(gelu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, name, dim, eps=1e-6):
        super().__init__(name)
        self.gain = self._param("gain", np.ones(dim))
        self.bias = self._param("bias", np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor):
        return layernorm(x, eps=self.eps) * self.gain + self.bias
