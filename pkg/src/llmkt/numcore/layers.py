"""Reusable trainable blocks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .module import Module, parameter, xavier_init


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, bias: bool = True, std: float | None = None):
        if std is None:
            w = xavier_init(rng, in_dim, out_dim)
        else:
            w = rng.normal(0.0, std, size=(in_dim, out_dim))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(out_dim)) if bias else None
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: T.Tensor) -> T.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"Linear expects last dim {self.in_dim}, got {x.shape[-1]}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def sinusoidal_positions(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    table = np.zeros((n_positions, dim))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : (dim - dim // 2)])
    return table
