"""Lightweight token refinement: linear, 3x3 depthwise conv, linear, ECA gate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from memroute import tensor as T
from memroute.attention import xavier
from memroute.errors import ConfigError, ShapeError
from memroute.tensor import Tensor


def eca_kernel_size(dim: int) -> int:
    """Adaptive ECA width ``|(log2 D + 1) / 2|_odd``, never below 3."""
    t = int(abs((math.log2(dim) + 1) / 2))
    k = t if t % 2 else t + 1
    return max(k, 3)


@dataclass
class LtrmParams:
    w1: Tensor
    b1: Tensor
    dw_kernel: Tensor
    w2: Tensor
    b2: Tensor
    eca_kernel: Tensor
    eca_bias: Tensor

    def __post_init__(self):
        _, kh, kw = self.dw_kernel.shape
        if kh != kw or kh % 2 == 0:
            raise ConfigError(f"depthwise kernel must be square and odd, got {kh}x{kw}")
        if self.eca_kernel.shape[0] % 2 == 0:
            raise ConfigError(f"ECA kernel must be odd, got {self.eca_kernel.shape[0]}")

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, dtype="f32") -> "LtrmParams":
        k = eca_kernel_size(dim)

        def param(arr):
            return Tensor(arr, dtype=dtype, requires_grad=True)

        return cls(
            w1=xavier(rng, dim, dim, dtype),
            b1=param(np.zeros(dim)),
            dw_kernel=param(rng.uniform(-1 / 3, 1 / 3, size=(dim, 3, 3))),
            w2=xavier(rng, dim, dim, dtype),
            b2=param(np.zeros(dim)),
            eca_kernel=param(rng.uniform(-1 / math.sqrt(k), 1 / math.sqrt(k), size=k)),
            eca_bias=param(np.zeros(1)),
        )


def eca_gate(y: Tensor, params: LtrmParams) -> Tensor:
    """Per-channel sigmoid gate [B, 1, D] from globally pooled channel descriptors."""
    desc = T.mean(y, axis=1, keepdims=True)
    return T.sigmoid(T.add(T.conv1d(desc, params.eca_kernel), params.eca_bias))


def ltrm_forward(x: Tensor, grid: tuple, params: LtrmParams) -> Tensor:
    """Refine every token of ``x`` [B, N, D] laid out on a ``grid`` of Hp x Wp patches."""
    B, N, D = x.shape
    Hp, Wp = grid
    if Hp * Wp != N:
        raise ShapeError(f"grid {Hp}x{Wp} does not match {N} tokens")
    h = T.linear(x, params.w1, params.b1)
    img = T.transpose(T.reshape(h, (B, Hp, Wp, D)), (0, 3, 1, 2))
    img = T.depthwise_conv2d(img, params.dw_kernel)
    h = T.reshape(T.transpose(img, (0, 2, 3, 1)), (B, N, D))
    y = T.linear(h, params.w2, params.b2)
    return T.mul(y, eca_gate(y, params))


def ltrm_cost(n_tokens: int, dim: int, kernel: int = 3) -> int:
    """FLOPs of one refinement pass, 2 per multiply-add, exact integers.

    2ND^2 (first linear) + 2*k^2*ND (depthwise) + 2ND^2 (second linear)
    + 2ND (ECA pooling and gating). The O(D) descriptor convolution does not
    scale with N and is left out so the cost stays exactly linear in N.
    """
    n, d = int(n_tokens), int(dim)
    return 2 * n * d * d + 2 * kernel * kernel * n * d + 2 * n * d * d + 2 * n * d
