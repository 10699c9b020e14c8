"""Local-global routing-probability predictor.

For each token: ``z = LN(x) @ W1 + b1``; the first half of ``z`` stays local,
the second half is averaged over all tokens of the sample; the concatenation
goes through ``W2, b2`` and a log-softmax over two classes. Column 0 is the
refinement (LTRM) branch, column 1 the global-attention branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from memroute import tensor as T
from memroute.attention import xavier
from memroute.errors import ConfigError, ShapeError
from memroute.tensor import Tensor

LTRM_BRANCH = 0
ATTENTION_BRANCH = 1


@dataclass
class RouterParams:
    ln_gain: Tensor
    ln_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, dtype="f32") -> "RouterParams":
        if dim % 2:
            raise ConfigError(f"router needs an even embed dim, got {dim}")
        # near-zero output logits: roughly 50/50 routing at step 0
        w2 = Tensor(rng.uniform(-1e-3, 1e-3, size=(dim, 2)), dtype=dtype, requires_grad=True)
        return cls(
            ln_gain=Tensor(np.ones(dim), dtype=dtype, requires_grad=True),
            ln_bias=Tensor(np.zeros(dim), dtype=dtype, requires_grad=True),
            w1=xavier(rng, dim, dim, dtype),
            b1=Tensor(np.zeros(dim), dtype=dtype, requires_grad=True),
            w2=w2,
            b2=Tensor(np.zeros(2), dtype=dtype, requires_grad=True),
        )


def route_probs(x: Tensor, params: RouterParams) -> Tensor:
    """Per-token log routing probabilities, shape [B, N, 2]."""
    if x.ndim != 3:
        raise ShapeError(f"route_probs expects [B,N,D], got {x.shape}")
    B, N, D = x.shape
    if D % 2:
        raise ConfigError(f"router needs an even embed dim, got {D}")
    if D != params.dim:
        raise ShapeError(f"router built for D={params.dim}, tokens have D={D}")
    z = T.linear(T.layer_norm(x, params.ln_gain, params.ln_bias), params.w1, params.b1)
    local, shared = T.split(z, 2, axis=-1)
    global_feat = T.broadcast_to(T.mean(shared, axis=1, keepdims=True), (B, N, D // 2))
    z_cat = T.concat([local, global_feat], axis=-1)
    return T.log_softmax(T.linear(z_cat, params.w2, params.b2), axis=-1)
