"""Multi-head self-attention, subset attention, and the attention-map cost model."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from memroute import tensor as T
from memroute.errors import ConfigError, ShapeError
from memroute.tensor import Tensor


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype="f32", shape=None) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape or (fan_in, fan_out)
    return Tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype, requires_grad=True)


@dataclass
class AttentionParams:
    """Projection weights, each stored [in, out] and applied as ``x @ W``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    def __post_init__(self):
        D = self.w_q.shape[0]
        if self.heads <= 0 or D % self.heads:
            raise ConfigError(f"embed dim {D} is not divisible by heads={self.heads}")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (D, D):
                raise ShapeError(f"{name} must be {D}x{D}, got {getattr(self, name).shape}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator, dtype="f32") -> "AttentionParams":
        if heads <= 0 or dim % heads:
            raise ConfigError(f"embed dim {dim} is not divisible by heads={heads}")
        return cls(*(xavier(rng, dim, dim, dtype) for _ in range(4)), heads=heads)


def attend(x: Tensor, params: AttentionParams) -> Tensor:
    """Global multi-head self-attention over the token axis of ``x`` [B,N,D]."""
    if x.ndim != 3 or x.shape[-1] != params.dim:
        raise ShapeError(f"attend expects [B,N,{params.dim}], got {x.shape}")
    B, N, D = x.shape
    h, d = params.heads, params.head_dim

    def heads_first(t):
        return T.transpose(T.reshape(t, (B, N, h, d)), (0, 2, 1, 3))

    q = heads_first(T.matmul(x, params.w_q))
    k = heads_first(T.matmul(x, params.w_k))
    v = heads_first(T.matmul(x, params.w_v))
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, N, D))
    return T.matmul(merged, params.w_o)


def check_index_list(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size:
        if idx[0] < 0 or idx[-1] >= n:
            raise IndexError(f"token index out of range [0, {n}): {idx.tolist()}")
        if np.any(np.diff(idx) <= 0):
            raise IndexError(f"token indices must be strictly increasing: {idx.tolist()}")
    return idx


def attend_subset(x: Tensor, idx: Sequence, params: AttentionParams) -> list:
    """Attention among the selected tokens of each sample.

    ``idx[b]`` lists the selected token positions of sample ``b``. Returns one
    [len(idx[b]), D] tensor of updated rows per sample, in ``idx[b]`` order;
    the caller scatters them back.
    """
    B, N, D = x.shape
    if len(idx) != B:
        raise ShapeError(f"expected {B} index lists, got {len(idx)}")
    out = []
    for b in range(B):
        sel = check_index_list(idx[b], N)
        if sel.size == 0:
            out.append(Tensor(np.zeros((0, D), dtype=x.data.dtype)))
            continue
        rows = T.take(T.narrow(x, 0, b, 1), sel, axis=1)
        out.append(T.reshape(attend(rows, params), (sel.size, D)))
    return out


def attention_cost(n_routed: int, heads: int, dim: int, dtype_bytes: int = 4) -> tuple:
    """Attention-map bytes and matmul FLOPs for one layer over ``n_routed`` tokens.

    bytes = dtype_bytes * heads * n^2 (the stored probability map);
    flops = 4 * heads * n^2 * head_dim (QK^T and AV, 2 flops per MAC)
            + 8 * n * dim^2 (Q, K, V, O projections).
    """
    if n_routed < 0:
        raise ValueError("n_routed must be non-negative")
    if dim % heads:
        raise ConfigError(f"embed dim {dim} is not divisible by heads={heads}")
    n = int(n_routed)
    d = dim // heads
    map_bytes = dtype_bytes * heads * n * n
    flops = 2 * heads * n * n * d * 2 + 4 * 2 * n * dim * dim
    return map_bytes, flops


@dataclass(frozen=True)
class BlockCost:
    block: int
    routed_tokens: int
    attn_map_bytes: int
    flops: int


@dataclass
class CostReport:
    per_block: list = field(default_factory=list)

    @property
    def attn_map_bytes(self) -> int:
        return sum(c.attn_map_bytes for c in self.per_block)

    @property
    def matmul_flops(self) -> int:
        return sum(c.flops for c in self.per_block)

    @classmethod
    def from_counts(cls, routed_counts: Iterable[int], heads: int, dim: int,
                    dtype_bytes: int = 4, blocks: Optional[Iterable[int]] = None) -> "CostReport":
        counts = [int(c) for c in routed_counts]
        blocks = list(blocks) if blocks is not None else list(range(len(counts)))
        rows = []
        for blk, n in zip(blocks, counts):
            nbytes, flops = attention_cost(n, heads, dim, dtype_bytes)
            rows.append(BlockCost(blk, n, nbytes, flops))
        return cls(rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("block,routed_tokens,attn_map_bytes,flops\n")
        for c in self.per_block:
            buf.write(f"{c.block},{c.routed_tokens},{c.attn_map_bytes},{c.flops}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CostReport":
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0] != "block,routed_tokens,attn_map_bytes,flops":
            raise ValueError("missing CostReport CSV header")
        rows = [BlockCost(*(int(v) for v in ln.split(","))) for ln in lines[1:]]
        return cls(rows)
