"""Batch-constrained adaptive token routing.

Training draws a Gumbel-Softmax sample per token and routes by its argmax,
with a straight-through gate (hard value forward, soft class-1 probability
backward). Inference routes by plain argmax, optionally capped to the ``k``
tokens with the highest attention-branch probability.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from memroute import netpbm
from memroute import tensor as T
from memroute.errors import ConfigError, ShapeError
from memroute.tensor import Tensor

_relaxed = False


@contextlib.contextmanager
def relaxed_straight_through() -> Iterator[None]:
    """Make the straight-through gate emit its soft value in the forward pass too.

    Hard branch selection is unchanged. This turns the routed forward into a
    smooth function of the router outputs so finite differences can verify the
    backward pass; it is not used for training.
    """
    global _relaxed
    prev, _relaxed = _relaxed, True
    try:
        yield
    finally:
        _relaxed = prev


@dataclass
class RoutingConfig:
    rho: float = 0.25
    tau: float = 1.0
    max_tokens: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.max_tokens is not None and self.max_tokens < 0:
            raise ConfigError(f"max_tokens must be non-negative, got {self.max_tokens}")


@dataclass
class Decision:
    """Routing outcome of one block for a batch.

    ``hard`` is the binary [B, N] decision (1 = attention). ``soft`` is the
    relaxed [B, N, 2] sample (training only) and ``gate`` the [B, N]
    straight-through tensor used to scale branch outputs.
    """

    hard: np.ndarray
    soft: Optional[Tensor] = None
    gate: Optional[Tensor] = None
    log_p: Optional[Tensor] = None

    def selected(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.hard[b])


def sample_gumbel(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Standard Gumbel noise ``-log(-log(u))`` with ``u`` drawn from PCG64 on (0, 1)."""
    u = rng.random(shape)
    u = np.maximum(u, np.finfo(np.float64).tiny)
    return (-np.log(-np.log(u))).astype(dtype)


def decide_train(log_p: Tensor, tau: float, rng: Optional[np.random.Generator] = None,
                 noise: Optional[np.ndarray] = None) -> Decision:
    """Gumbel-Softmax routing with a straight-through hard decision.

    Either ``rng`` or pre-drawn ``noise`` (same shape as ``log_p``) is required.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ValueError("decide_train needs an explicit rng or frozen noise")
        noise = sample_gumbel(log_p.shape, rng, log_p.data.dtype)
    noise = np.asarray(noise, dtype=log_p.data.dtype)
    if noise.shape != log_p.shape:
        raise ShapeError(f"noise {noise.shape} does not match log_p {log_p.shape}")
    soft = T.softmax(T.mul(T.add(log_p, Tensor(noise)), 1.0 / tau), axis=-1)
    # argmax with ties to class 0
    hard = (soft.data[..., 1] > soft.data[..., 0]).astype(np.uint8)
    p_attn = T.reshape(T.narrow(soft, -1, 1, 1), hard.shape)
    gate = p_attn if _relaxed else T.straight_through(hard, p_attn)
    return Decision(hard=hard, soft=soft, gate=gate, log_p=log_p)


def decide_infer(log_p) -> np.ndarray:
    """Argmax routing; exact ties go to the refinement branch (class 0)."""
    lp = log_p.data if isinstance(log_p, Tensor) else np.asarray(log_p)
    return (lp[..., 1] > lp[..., 0]).astype(np.uint8)


def _as_binary(delta) -> np.ndarray:
    d = np.asarray(delta)
    if d.size and not np.all((d == 0) | (d == 1)):
        raise ValueError("routing decisions must be binary")
    return d.astype(np.int64)


def compute_gamma(delta) -> float:
    """Fraction of (sample, block, token) entries routed to attention."""
    d = _as_binary(delta)
    if d.size == 0:
        raise ValueError("compute_gamma needs at least one decision")
    return int(d.sum()) / d.size


def soft_gamma(decisions: Sequence[Decision]) -> Tensor:
    """Differentiable counterpart of :func:`compute_gamma`: mean class-1 soft probability."""
    parts = [T.reshape(T.narrow(d.soft, -1, 1, 1), (-1,)) for d in decisions if d.soft is not None]
    if not parts:
        raise ValueError("no soft routing samples available (inference mode?)")
    return T.mean(T.concat(parts, axis=0))


def apply_topk_cap(log_p, delta: np.ndarray, k: Optional[int]) -> np.ndarray:
    """Keep at most ``k`` attention tokens per sample, ranked by attention probability.

    Among tokens with ``delta == 1`` the ``k`` with the largest p(attention)
    survive; ties keep the lower token index. ``delta`` is [B, N] (or [N]).
    """
    delta = _as_binary(delta).astype(np.uint8)
    if k is None:
        return delta.copy()
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    lp = log_p.data if isinstance(log_p, Tensor) else np.asarray(log_p)
    p_attn = np.exp(lp[..., 1])
    squeeze = delta.ndim == 1
    d2, p2 = np.atleast_2d(delta), np.atleast_2d(p_attn)
    out = d2.copy()
    for b in range(d2.shape[0]):
        sel = np.flatnonzero(d2[b])
        if sel.size <= k:
            continue
        order = np.lexsort((sel, -p2[b, sel]))
        drop = sel[order[k:]]
        out[b, drop] = 0
    return out[0] if squeeze else out


def mask_filename(sample: int, block: int) -> str:
    return f"mask_s{sample}_b{block}.pgm"


def export_masks(decisions: np.ndarray, grid: tuple, out_dir, blocks: Optional[Sequence[int]] = None) -> list:
    """Write one P5 mask per (sample, block); 255 marks the attention branch.

    ``decisions`` is [B, M, N] with N == Hp * Wp; ``blocks`` names the encoder
    block index of each of the M slices (defaults to 0..M-1).
    """
    d = _as_binary(decisions)
    B, M, N = d.shape
    Hp, Wp = grid
    if Hp * Wp != N:
        raise ShapeError(f"grid {Hp}x{Wp} does not hold {N} tokens")
    blocks = list(range(M)) if blocks is None else list(blocks)
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for s in range(B):
        for m, blk in enumerate(blocks):
            img = (d[s, m].reshape(Hp, Wp) * 255).astype(np.uint8)
            path = out_dir / mask_filename(s, blk)
            netpbm.write(path, img)
            paths.append(path)
    return paths


def read_mask(path) -> np.ndarray:
    img = netpbm.read(path)
    if img.ndim != 2 or not np.all((img == 0) | (img == 255)):
        raise ValueError(f"{path} is not a binary routing mask")
    return (img == 255).astype(np.uint8)
