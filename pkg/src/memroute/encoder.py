"""Patch embedding, routed transformer blocks, the encoder, and the frozen teacher.

A routed block runs::

    xn = LN1(x)
    log_p = router(xn); delta = BATR(log_p)
    rows with delta=1 -> attention among themselves
    rows with delta=0 -> LTRM (computed on the full grid, written back only here)
    x = x + gate * merged;  x = x + MLP(LN2(x))

Blocks outside ``routed_blocks`` (and every teacher block) are plain pre-norm
ViT blocks.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Iterator, Mapping, Optional

import numpy as np

from memroute import tensor as T
from memroute.attention import AttentionParams, attend, attend_subset, xavier
from memroute.batr import (
    Decision,
    RoutingConfig,
    apply_topk_cap,
    compute_gamma,
    decide_infer,
    decide_train,
    soft_gamma,
)
from memroute.errors import ConfigError, ShapeError
from memroute.ltrm import LtrmParams, ltrm_forward
from memroute.router import RouterParams, route_probs
from memroute.tensor import Tensor

LN_EPS = 1e-6


@dataclass
class EncoderConfig:
    img_size: tuple = (64, 64)
    patch: int = 16
    in_channels: int = 3
    embed_dim: int = 32
    heads: int = 2
    depth: int = 2
    mlp_ratio: int = 4
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    routed_blocks: Optional[tuple] = None  # None routes every block

    def __post_init__(self):
        if isinstance(self.img_size, int):
            self.img_size = (self.img_size, self.img_size)
        self.img_size = tuple(int(v) for v in self.img_size)
        H, W = self.img_size
        p = self.patch
        if p <= 0 or H <= 0 or W <= 0 or H % p or W % p:
            raise ConfigError(f"image {H}x{W} is not divisible into {p}x{p} patches")
        if self.heads <= 0 or self.embed_dim % self.heads:
            raise ConfigError(f"embed dim {self.embed_dim} is not divisible by heads={self.heads}")
        if self.embed_dim % 2:
            raise ConfigError(f"embed dim must be even for the router, got {self.embed_dim}")
        if self.depth < 0 or self.mlp_ratio <= 0 or self.in_channels <= 0:
            raise ConfigError("depth, mlp_ratio and in_channels must be positive")
        if self.routed_blocks is not None:
            blocks = tuple(sorted(set(int(b) for b in self.routed_blocks)))
            if blocks and (blocks[0] < 0 or blocks[-1] >= self.depth):
                raise ConfigError(f"routed_blocks {blocks} outside 0..{self.depth - 1}")
            self.routed_blocks = blocks

    @property
    def grid(self) -> tuple:
        return self.img_size[0] // self.patch, self.img_size[1] // self.patch

    @property
    def num_tokens(self) -> int:
        Hp, Wp = self.grid
        return Hp * Wp

    @property
    def routed(self) -> tuple:
        if self.routed_blocks is None:
            return tuple(range(self.depth))
        return self.routed_blocks


@dataclass
class TokenBatch:
    tokens: Tensor  # [B, N, D]
    grid: tuple  # (Hp, Wp)

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.grid[0] * self.grid[1] != self.tokens.shape[1]:
            raise ShapeError(f"tokens {self.tokens.shape} do not match grid {self.grid}")


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class BlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp: MlpParams
    router: Optional[RouterParams] = None
    ltrm: Optional[LtrmParams] = None


@dataclass
class DecoderParams:
    """Toy matting head: two non-overlapping transposed-conv stages, D -> D/2 -> 1."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    stride1: int
    stride2: int


@dataclass
class ModelWeights:
    patch_w: Tensor  # [C*p*p, D]
    pos: Tensor  # [N, D]
    blocks: list
    decoder: Optional[DecoderParams] = None


@dataclass
class RoutingRecord:
    """Decisions of every routed block for one forward pass."""

    decisions: np.ndarray  # [B, M, N] uint8
    blocks: tuple
    gamma: float
    per_block: list = field(default_factory=list)  # Decision objects
    gamma_soft: Optional[Tensor] = None

    @property
    def counts(self) -> np.ndarray:
        """Tokens sent to attention, [B, M]."""
        return self.decisions.sum(axis=-1)


# ---------------------------------------------------------------------------
# parameter bookkeeping
# ---------------------------------------------------------------------------

def named_parameters(obj, prefix: str = "") -> Iterator[tuple]:
    """Yield ``(dotted_name, Tensor)`` for every tensor inside nested dataclasses/lists."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def trainable(weights) -> dict:
    return {n: p for n, p in named_parameters(weights) if p.requires_grad}


def set_requires_grad(weights, flag: bool) -> None:
    for _, p in named_parameters(weights):
        p.requires_grad = flag
        p.grad = None


def clone_weights(weights, requires_grad: Optional[bool] = None):
    """Deep copy with fresh tensors (no shared arrays, no grads)."""
    out = copy.deepcopy(weights)
    for _, p in named_parameters(out):
        p.grad = None
        p._node = None
        if requires_grad is not None:
            p.requires_grad = requires_grad
    return out


def _decoder_strides(p: int) -> tuple:
    s1 = int(math.isqrt(p))
    while p % s1:
        s1 -= 1
    return s1, p // s1


def _param(arr, dtype) -> Tensor:
    return Tensor(arr, dtype=dtype, requires_grad=True)


def _init_block(cfg: EncoderConfig, rng: np.random.Generator, dtype) -> BlockParams:
    D, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    return BlockParams(
        ln1_gain=_param(np.ones(D), dtype),
        ln1_bias=_param(np.zeros(D), dtype),
        attn=AttentionParams.init(D, cfg.heads, rng, dtype),
        ln2_gain=_param(np.ones(D), dtype),
        ln2_bias=_param(np.zeros(D), dtype),
        mlp=MlpParams(
            w1=xavier(rng, D, hidden, dtype),
            b1=_param(np.zeros(hidden), dtype),
            w2=xavier(rng, hidden, D, dtype),
            b2=_param(np.zeros(D), dtype),
        ),
    )


def init_decoder(cfg: EncoderConfig, rng: np.random.Generator, dtype="f32") -> DecoderParams:
    D = cfg.embed_dim
    mid = D // 2
    s1, s2 = _decoder_strides(cfg.patch)
    return DecoderParams(
        w1=xavier(rng, D, s1 * s1 * mid, dtype),
        b1=_param(np.zeros(s1 * s1 * mid), dtype),
        w2=xavier(rng, mid, s2 * s2, dtype),
        b2=_param(np.zeros(s2 * s2), dtype),
        stride1=s1,
        stride2=s2,
    )


def init_teacher(cfg: EncoderConfig, seed: int = 0, dtype="f32", decoder: bool = True) -> ModelWeights:
    """Plain ViT weights (no routers, no LTRM)."""
    rng = np.random.default_rng([seed, 0])
    patch_dim = cfg.in_channels * cfg.patch * cfg.patch
    return ModelWeights(
        patch_w=xavier(rng, patch_dim, cfg.embed_dim, dtype),
        pos=_param(rng.normal(scale=0.02, size=(cfg.num_tokens, cfg.embed_dim)), dtype),
        blocks=[_init_block(cfg, rng, dtype) for _ in range(cfg.depth)],
        decoder=init_decoder(cfg, rng, dtype) if decoder else None,
    )


def init_student(cfg: EncoderConfig, teacher: ModelWeights, seed: int = 0) -> ModelWeights:
    """Copy the teacher's weights and add fresh routers/LTRMs to routed blocks."""
    student = clone_weights(teacher, requires_grad=True)
    dtype = teacher.patch_w.dtype
    rng = np.random.default_rng([seed, 1])
    for m in cfg.routed:
        student.blocks[m].router = RouterParams.init(cfg.embed_dim, rng, dtype)
        student.blocks[m].ltrm = LtrmParams.init(cfg.embed_dim, rng, dtype)
    return student


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def patch_embed(img, patch_w: Tensor, pos: Tensor, patch: int) -> TokenBatch:
    """Split [B, C, H, W] into non-overlapping patches, project, add positions."""
    img = img if isinstance(img, Tensor) else Tensor(np.asarray(img), dtype=patch_w.data.dtype)
    if img.ndim != 4:
        raise ShapeError(f"expected an image batch [B,C,H,W], got {img.shape}")
    B, C, H, W = img.shape
    p = patch
    if H % p or W % p:
        raise ShapeError(f"image {H}x{W} is not divisible into {p}x{p} patches")
    Hp, Wp = H // p, W // p
    if patch_w.shape[0] != C * p * p:
        raise ShapeError(f"patch projection expects {patch_w.shape[0]} inputs, patches have {C * p * p}")
    if pos.shape != (Hp * Wp, patch_w.shape[1]):
        raise ShapeError(f"positional table {pos.shape} does not match {Hp * Wp} tokens")
    x = T.reshape(img, (B, C, Hp, p, Wp, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (B, Hp * Wp, C * p * p))
    return TokenBatch(T.add(T.matmul(x, patch_w), pos), (Hp, Wp))


def mlp_forward(x: Tensor, mlp: MlpParams) -> Tensor:
    return T.linear(T.gelu(T.linear(x, mlp.w1, mlp.b1)), mlp.w2, mlp.b2)


def vit_block_forward(x: Tensor, params: BlockParams) -> Tensor:
    """Standard pre-norm transformer block: every token attends."""
    h = T.add(x, attend(T.layer_norm(x, params.ln1_gain, params.ln1_bias, LN_EPS), params.attn))
    return T.add(h, mlp_forward(T.layer_norm(h, params.ln2_gain, params.ln2_bias, LN_EPS), params.mlp))


def _forced(force, shape) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(force), shape)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("forced routing decisions must be 0 or 1")
    return arr.astype(np.uint8)


def block_forward(x: Tensor, grid: tuple, params: BlockParams, mode: str = "infer",
                  routing: Optional[RoutingConfig] = None, rng: Optional[np.random.Generator] = None,
                  force=None, noise: Optional[np.ndarray] = None) -> tuple:
    """One routed block. Returns ``(tokens, Decision)``.

    ``mode`` is ``"train"`` (Gumbel straight-through) or ``"infer"`` (argmax,
    then the top-k cap from ``routing.max_tokens``). ``force`` overrides the
    router with fixed decisions (scalar or [B, N]).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    routing = routing or RoutingConfig()
    B, N, D = x.shape
    xn = T.layer_norm(x, params.ln1_gain, params.ln1_bias, LN_EPS)

    if force is not None:
        decision = Decision(hard=_forced(force, (B, N)))
    else:
        if params.router is None or params.ltrm is None:
            raise ConfigError("routed block is missing its router or LTRM parameters")
        log_p = route_probs(xn, params.router)
        if mode == "train":
            decision = decide_train(log_p, routing.tau, rng=rng, noise=noise)
        else:
            hard = apply_topk_cap(log_p, decide_infer(log_p), routing.max_tokens)
            decision = Decision(hard=hard, log_p=log_p)
    hard = decision.hard

    ltrm_out = None
    if np.any(hard == 0):
        if params.ltrm is None:
            raise ConfigError("tokens routed to LTRM but the block has no LTRM parameters")
        ltrm_out = ltrm_forward(xn, grid, params.ltrm)
    idx = [decision.selected(b) for b in range(B)]
    attn_rows = attend_subset(xn, idx, params.attn) if np.any(hard == 1) else None

    rows = []
    for b in range(B):
        base = T.reshape(T.narrow(ltrm_out, 0, b, 1), (N, D)) if ltrm_out is not None else None
        if attn_rows is None or idx[b].size == 0:
            merged = base
        else:
            merged = T.scatter(attn_rows[b], idx[b], axis=0, base=base, size=N)
        rows.append(T.reshape(merged, (1, N, D)))
    branch = rows[0] if B == 1 else T.concat(rows, axis=0)

    if decision.gate is not None:
        # forward value is exactly 1; backward carries the soft routing gradient
        on = Tensor(hard.astype(x.data.dtype))
        gate = T.add(T.mul(decision.gate, on), T.mul(T.sub(1.0, decision.gate), T.sub(1.0, on)))
        branch = T.mul(branch, T.reshape(gate, (B, N, 1)))

    h = T.add(x, branch)
    out = T.add(h, mlp_forward(T.layer_norm(h, params.ln2_gain, params.ln2_bias, LN_EPS), params.mlp))
    return out, decision


def _block_force(force, m: int):
    if force is None or np.isscalar(force) or isinstance(force, np.ndarray):
        return force
    if isinstance(force, Mapping):
        return force.get(m)
    raise TypeError("force must be None, a scalar, an array or a mapping block -> array")


def encoder_forward(img, weights: ModelWeights, cfg: EncoderConfig, mode: str = "infer",
                    rng: Optional[np.random.Generator] = None, force=None) -> tuple:
    """Patch-embed then run all blocks. Returns ``(TokenBatch, RoutingRecord)``.

    ``force`` may be a scalar (all routed blocks), a [B, N] array, or a
    mapping ``{block: decisions}``.
    """
    tb = patch_embed(img, weights.patch_w, weights.pos, cfg.patch)
    x = tb.tokens
    routed = set(cfg.routed)
    decisions, used = [], []
    for m, params in enumerate(weights.blocks):
        if m in routed:
            x, dec = block_forward(x, tb.grid, params, mode, cfg.routing, rng, _block_force(force, m))
            decisions.append(dec)
            used.append(m)
        else:
            x = vit_block_forward(x, params)
    B, N = x.shape[0], x.shape[1]
    if decisions:
        stacked = np.stack([d.hard for d in decisions], axis=1)
        gamma = compute_gamma(stacked)
    else:
        stacked = np.zeros((B, 0, N), dtype=np.uint8)
        gamma = 1.0
    g_soft = soft_gamma(decisions) if any(d.soft is not None for d in decisions) else None
    record = RoutingRecord(stacked, tuple(used), gamma, decisions, g_soft)
    return TokenBatch(x, tb.grid), record


def teacher_forward(img, weights: ModelWeights, cfg: EncoderConfig) -> TokenBatch:
    """Routing-free forward with no graph recording (the teacher is frozen)."""
    with T.no_grad():
        tb = patch_embed(img, weights.patch_w, weights.pos, cfg.patch)
        x = tb.tokens
        for params in weights.blocks:
            x = vit_block_forward(x, params)
    return TokenBatch(x, tb.grid)


def plain_forward(img, weights: ModelWeights, cfg: EncoderConfig) -> TokenBatch:
    """Routing-free forward that records the graph (teacher pretraining)."""
    tb = patch_embed(img, weights.patch_w, weights.pos, cfg.patch)
    x = tb.tokens
    for params in weights.blocks:
        x = vit_block_forward(x, params)
    return TokenBatch(x, tb.grid)


def decode_alpha(tb: TokenBatch, dec: DecoderParams) -> Tensor:
    """Upsample token features to a full-resolution alpha matte [B, H, W] in (0, 1)."""
    x = tb.tokens
    B, N, D = x.shape
    Hp, Wp = tb.grid
    s1, s2 = dec.stride1, dec.stride2
    mid = dec.w1.shape[1] // (s1 * s1)
    h = T.reshape(T.linear(x, dec.w1, dec.b1), (B, Hp, Wp, s1, s1, mid))
    h = T.reshape(T.transpose(h, (0, 1, 3, 2, 4, 5)), (B, Hp * s1, Wp * s1, mid))
    h = T.gelu(h)
    h = T.reshape(T.linear(h, dec.w2, dec.b2), (B, Hp * s1, Wp * s1, s2, s2))
    h = T.reshape(T.transpose(h, (0, 1, 3, 2, 4)), (B, Hp * s1 * s2, Wp * s1 * s2))
    return T.sigmoid(h)
