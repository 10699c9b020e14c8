"""Self-check suites run by ``memroute verify``.

Each check compares the implementation against an independent reference
(plain loops, closed forms, or finite differences) and reports the measured
value next to its threshold.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from typing import Callable, Iterable, List

import numpy as np

from memroute import tensor as T
from memroute.attention import AttentionParams, attend, attention_cost
from memroute.batr import (
    apply_topk_cap,
    compute_gamma,
    decide_train,
    export_masks,
    read_mask,
    relaxed_straight_through,
)
from memroute.encoder import (
    EncoderConfig,
    block_forward,
    decode_alpha,
    encoder_forward,
    init_student,
    init_teacher,
    teacher_forward,
    trainable,
    vit_block_forward,
)
from memroute.objectives import compress_loss, distill_loss, matting_loss, total_loss
from memroute.router import RouterParams, route_probs
from memroute.tensor import Tensor

SUITES = ("grad", "oracle", "routing")


@dataclass
class Check:
    name: str
    measured: float
    threshold: float
    passed: bool
    relation: str = "<"

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: measured={self.measured!r} threshold {self.relation} {self.threshold!r}"


def _below(name: str, value: float, threshold: float) -> Check:
    return Check(name, float(value), threshold, bool(value < threshold))


def _at_most(name: str, value: float, threshold: float) -> Check:
    return Check(name, float(value), threshold, bool(value <= threshold), "<=")


def tiny_config(**overrides) -> EncoderConfig:
    """64x64 input, 16x16 patches, D=32, two heads, two routed blocks."""
    base = dict(img_size=(64, 64), patch=16, embed_dim=32, heads=2, depth=2)
    base.update(overrides)
    return EncoderConfig(**base)


def _tiny_images(rng: np.random.Generator, batch: int = 2) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(batch, 3, 64, 64))


# ---------------------------------------------------------------------------
# grad suite
# ---------------------------------------------------------------------------

def full_loss_grad_errors(seed: int = 0, max_coords: int = 4) -> dict:
    """Per-parameter relative gradient error of the complete training loss.

    Tiny f64 model, frozen Gumbel noise, straight-through gate relaxed so the
    forward is smooth in the router outputs. The router's output layer is
    drawn wider than its training init so routing gradients are not tiny.
    """
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    teacher = init_teacher(cfg, seed, "f64")
    for p in trainable(teacher).values():
        p.requires_grad = False
    student = init_student(cfg, teacher, seed)
    for m in cfg.routed:
        w2 = student.blocks[m].router.w2
        w2.data = rng.uniform(-0.5, 0.5, size=w2.shape)
    images = _tiny_images(rng)
    alphas = rng.uniform(0.0, 1.0, size=(2, 64, 64))
    f_t = teacher_forward(images, teacher, cfg).tokens.data

    def loss_fn() -> Tensor:
        feats, record = encoder_forward(images, student, cfg, mode="train",
                                        rng=np.random.default_rng([seed, 99]))
        pred = decode_alpha(feats, student.decoder)
        return total_loss(matting_loss(pred, alphas), distill_loss(f_t, feats.tokens),
                          compress_loss(record.gamma_soft, cfg.routing.rho)).total

    with relaxed_straight_through():
        return T.grad_check_params(loss_fn, trainable(student), max_coords=max_coords, seed=seed)


def _op_grad_errors(rng: np.random.Generator) -> dict:
    def rand(*shape):
        return Tensor(rng.normal(size=shape))

    w = rand(4, 3)
    g = Tensor(rng.uniform(0.5, 1.5, size=4))
    kern = rand(2, 3, 3)
    c1, c2 = rand(2, 5), rand(2, 5)
    cases = {
        "matmul": (lambda x: T.sum(T.square(T.matmul(x, w))), rand(2, 4)),
        "softmax": (lambda x: T.sum(T.mul(T.softmax(x), c1)), rand(2, 5)),
        "log_softmax": (lambda x: T.sum(T.mul(T.log_softmax(x), c2)), rand(2, 5)),
        "layer_norm": (lambda x: T.sum(T.square(T.layer_norm(x, g, g))), rand(3, 4)),
        "gelu": (lambda x: T.sum(T.gelu(x)), rand(10)),
        "depthwise_conv2d": (lambda x: T.sum(T.square(T.depthwise_conv2d(x, kern))), rand(1, 2, 4, 4)),
        "sigmoid": (lambda x: T.sum(T.sigmoid(x)), rand(10)),
    }
    return {name: T.grad_check(f, x) for name, (f, x) in cases.items()}


def grad_suite(seed: int = 0) -> List[Check]:
    rng = np.random.default_rng(seed)
    checks = [_below(f"op-grad/{k}", v, 1e-6) for k, v in _op_grad_errors(rng).items()]

    gamma = Tensor(np.array(0.6))
    err = T.grad_check(lambda g: compress_loss(g, 0.25), gamma)
    checks.append(_below("compress-loss-grad", err, 1e-6))

    errors = full_loss_grad_errors(seed)
    worst = max(errors.values())
    checks.append(_below(f"full-loss-grad ({len(errors)} parameter groups)", worst, 1e-4))
    return checks


# ---------------------------------------------------------------------------
# oracle suite
# ---------------------------------------------------------------------------

def _naive_attention(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    """Per-sample, per-head loop with explicit softmax rows."""
    B, N, D = x.shape
    h, dh = p.heads, p.head_dim
    out = np.zeros_like(x)
    for b in range(B):
        q, k, v = x[b] @ p.w_q.data, x[b] @ p.w_k.data, x[b] @ p.w_v.data
        heads = []
        for j in range(h):
            sl = slice(j * dh, (j + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            scores = scores - scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            heads.append(probs @ v[:, sl])
        out[b] = np.concatenate(heads, axis=1) @ p.w_o.data
    return out


def _naive_router(x: np.ndarray, r: RouterParams) -> np.ndarray:
    out = np.zeros(x.shape[:2] + (2,))
    D = x.shape[-1]
    for b in range(x.shape[0]):
        mu = x[b].mean(axis=1, keepdims=True)
        var = ((x[b] - mu) ** 2).mean(axis=1, keepdims=True)
        z = ((x[b] - mu) / np.sqrt(var + 1e-6) * r.ln_gain.data + r.ln_bias.data) @ r.w1.data + r.b1.data
        shared = z[:, D // 2:].mean(axis=0)
        for i in range(x.shape[1]):
            logits = np.concatenate([z[i, :D // 2], shared]) @ r.w2.data + r.b2.data
            out[b, i] = logits - np.log(np.exp(logits).sum())
    return out


def oracle_suite(seed: int = 0) -> List[Check]:
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    checks = []

    teacher = init_teacher(cfg, seed, "f64")
    student = init_student(cfg, teacher, seed)
    images = _tiny_images(rng)
    full, _ = encoder_forward(images, student, cfg, force=1)
    ref = teacher_forward(images, teacher, cfg)
    checks.append(_at_most("full-routing encoder == plain ViT (f64)",
                           np.abs(full.tokens.data - ref.tokens.data).max(), 1e-12))

    x = Tensor(rng.normal(size=(2, 16, 32)))
    routed, _ = block_forward(x, cfg.grid, student.blocks[0], force=1)
    plain = vit_block_forward(x, student.blocks[0])
    checks.append(_at_most("full-routing block == plain block (f64)",
                           np.abs(routed.data - plain.data).max(), 1e-12))

    attn = AttentionParams.init(32, 2, rng, "f64")
    checks.append(_below("attention vs per-head loop",
                         np.abs(attend(x, attn).data - _naive_attention(x.data, attn)).max(), 1e-10))

    router = RouterParams.init(32, rng, "f64")
    router.w2.data = rng.normal(size=(32, 2))
    checks.append(_below("router vs straight-line oracle",
                         np.abs(route_probs(x, router).data - _naive_router(x.data, router)).max(), 1e-10))

    n, h = 4096, 6
    full_bytes, _ = attention_cost(n, h, 384)
    checks.append(_at_most("attention map bytes - 4*h*N^2", abs(full_bytes - 4 * h * n * n), 0))
    quarter, _ = attention_cost(n // 4, h, 384)
    checks.append(_at_most("map-bytes ratio at r=0.25 minus 1/16", abs(quarter / full_bytes - 1 / 16), 0))
    return checks


# ---------------------------------------------------------------------------
# routing suite
# ---------------------------------------------------------------------------

def gumbel_frequency(p1: float = 0.9, draws: int = 10_000, tau: float = 1.0, seed: int = 0) -> float:
    log_p = Tensor(np.log(np.tile([1 - p1, p1], (draws, 1))))
    dec = decide_train(log_p, tau, rng=np.random.default_rng(seed))
    return float(dec.hard.mean())


def routing_suite(seed: int = 0) -> List[Check]:
    checks = []
    freq = gumbel_frequency(seed=seed)
    checks.append(_at_most("gumbel hard frequency |f - 0.9|", abs(freq - 0.9), 0.02))

    log_p = np.log(np.array([[0.4, 0.6], [0.1, 0.9], [0.3, 0.7], [0.3, 0.7], [0.8, 0.2]]))
    capped = apply_topk_cap(log_p, np.array([1, 1, 1, 1, 0]), 2)
    checks.append(_at_most("top-k cap keeps highest p1, ties to lower index",
                           int(np.abs(capped - np.array([0, 1, 1, 0, 0])).sum()), 0))

    cfg = tiny_config()
    teacher = init_teacher(cfg, seed, "f64")
    student = init_student(cfg, teacher, seed)
    for m in cfg.routed:
        student.blocks[m].router.w2.data = np.random.default_rng([seed, m]).normal(size=(32, 2))
    images = _tiny_images(np.random.default_rng(seed))
    _, record = encoder_forward(images, student, cfg)
    with tempfile.TemporaryDirectory() as tmp:
        paths = export_masks(record.decisions, cfg.grid, tmp, record.blocks)
        masks = np.stack([read_mask(p).reshape(-1) for p in paths])
    checks.append(_at_most("gamma from exported masks - recorded gamma",
                           abs(compute_gamma(masks) - record.gamma), 0))
    return checks


RUNNERS = {"grad": grad_suite, "oracle": oracle_suite, "routing": routing_suite}


def run(suites: Iterable[str], seed: int = 0, emit: Callable[[str], None] = print) -> bool:
    """Run the named suites, printing one line per check. True iff all pass."""
    ok = True
    for suite in suites:
        for check in RUNNERS[suite](seed):
            emit(f"[{suite}] {check.line()}")
            ok = ok and check.passed
    return ok
