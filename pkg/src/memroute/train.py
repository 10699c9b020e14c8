"""Optimizers, teacher pretraining and student distillation training."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from memroute import tensor as T
from memroute.config import RunConfig, TrainConfig
from memroute.encoder import (
    ModelWeights,
    decode_alpha,
    encoder_forward,
    init_student,
    init_teacher,
    plain_forward,
    set_requires_grad,
    teacher_forward,
    trainable,
)
from memroute.objectives import (
    compress_loss,
    distill_loss,
    matting_loss,
    metrics_sad_mse,
    total_loss,
)
from memroute.tensor import Tensor

LOG_HEADER = "step,matting,distill,compress,total,gamma_hard"


class Adam:
    """Adam with bias correction."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class SGD:
    """SGD with heavy-ball momentum."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-2, momentum: float = 0.9):
        self.params = dict(params)
        self.lr, self.momentum = lr, momentum
        self.buf = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.buf[k] = self.momentum * self.buf[k] + p.grad
            p.data = (p.data - self.lr * self.buf[k]).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def make_optimizer(params: Mapping[str, Tensor], tc: TrainConfig, lr: Optional[float] = None):
    lr = tc.lr if lr is None else lr
    if tc.optimizer == "adam":
        return Adam(params, lr=lr, betas=tc.betas)
    return SGD(params, lr=lr, momentum=tc.momentum)


def batch_indices(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    """Sorted random subset (the whole set when ``batch >= n``)."""
    if batch >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch, replace=False))


def format_row(step: int, values: Mapping[str, float], gamma: float) -> str:
    cols = [values[k] for k in ("matting", "distill", "compress", "total")]
    return ",".join([str(step)] + [repr(float(v)) for v in cols] + [repr(float(gamma))])


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

def pretrain_teacher(images: np.ndarray, alphas: np.ndarray, run_cfg: RunConfig,
                     steps: Optional[int] = None, seed: int = 0) -> ModelWeights:
    """Fit a plain ViT plus decoder on the matting loss alone, then freeze it."""
    cfg, tc = run_cfg.encoder, run_cfg.train
    steps = tc.teacher_steps if steps is None else steps
    teacher = init_teacher(cfg, seed, tc.dtype)
    opt = make_optimizer(trainable(teacher), tc, lr=tc.teacher_lr)
    rng = np.random.default_rng([seed, 2])
    for _ in range(steps):
        idx = batch_indices(rng, len(images), tc.batch_size)
        pred = decode_alpha(plain_forward(images[idx], teacher, cfg), teacher.decoder)
        loss = matting_loss(pred, alphas[idx])
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    set_requires_grad(teacher, False)
    return teacher


# ---------------------------------------------------------------------------
# student
# ---------------------------------------------------------------------------

def student_losses(student: ModelWeights, teacher: ModelWeights, images: np.ndarray,
                   alphas: np.ndarray, run_cfg: RunConfig, rng: np.random.Generator) -> tuple:
    """Train-mode forward. Returns ``(LossBreakdown, RoutingRecord)``."""
    cfg, tc = run_cfg.encoder, run_cfg.train
    f_t = teacher_forward(images, teacher, cfg)
    f_s, record = encoder_forward(images, student, cfg, mode="train", rng=rng)
    pred = decode_alpha(f_s, student.decoder)
    m = matting_loss(pred, alphas)
    d = distill_loss(f_t.tokens, f_s.tokens, tc.distill_reduction)
    if record.gamma_soft is not None:
        c = compress_loss(record.gamma_soft, cfg.routing.rho)
    else:
        c = Tensor(np.zeros((), dtype=m.data.dtype))
    weights = (tc.matting_weight, tc.distill_weight, tc.compress_weight)
    return total_loss(m, d, c, weights), record


@dataclass
class TrainResult:
    student: ModelWeights
    log_csv: str
    history: list = field(default_factory=list)  # dicts with losses and gamma_hard


def train_student(teacher: ModelWeights, images: np.ndarray, alphas: np.ndarray,
                  run_cfg: RunConfig, steps: int, seed: int = 0,
                  student: Optional[ModelWeights] = None,
                  on_step: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Distil ``teacher`` into a routed student.

    The per-step log records losses and hard gamma from the forward pass that
    produced each update (row ``k`` is measured before update ``k``).
    """
    cfg, tc = run_cfg.encoder, run_cfg.train
    student = init_student(cfg, teacher, seed) if student is None else student
    opt = make_optimizer(trainable(student), tc)
    batch_rng = np.random.default_rng([seed, 3])
    noise_rng = np.random.default_rng([seed, 4])
    buf = io.StringIO()
    buf.write(LOG_HEADER + "\n")
    history = []
    for step in range(steps):
        idx = batch_indices(batch_rng, len(images), tc.batch_size)
        losses, record = student_losses(student, teacher, images[idx], alphas[idx], run_cfg, noise_rng)
        values = losses.values()
        opt.zero_grad()
        T.backward(losses.total)
        opt.step()
        buf.write(format_row(step, values, record.gamma) + "\n")
        entry = {**values, "gamma_hard": record.gamma}
        history.append(entry)
        if on_step is not None:
            on_step(step, entry)
    return TrainResult(student, buf.getvalue(), history)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_losses(student: ModelWeights, teacher: ModelWeights, images: np.ndarray,
                    alphas: np.ndarray, run_cfg: RunConfig, seed: int = 0) -> dict:
    """Train-mode losses and hard gamma on a fixed noise draw, without recording a graph."""
    with T.no_grad():
        losses, record = student_losses(student, teacher, images, alphas, run_cfg,
                                        np.random.default_rng([seed, 5]))
    return {**losses.values(), "gamma_hard": record.gamma}


def predict(weights: ModelWeights, images: np.ndarray, run_cfg: RunConfig) -> tuple:
    """Inference-mode alpha [B, H, W] and the routing record."""
    with T.no_grad():
        feats, record = encoder_forward(images, weights, run_cfg.encoder, mode="infer")
        alpha = decode_alpha(feats, weights.decoder)
    return alpha.data, record


def sad(pred: np.ndarray, true: np.ndarray) -> float:
    return metrics_sad_mse(pred, true)[0]
