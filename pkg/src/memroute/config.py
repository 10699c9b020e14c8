"""JSON run configuration with flat kebab-case keys.

Every key is optional; missing keys take the defaults below. Unknown keys
raise :class:`ConfigError` naming the key.

Encoder keys: ``img-size`` (int or [H, W]), ``patch``, ``in-channels``,
``embed-dim``, ``heads``, ``depth``, ``mlp-ratio``, ``routed-blocks``
(list of block indices, null for all).

Routing keys: ``rho`` (target attention fraction), ``tau`` (Gumbel-Softmax
temperature), ``max-tokens`` (inference cap per block, null for none).

Training keys: ``optimizer`` ("adam" or "sgd"), ``lr``, ``betas``,
``momentum``, ``batch-size``, ``matting-weight``, ``distill-weight``,
``compress-weight``, ``distill-reduction`` ("channel-mean" or
"token-mean"), ``teacher-steps``, ``teacher-lr``, ``dtype`` ("f32"/"f64").
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Optional

from memroute.batr import RoutingConfig
from memroute.encoder import EncoderConfig
from memroute.errors import ConfigError
from memroute.tensor.core import resolve_dtype


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    momentum: float = 0.9
    batch_size: int = 8
    matting_weight: float = 1.0
    distill_weight: float = 1.0
    compress_weight: float = 1.0
    distill_reduction: str = "channel-mean"
    teacher_steps: int = 200
    teacher_lr: float = 3e-3
    dtype: str = "f32"

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer: expected 'adam' or 'sgd', got {self.optimizer!r}")
        if not self.lr > 0 or not self.teacher_lr > 0:
            raise ConfigError("lr and teacher-lr must be positive")
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas: expected two values in [0, 1), got {self.betas}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch-size must be positive, got {self.batch_size}")
        if self.distill_reduction not in ("channel-mean", "token-mean"):
            raise ConfigError(f"distill-reduction: unknown value {self.distill_reduction!r}")
        if self.teacher_steps < 0:
            raise ConfigError("teacher-steps must be non-negative")
        try:
            resolve_dtype(self.dtype)
        except TypeError as exc:
            raise ConfigError(f"dtype: {exc}") from None


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


_ENCODER_KEYS = {
    "img-size": "img_size",
    "patch": "patch",
    "in-channels": "in_channels",
    "embed-dim": "embed_dim",
    "heads": "heads",
    "depth": "depth",
    "mlp-ratio": "mlp_ratio",
    "routed-blocks": "routed_blocks",
}
_ROUTING_KEYS = {"rho": "rho", "tau": "tau", "max-tokens": "max_tokens"}
_TRAIN_KEYS = {
    "optimizer": "optimizer",
    "lr": "lr",
    "betas": "betas",
    "momentum": "momentum",
    "batch-size": "batch_size",
    "matting-weight": "matting_weight",
    "distill-weight": "distill_weight",
    "compress-weight": "compress_weight",
    "distill-reduction": "distill_reduction",
    "teacher-steps": "teacher_steps",
    "teacher-lr": "teacher_lr",
    "dtype": "dtype",
}
KNOWN_KEYS = frozenset(_ENCODER_KEYS) | frozenset(_ROUTING_KEYS) | frozenset(_TRAIN_KEYS)


def _build(cls, table: Mapping[str, str], raw: Mapping[str, Any], **extra):
    kwargs = {table[k]: v for k, v in raw.items() if k in table}
    try:
        return cls(**kwargs, **extra)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(raw: Mapping[str, Any]) -> RunConfig:
    """Validate a decoded JSON object and build the run configuration."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a JSON object")
    for key in raw:
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    routing = _build(RoutingConfig, _ROUTING_KEYS, raw)
    encoder = _build(EncoderConfig, _ENCODER_KEYS, raw, routing=routing)
    train = _build(TrainConfig, _TRAIN_KEYS, raw)
    return RunConfig(encoder=encoder, train=train)


def encoder_to_dict(cfg: EncoderConfig) -> dict:
    r = cfg.routing
    return {
        "img-size": list(cfg.img_size),
        "patch": cfg.patch,
        "in-channels": cfg.in_channels,
        "embed-dim": cfg.embed_dim,
        "heads": cfg.heads,
        "depth": cfg.depth,
        "mlp-ratio": cfg.mlp_ratio,
        "routed-blocks": None if cfg.routed_blocks is None else list(cfg.routed_blocks),
        "rho": r.rho,
        "tau": r.tau,
        "max-tokens": r.max_tokens,
    }


def to_dict(cfg: RunConfig) -> dict:
    out = encoder_to_dict(cfg.encoder)
    t = asdict(cfg.train)
    for key, attr in _TRAIN_KEYS.items():
        out[key] = list(t[attr]) if attr == "betas" else t[attr]
    return out


def load_config(path: Optional[str]) -> RunConfig:
    """Read a JSON config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw)


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"
