"""Checkpoints: one MRT1 file per parameter plus a versioned JSON manifest."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from memroute import config as cfgmod
from memroute.encoder import ModelWeights, init_student, init_teacher, named_parameters
from memroute.errors import FormatError, ShapeError
from memroute.tensor import mrt

FORMAT = "memroute-ckpt-1"
MANIFEST = "manifest.json"
ROLES = ("teacher", "student")


def save(out_dir, weights: ModelWeights, run_cfg: cfgmod.RunConfig, role: str, extra=None) -> Path:
    """Write ``weights`` to ``out_dir``. Returns the manifest path."""
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for name, tensor in named_parameters(weights):
        fname = f"{name}.mrt"
        mrt.save(out_dir / fname, tensor.data)
        files[name] = fname
    manifest = {
        "format": FORMAT,
        "role": role,
        "config": cfgmod.to_dict(run_cfg),
        "params": files,
    }
    if extra:
        manifest["extra"] = extra
    path = out_dir / MANIFEST
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(ckpt_dir) -> dict:
    path = Path(ckpt_dir) / MANIFEST
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"no checkpoint manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise FormatError(f"{path}: expected format {FORMAT!r}, got {manifest.get('format')!r}")
    if manifest.get("role") not in ROLES:
        raise FormatError(f"{path}: unknown role {manifest.get('role')!r}")
    return manifest


def load(ckpt_dir) -> tuple:
    """Load a checkpoint. Returns ``(weights, run_config, role)``.

    A skeleton with the recorded architecture is built and every tensor is
    replaced from disk; names and shapes must match exactly.
    """
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    run_cfg = cfgmod.parse_config(manifest["config"])
    enc, role = run_cfg.encoder, manifest["role"]
    weights = init_teacher(enc, 0, run_cfg.train.dtype)
    if role == "student":
        weights = init_student(enc, weights, 0)
    params = dict(named_parameters(weights))
    files = manifest["params"]
    missing = sorted(set(params) - set(files))
    unexpected = sorted(set(files) - set(params))
    if missing or unexpected:
        raise FormatError(f"checkpoint parameters differ: missing {missing}, unexpected {unexpected}")
    for name, tensor in params.items():
        arr = mrt.load(ckpt_dir / files[name]).data
        if arr.shape != tensor.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != expected {tensor.shape}")
        tensor.data = np.asarray(arr, dtype=tensor.data.dtype, order="C")
        tensor.grad = None
        tensor.requires_grad = role == "student"
    return weights, run_cfg, role
