"""Alpha compositing, procedural toy mattes, the loss stack, and matting metrics."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from memroute import netpbm
from memroute import tensor as T
from memroute.errors import ShapeError
from memroute.tensor import Tensor, mrt

DATA_FORMAT = "memroute-data-1"
_SUPERSAMPLE = 4


def composite(fg, bg, alpha) -> np.ndarray:
    """``I = alpha * F + (1 - alpha) * B`` per pixel.

    ``fg``/``bg`` are [..., C, H, W]; ``alpha`` is [..., H, W] and broadcasts over channels.
    """
    f, b, a = (np.asarray(v.data if isinstance(v, Tensor) else v) for v in (fg, bg, alpha))
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    if f.shape != b.shape or f.shape[-2:] != a.shape[-2:]:
        raise ShapeError(f"fg {f.shape}, bg {b.shape}, alpha {a.shape} do not line up")
    a = a[..., None, :, :]
    return a * f + (1.0 - a) * b


@dataclass
class CompositeSample:
    fg: np.ndarray  # [C, H, W]
    bg: np.ndarray  # [C, H, W]
    alpha: np.ndarray  # [H, W]
    image: np.ndarray  # [C, H, W]


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    pos = np.linspace(0.0, n_in - 1, n_out)
    lo = np.clip(np.floor(pos).astype(int), 0, max(n_in - 2, 0))
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    if n_in > 1:
        m[np.arange(n_out), lo + 1] += frac
    return m


def smooth_noise(rng: np.random.Generator, size: int, channels: int = 3, cells: int = 4) -> np.ndarray:
    """Random low-frequency colour field in [0, 1], shape [C, size, size]."""
    coarse = rng.random((channels, cells, cells))
    A = _bilinear_matrix(size, cells)
    return np.clip(np.einsum("ij,cjk,lk->cil", A, coarse, A), 0.0, 1.0)


def _subpixel_grid(size: int) -> tuple:
    s = _SUPERSAMPLE
    offs = (np.arange(s) + 0.5) / s
    coords = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    return np.meshgrid(coords, coords, indexing="ij")


def _coverage(inside: np.ndarray, size: int) -> np.ndarray:
    s = _SUPERSAMPLE
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def disk_alpha(size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    """Anti-aliased opaque disk: exact pixel coverage by 4x4 supersampling."""
    yy, xx = _subpixel_grid(size)
    return _coverage(((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2, size)


def polygon_alpha(size: int, vertices: np.ndarray) -> np.ndarray:
    """Anti-aliased convex polygon (vertices in counter-clockwise angular order)."""
    yy, xx = _subpixel_grid(size)
    inside = np.ones_like(yy, dtype=bool)
    n = len(vertices)
    for i in range(n):
        (y0, x0), (y1, x1) = vertices[i], vertices[(i + 1) % n]
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        inside &= cross >= 0
    return _coverage(inside, size)


def _easy_alpha(rng: np.random.Generator, size: int) -> np.ndarray:
    c = size / 2
    if rng.random() < 0.5:
        r = rng.uniform(0.2, 0.42) * size
        return disk_alpha(size, c + rng.uniform(-0.1, 0.1) * size, c + rng.uniform(-0.1, 0.1) * size, r)
    k = int(rng.integers(3, 7))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    radii = rng.uniform(0.25, 0.45, size=k) * size
    verts = np.stack([c + radii * np.sin(angles), c + radii * np.cos(angles)], axis=1)
    return polygon_alpha(size, verts)


def _hard_alpha(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    kind = int(rng.integers(0, 3))
    if kind == 0:  # radial gradient
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        r = np.hypot(yy - cy, xx - cx)
        R = rng.uniform(0.3, 0.6) * size
        return np.clip(1.0 - r / R, 0.0, 1.0)
    if kind == 1:  # linear ramp across a random direction
        theta = rng.uniform(0, 2 * np.pi)
        t = (np.cos(theta) * (xx - size / 2) + np.sin(theta) * (yy - size / 2)) / size
        width = rng.uniform(0.3, 0.8)
        return np.clip(0.5 + t / width, 0.0, 1.0)
    # soft-edged blobs: smoothstep of a Gaussian mixture field
    field = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        s = rng.uniform(0.08, 0.2) * size
        field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    t = np.clip((field - 0.3) / 0.5, 0.0, 1.0)
    return t * t * (3 - 2 * t)


def gen_toy_sample(rng: np.random.Generator, size: int, difficulty: str = "easy",
                   channels: int = 3) -> CompositeSample:
    """Procedural matte composited over random smooth foreground/background fields."""
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    fg = smooth_noise(rng, size, channels)
    bg = smooth_noise(rng, size, channels)
    alpha = _easy_alpha(rng, size) if difficulty == "easy" else _hard_alpha(rng, size)
    return CompositeSample(fg, bg, alpha, composite(fg, bg, alpha))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def distill_loss(f_teacher, f_student: Tensor, reduction: str = "channel-mean") -> Tensor:
    """Token-mean squared feature distance between teacher and student.

    ``channel-mean`` averages over the channel axis as well (default);
    ``token-mean`` sums squared differences over channels and averages over
    tokens only. Both average over the batch. The teacher side is a constant.
    """
    ft = f_teacher.data if isinstance(f_teacher, Tensor) else np.asarray(f_teacher)
    if ft.shape != f_student.shape:
        raise ShapeError(f"teacher {ft.shape} vs student {f_student.shape}")
    sq = T.square(T.sub(f_student, Tensor(ft.astype(f_student.data.dtype))))
    if reduction == "channel-mean":
        return T.mean(sq)
    if reduction == "token-mean":
        return T.mean(T.sum(sq, axis=-1))
    raise ValueError(f"unknown distill reduction {reduction!r}")


def compress_loss(gamma, rho: float):
    """``(rho - gamma)^2``; differentiable when ``gamma`` is a tensor."""
    if isinstance(gamma, Tensor):
        return T.square(T.sub(rho, gamma))
    return (rho - float(gamma)) ** 2


def matting_loss(pred: Tensor, true) -> Tensor:
    """Mean absolute alpha error (L1); a stand-in for the full matting loss."""
    t = true.data if isinstance(true, Tensor) else np.asarray(true)
    if t.shape != pred.shape:
        raise ShapeError(f"pred {pred.shape} vs true {t.shape}")
    return T.mean(T.abs(T.sub(pred, Tensor(t.astype(pred.data.dtype)))))


@dataclass
class LossBreakdown:
    matting: Tensor
    distill: Tensor
    compress: Tensor
    total: Tensor

    def values(self) -> dict:
        return {k: getattr(self, k).item() for k in ("matting", "distill", "compress", "total")}


def total_loss(matting: Tensor, distill: Tensor, compress: Tensor,
               weights: tuple = (1.0, 1.0, 1.0)) -> LossBreakdown:
    """Unweighted sum by default; optional multipliers per term."""
    wm, wd, wc = weights
    terms = []
    for w, t in ((wm, matting), (wd, distill), (wc, compress)):
        terms.append(t if w == 1.0 else T.mul(t, float(w)))
    total = T.add(T.add(terms[0], terms[1]), terms[2])
    return LossBreakdown(matting, distill, compress, total)


def metrics_sad_mse(pred, true) -> tuple:
    """Raw SAD (sum |diff|) and MSE (mean diff^2) between two mattes.

    Conventional reporting divides SAD by 1000 and multiplies MSE by 1000; see
    :func:`reported_metrics`.
    """
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    t = np.asarray(true.data if isinstance(true, Tensor) else true, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"pred {p.shape} vs true {t.shape}")
    diff = p - t
    return float(np.abs(diff).sum()), float((diff * diff).mean())


def reported_metrics(pred, true) -> tuple:
    sad, mse = metrics_sad_mse(pred, true)
    return sad / 1000.0, mse * 1000.0


# ---------------------------------------------------------------------------
# on-disk sample sets
# ---------------------------------------------------------------------------

def sample_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1, np.uint64)[0])


def _hwc(x: np.ndarray) -> np.ndarray:
    return netpbm.to_uint8(np.transpose(x, (1, 2, 0)))


def write_dataset(out_dir, count: int, size: int, difficulty: str, seed: int) -> dict:
    """Generate ``count`` samples into ``out_dir`` and write ``index.json``."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    entries = []
    for i in range(count):
        s = sample_seed(seed, i)
        smp = gen_toy_sample(np.random.default_rng(s), size, difficulty)
        stem = f"sample_{i:04d}"
        files = {
            "image": f"{stem}_image.ppm",
            "fg": f"{stem}_fg.ppm",
            "bg": f"{stem}_bg.ppm",
            "alpha": f"{stem}_alpha.pgm",
            "alpha_f32": f"{stem}_alpha.mrt",
        }
        netpbm.write(out / files["image"], _hwc(smp.image))
        netpbm.write(out / files["fg"], _hwc(smp.fg))
        netpbm.write(out / files["bg"], _hwc(smp.bg))
        netpbm.write(out / files["alpha"], netpbm.to_uint8(smp.alpha))
        mrt.save(out / files["alpha_f32"], Tensor(smp.alpha, dtype="f32"))
        entries.append({"id": i, "seed": s, **files})
    index = {
        "format": DATA_FORMAT,
        "count": count,
        "size": size,
        "difficulty": difficulty,
        "seed": seed,
        "samples": entries,
    }
    with open(out / "index.json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return index


def load_image(path, dtype=np.float32) -> np.ndarray:
    """Read a PPM as a [C, H, W] float image in [0, 1]."""
    arr = netpbm.read(path)
    if arr.ndim != 3:
        raise ShapeError(f"{path} is not an RGB (P6) image")
    return np.transpose(netpbm.to_float(arr, dtype), (2, 0, 1))


def load_dataset(data_dir, dtype=np.float32, limit: Optional[int] = None) -> tuple:
    """Return ``(images [S,C,H,W], alphas [S,H,W], index)`` for a generated set."""
    root = Path(data_dir)
    with open(root / "index.json") as fh:
        index = json.load(fh)
    if index.get("format") != DATA_FORMAT:
        raise ValueError(f"{root / 'index.json'} is not a {DATA_FORMAT} index")
    entries = index["samples"][:limit] if limit is not None else index["samples"]
    if not entries:
        raise ValueError(f"dataset {root} has no samples")
    images = np.stack([load_image(root / e["image"], dtype) for e in entries])
    alphas = np.stack([mrt.load(root / e["alpha_f32"]).data.astype(dtype) for e in entries])
    return images, alphas, index
