"""``memroute`` command line: data generation, training, inference, cost sweeps, self-checks.

Exit codes: 0 ok, 1 check or I/O failure, 2 usage/config/shape error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import tracemalloc
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from memroute import ckpt, netpbm, train, verify
from memroute.attention import AttentionParams, CostReport, attend_subset, attention_cost
from memroute.batr import export_masks
from memroute.config import load_config
from memroute.encoder import init_student
from memroute.errors import ConfigError, FormatError, ShapeError
from memroute.objectives import load_dataset, load_image, write_dataset
from memroute.tensor import Tensor, no_grad
from memroute.tensor.core import resolve_dtype

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
BENCH_HEADER = "H,W,N,ratio,analytic_bytes,measured_bytes,flops"
# attend_subset is only timed/measured up to this many routed tokens
MEASURE_LIMIT = 1024


class UsageError(Exception):
    """Bad flag combination or inconsistent inputs."""


def _write_text(path, text: str) -> None:
    parent = Path(path).parent
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.count < 0 or args.size <= 0:
        raise UsageError("--count must be >= 0 and --size > 0")
    index = write_dataset(args.out, args.count, args.size, args.difficulty, args.seed)
    print(f"wrote {index['count']} samples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be non-negative")
    if (args.teacher is None) == (not args.pretrain_teacher):
        raise UsageError("pass exactly one of --teacher CKPT or --pretrain-teacher")
    run_cfg = load_config(args.config)
    enc, tc = run_cfg.encoder, run_cfg.train
    images, alphas, _ = load_dataset(args.data, dtype=resolve_dtype(tc.dtype))
    if images.shape[1] != enc.in_channels or tuple(images.shape[2:]) != enc.img_size:
        raise ShapeError(f"data images are {images.shape[1:]}, config expects "
                         f"({enc.in_channels}, {enc.img_size[0]}, {enc.img_size[1]})")
    out = Path(args.out)

    if args.pretrain_teacher:
        teacher = train.pretrain_teacher(images, alphas, run_cfg, seed=args.seed)
        ckpt.save(out / "teacher", teacher, run_cfg, "teacher")
    else:
        teacher, t_cfg, role = ckpt.load(args.teacher)
        if role != "teacher":
            raise UsageError(f"{args.teacher} holds a {role} checkpoint, expected a teacher")
        if dataclasses.replace(t_cfg.encoder, routing=enc.routing) != enc:
            raise ConfigError("teacher checkpoint architecture differs from --config")

    student = init_student(enc, teacher, args.seed)
    result = train.train_student(teacher, images, alphas, run_cfg, args.steps, seed=args.seed,
                                 student=student)
    ckpt.save(out, result.student, run_cfg, "student", extra={"steps": args.steps, "seed": args.seed})
    _write_text(out / "train_log.csv", result.log_csv)
    if result.history:
        last = result.history[-1]
        print(f"step {args.steps - 1}: total={last['total']!r} gamma_hard={last['gamma_hard']!r}")
    print(f"checkpoint written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def cmd_infer(args) -> int:
    weights, run_cfg, role = ckpt.load(args.ckpt)
    enc = run_cfg.encoder
    if args.max_tokens is not None:
        if args.max_tokens < 0:
            raise UsageError("--max-tokens must be non-negative")
        enc = dataclasses.replace(enc, routing=dataclasses.replace(enc.routing, max_tokens=args.max_tokens))
    if role != "student":
        enc = dataclasses.replace(enc, routed_blocks=())
    run_cfg = dataclasses.replace(run_cfg, encoder=enc)

    dtype = weights.patch_w.data.dtype
    image = load_image(args.image, dtype)
    if image.shape[0] != enc.in_channels or tuple(image.shape[1:]) != enc.img_size:
        raise ShapeError(f"image is {image.shape[1]}x{image.shape[2]} with {image.shape[0]} channels; "
                         f"checkpoint expects {enc.img_size[0]}x{enc.img_size[1]} with {enc.in_channels}")
    alpha, record = train.predict(weights, image[None], run_cfg)
    netpbm.write(args.out_alpha, netpbm.to_uint8(alpha[0]))

    if args.export_masks:
        export_masks(record.decisions, enc.grid, args.export_masks, record.blocks)

    n = enc.num_tokens
    counts = record.counts[0] if record.blocks else []
    print("block,gamma")
    for blk, c in zip(record.blocks, counts):
        print(f"{blk},{int(c) / n!r}")
    print(f"all,{record.gamma!r}")
    report = CostReport.from_counts(counts, enc.heads, enc.embed_dim, dtype.itemsize, record.blocks)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-cost
# ---------------------------------------------------------------------------

def _parse_resolutions(text: str) -> List[tuple]:
    out = []
    for item in text.split(","):
        item = item.strip().lower()
        if not item:
            continue
        try:
            h, w = (int(v) for v in item.split("x")) if "x" in item else (int(item), int(item))
        except ValueError:
            raise UsageError(f"bad resolution {item!r}; use S or HxW") from None
        out.append((h, w))
    if not out:
        raise UsageError("--resolutions is empty")
    return out


def _parse_ratios(text: str) -> List[float]:
    try:
        ratios = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad ratio list {text!r}") from None
    if not ratios or any(not 0 <= r <= 1 for r in ratios):
        raise UsageError("ratios must lie in [0, 1]")
    return ratios


def measure_attention_peak(n_routed: int, n_total: int, heads: int, dim: int, seed: int = 0) -> int:
    """Peak bytes traced while attend_subset processes ``n_routed`` of ``n_total`` f32 tokens."""
    rng = np.random.default_rng([seed, n_total, n_routed])
    params = AttentionParams.init(dim, heads, rng, "f32")
    x = Tensor(rng.normal(size=(1, n_total, dim)), dtype="f32")
    idx = [np.sort(rng.choice(n_total, size=n_routed, replace=False))]
    with no_grad():
        tracemalloc.start()
        try:
            tracemalloc.reset_peak()
            attend_subset(x, idx, params)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
    return int(peak)


def cmd_bench_cost(args) -> int:
    enc = load_config(args.config).encoder
    resolutions = _parse_resolutions(args.resolutions)
    ratios = _parse_ratios(args.ratios)
    lines = [BENCH_HEADER]
    for h, w in resolutions:
        if h % enc.patch or w % enc.patch:
            raise ShapeError(f"resolution {h}x{w} is not divisible into {enc.patch}x{enc.patch} patches")
        n = (h // enc.patch) * (w // enc.patch)
        for r in ratios:
            n_routed = int(round(r * n))
            nbytes, flops = attention_cost(n_routed, enc.heads, enc.embed_dim, 4)
            measured = ""
            if 0 < n_routed <= MEASURE_LIMIT:
                measured = str(measure_attention_peak(n_routed, n, enc.heads, enc.embed_dim))
            lines.append(f"{h},{w},{n},{r!r},{nbytes},{measured},{flops}")
    text = "\n".join(lines) + "\n"
    _write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    suites = verify.SUITES if args.suite == "all" else (args.suite,)
    failed = []

    def emit(line: str) -> None:
        print(line)
        if " FAIL " in f" {line} " and not failed:
            failed.append(line)

    ok = verify.run(suites, seed=args.seed, emit=emit)
    if not ok:
        print(f"first failing check: {failed[0]}", file=sys.stderr)
        return EXIT_FAIL
    print("all checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memroute", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write procedural composites (PPM/PGM/MRT1 + index.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--difficulty", choices=("easy", "hard"), default="easy")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="distil a frozen teacher into a routed student")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON config (kebab-case keys)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--teacher", default=None, help="teacher checkpoint directory")
    p.add_argument("--pretrain-teacher", action="store_true",
                   help="first fit a routing-free teacher on the same data")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict an alpha matte",
                       description="Predict an alpha matte. Prints per-block gamma and the "
                                   "attention cost report as CSV. SAD is reported elsewhere as "
                                   "sum|diff|/1000 and MSE as mean(diff^2)*1000.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input PPM (P6)")
    p.add_argument("--out-alpha", required=True, help="output PGM (P5)")
    p.add_argument("--max-tokens", type=int, default=None, help="cap on attention tokens per block")
    p.add_argument("--export-masks", default=None, metavar="DIR", help="write routing masks here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench-cost", help="analytic and measured attention memory sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--resolutions", default="64,128,256,512", help="comma list of S or HxW")
    p.add_argument("--ratios", default="1,0.5,0.25")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_cost)

    p = sub.add_parser("verify", help="run built-in self-check suites")
    p.add_argument("--suite", choices=verify.SUITES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ShapeError) as exc:
        print(f"memroute {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError, ValueError) as exc:
        print(f"memroute {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
