"""``normunify`` command line: init, convert, verify, grad-check, bench.

Exit codes: 0 success/pass, 1 verification or gate failure, 2 usage error,
3 I/O or checkpoint format error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from normunify import bench, checkpoint
from normunify.config import Variant, alternating_blocks, small_config, tiny_config
from normunify.convert import ConversionError, UndefinedConversionError, convert
from normunify.model import init_params
from normunify.verify import (
    FDInstabilityError,
    IncompatibleModelsError,
    grad_equivalence_check,
    verify_equivalence,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
INIT_SCALE = 0.02
DTYPES = ("float32", "float64")
_PRESETS = {
    "tiny": dict(d=16, layers=4, heads=2, vocab=64, seq=8),
    "small": dict(d=64, layers=6, heads=4, vocab=256, seq=32),
}


class UsageError(Exception):
    pass


def _variant(text: str) -> Variant:
    try:
        return Variant(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown variant {text!r} (choose from {', '.join(v.value for v in Variant)})"
        ) from None


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="normunify",
        description="Convert between equivalent Pre-LN, Pre-RMSNorm and Pre-CRMSNorm transformers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a randomly initialised checkpoint")
    p.add_argument("--arch", choices=("tiny", "small", "custom"), default="tiny")
    p.add_argument("--d", type=int, help="model width (preset default)")
    p.add_argument("--layers", type=int, help="number of blocks, alternating attn/mlp")
    p.add_argument("--heads", type=int, help="attention heads; must divide d")
    p.add_argument("--vocab", type=int, help="vocabulary size")
    p.add_argument("--seq", type=int, help="maximum sequence length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=DTYPES, default="float64")
    p.add_argument("--variant", type=_variant, default=Variant.PRE_LN)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("convert", help="convert a checkpoint to another variant")
    p.add_argument("--in", dest="src", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--to", required=True, type=_variant)
    p.add_argument("--tol", type=_positive_float, help="zero-mean gate (1e-5 f32, 1e-12 f64)")

    p = sub.add_parser("verify", help="compare logits of two checkpoints")
    p.add_argument("--a", required=True, type=Path)
    p.add_argument("--b", required=True, type=Path)
    p.add_argument("--seqs", type=int, default=16)
    p.add_argument("--seq-len", type=int, help="default: model max_seq")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=_positive_float, help="logit tolerance (1e-4 f32, 1e-10 f64)")
    p.add_argument("--dtype", choices=DTYPES, help="evaluate both models in this dtype")

    p = sub.add_parser("grad-check", help="finite-difference gradient equivalence of a pre-ln model")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--coords", type=int, default=32)
    p.add_argument("--h", type=_positive_float, default=1e-5)
    p.add_argument("--tol", type=_positive_float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="time normalization kernels or full forwards")
    p.add_argument("--kind", choices=("norm-kernels", "forward"), default="norm-kernels")
    p.add_argument("--d", type=int, nargs="+", help="widths (default 16 64 256 1024; forward: preset)")
    p.add_argument("--batch", type=int, nargs="+", default=[1], help="forward batch sizes")
    p.add_argument("--iters", type=int, default=bench.MIN_ITERS)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--rows", type=int, default=64, help="vectors per kernel call")
    p.add_argument("--arch", choices=("tiny", "small"), default="tiny", help="forward preset")
    p.add_argument(
        "--variants",
        type=_variant,
        nargs="+",
        default=[Variant.PRE_LN, Variant.PRE_RMS, Variant.PRE_CRMS],
    )
    p.add_argument("--dtype", choices=DTYPES, default="float32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", type=Path)
    p.add_argument("--allow-short", action="store_true", help="permit fewer than 100 iterations")
    return parser


def _init_config(args):
    dims = dict(_PRESETS["tiny" if args.arch == "custom" else args.arch])
    for key in dims:
        value = getattr(args, key)
        if value is not None:
            dims[key] = value
    for key, value in dims.items():
        if value < (0 if key == "layers" else 1):
            raise UsageError(f"--{key} must be positive, got {value}")
    if dims["d"] < 2:
        raise UsageError("--d must be at least 2")
    if dims["d"] % dims["heads"]:
        raise UsageError(f"--d {dims['d']} is not divisible by --heads {dims['heads']}")
    make = small_config if args.arch == "small" else tiny_config
    base = Variant.POST_LN if args.variant.is_post else Variant.PRE_LN
    return make(
        args.dtype,
        base,
        d=dims["d"],
        blocks=tuple(k.value for k in alternating_blocks(dims["layers"])),
        heads=dims["heads"],
        head_dim=dims["d"] // dims["heads"],
        mlp_dim=4 * dims["d"],
        vocab_size=dims["vocab"],
        max_seq=dims["seq"],
    )


def cmd_init(args) -> int:
    cfg = _init_config(args)
    params = init_params(cfg, args.seed, INIT_SCALE)
    if args.variant is not cfg.variant:
        params, cfg, report = convert(params, cfg, args.variant)
        if not report.passed:
            print(report.to_text(), file=sys.stderr)
            return EXIT_FAIL
    checkpoint.save(params, cfg, args.out)
    print(f"wrote {cfg.variant.value} checkpoint to {args.out} (width {cfg.width}, {len(cfg.blocks)} blocks)")
    return EXIT_OK


def cmd_convert(args) -> int:
    params, cfg = checkpoint.load(args.src)
    try:
        out, out_cfg, report = convert(params, cfg, args.to, args.tol)
    except UndefinedConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ConversionError as exc:
        print(f"conversion failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(report.to_text())
    if not report.passed:
        return EXIT_FAIL
    checkpoint.save(out, out_cfg, args.out)
    (args.out / "conversion.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_verify(args) -> int:
    a, cfg_a = checkpoint.load(args.a)
    b, cfg_b = checkpoint.load(args.b)
    if args.seqs < 1:
        raise UsageError("--seqs must be positive")
    if args.seq_len is not None and not 1 <= args.seq_len <= cfg_a.max_seq:
        raise UsageError(f"--seq-len must be in 1..{cfg_a.max_seq}")
    report = verify_equivalence(
        a, b, cfg_a, cfg_b,
        seed=args.seed, n_seqs=args.seqs, tol=args.tol, seq_len=args.seq_len, dtype=args.dtype,
    )
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_grad_check(args) -> int:
    params, cfg = checkpoint.load(args.model)
    if cfg.variant is not Variant.PRE_LN:
        raise UsageError(f"grad-check needs a pre-ln checkpoint, got {cfg.variant.value}")
    if args.coords < 1:
        raise UsageError("--coords must be positive")
    try:
        report = grad_equivalence_check(
            params, cfg, seed=args.seed, k_coords=args.coords, h=args.h, tol=args.tol
        )
    except FDInstabilityError as exc:
        print(f"FD instability: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_bench(args) -> int:
    if args.iters < bench.MIN_ITERS and not args.allow_short:
        raise UsageError(f"--iters must be >= {bench.MIN_ITERS} unless --allow-short is given")
    if args.iters < 1 or args.warmup < 0 or args.rows < 1 or min(args.batch) < 1:
        raise UsageError("--iters, --rows and --batch must be positive; --warmup non-negative")
    if args.kind == "norm-kernels":
        d_list = args.d or [16, 64, 256, 1024]
        if min(d_list) < 2:
            raise UsageError("--d values must be at least 2")
        results = bench.bench_norm_kernels(
            d_list, rows=args.rows, iters=args.iters, warmup=args.warmup,
            dtype=args.dtype, seed=args.seed, allow_short=args.allow_short,
        )
    else:
        make = small_config if args.arch == "small" else tiny_config
        base = make(args.dtype)
        results = []
        for d in args.d or [base.d]:
            if d < 2 or d % base.heads:
                raise UsageError(f"--d {d} must be at least 2 and divisible by {base.heads} heads")
            cfg = make(args.dtype, head_dim=d // base.heads, d=d, mlp_dim=4 * d)
            results += bench.bench_forward(
                cfg, args.variants, args.batch, iters=args.iters, warmup=args.warmup,
                seed=args.seed, allow_short=args.allow_short,
            )
    print(bench.summary_table(results))
    if args.csv:
        bench.emit_csv(results, args.csv)
        print(f"wrote {len(results)} rows to {args.csv}")
    return EXIT_OK


COMMANDS = {
    "init": cmd_init,
    "convert": cmd_convert,
    "verify": cmd_verify,
    "grad-check": cmd_grad_check,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (checkpoint.CheckpointError, IncompatibleModelsError) as exc:
        code = getattr(exc, "code", "incompatible-models")
        print(f"error [{code}]: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
