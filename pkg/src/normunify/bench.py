"""Timing and op counting for the normalization kernels and full forwards.

Op counts come from the instrumented tensor primitives and are exact,
machine-independent integers; those are what tests assert. Wall times are
hardware-specific and only reported.

Timing loops are single-threaded and pin the process to one CPU where the
platform allows. Do not run two benchmarks concurrently.
"""

from __future__ import annotations

import csv
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from normunify import rng
from normunify import tensor as T
from normunify.config import ModelConfig, Variant
from normunify.convert import convert
from normunify.model import forward, init_params
from normunify.norms import (
    compress_zero_mean,
    crms_norm,
    decompress_zero_mean,
    layer_norm_two_pass,
    layer_norm,
    recenter,
    rms_norm,
)
from normunify.verify import verify_equivalence

MIN_ITERS = 100
SPOT_CHECK_TOL = 1e-6
CSV_FIELDS = [
    "label", "variant", "d", "seq", "batch", "L", "dtype",
    "iters", "p25_ns", "p50_ns", "p75_ns", "flops",
]
_INT_FIELDS = {"d", "seq", "batch", "L", "iters", "p25_ns", "p50_ns", "p75_ns", "flops"}


class BenchRefusedError(RuntimeError):
    """Variants to be timed are not numerically equivalent."""


@dataclass
class BenchResult:
    label: str
    variant: str
    d: int
    seq: int
    batch: int
    L: int
    dtype: str
    iters: int
    p25_ns: int
    p50_ns: int
    p75_ns: int
    flops: int
    ops: dict[str, int] = field(default_factory=dict)
    norm_share: float | None = None

    def __post_init__(self):
        if not self.p25_ns <= self.p50_ns <= self.p75_ns:
            raise ValueError("percentiles out of order")

    def row(self) -> dict:
        data = asdict(self)
        return {k: data[k] for k in CSV_FIELDS}


@contextmanager
def _pinned():
    if not hasattr(os, "sched_getaffinity"):
        yield
        return
    before = os.sched_getaffinity(0)
    try:
        os.sched_setaffinity(0, {min(before)})
    except OSError:
        before = None
    try:
        yield
    finally:
        if before is not None:
            os.sched_setaffinity(0, before)


def _check_iters(iters: int, allow_short: bool) -> None:
    if iters < 1 or (iters < MIN_ITERS and not allow_short):
        raise ValueError(f"iters must be >= {MIN_ITERS} (got {iters}); pass allow_short to override")


def time_call(fn: Callable[[], object], iters: int, warmup: int = 10) -> tuple[int, int, int]:
    """(p25, p50, p75) in nanoseconds over ``iters`` timed calls, after
    ``warmup`` untimed ones."""
    for _ in range(warmup):
        fn()
    times = np.empty(iters, dtype=np.int64)
    with _pinned():
        for i in range(iters):
            start = time.perf_counter_ns()
            fn()
            times[i] = time.perf_counter_ns() - start
    p25, p50, p75 = np.percentile(times, [25, 50, 75])
    return int(round(p25)), int(round(p50)), int(round(p75))


def count_call(fn: Callable[[], object]) -> T.OpCounter:
    with T.count_ops() as counter:
        fn()
    return counter


def norm_kernel_ops(kernel: str, d: int, rows: int = 1) -> dict[str, int]:
    """Exact op counts of one kernel call on ``rows`` vectors of full size ``d``."""
    x = T.as_tensor(np.ones((rows, d)), np.float64)
    xc = T.as_tensor(np.ones((rows, d - 1)), np.float64)
    calls = {
        "layer_norm": lambda: layer_norm(x, 1e-6),
        "rms_norm": lambda: rms_norm(x, 1e-6),
        "crms_norm": lambda: crms_norm(xc, 1e-6),
        "crms_norm_padded": lambda: crms_norm(T.pad_last(xc), 1e-6, d=d),
    }
    return dict(count_call(calls[kernel]).counts)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def bench_norm_kernels(
    d_list: Iterable[int],
    rows: int = 64,
    iters: int = MIN_ITERS,
    warmup: int = 10,
    dtype: str = "float32",
    seed: int = 0,
    eps: float | None = None,
    allow_short: bool = False,
) -> list[BenchResult]:
    """Time LayerNorm / RMSNorm on width ``d`` and CRMSNorm on ``d - 1``
    (plus a zero-padded-to-``d`` CRMSNorm when ``d`` is a power of two)."""
    _check_iters(iters, allow_short)
    eps = (1e-6 if dtype == "float32" else 1e-12) if eps is None else eps
    results = []
    for d in d_list:
        if d < 2:
            raise ValueError("d must be at least 2")
        raw = rng.philox(seed, rng.PERTURB, d).standard_normal((rows, d))
        x = T.as_tensor(raw, dtype)
        xc = compress_zero_mean(recenter(x))
        xc_pad = T.pad_last(xc)

        # Spot checks run the same kernels on float64 copies so that the
        # comparison measures the formula, not float32 rounding.
        x64 = T.as_tensor(x, np.float64)
        xc64 = T.as_tensor(xc, np.float64)
        zero_mean64 = decompress_zero_mean(xc64)
        zm_rms = zero_mean64 / np.sqrt((zero_mean64**2).mean(axis=-1, keepdims=True) + eps)
        cases = [
            (
                "layer_norm",
                lambda: layer_norm(x, eps),
                lambda: layer_norm(x64, eps),
                layer_norm_two_pass(x64, eps),
            ),
            (
                "rms_norm",
                lambda: rms_norm(x, eps),
                lambda: rms_norm(x64, eps),
                x64 / np.sqrt((x64**2).mean(axis=-1, keepdims=True) + eps),
            ),
            ("crms_norm", lambda: crms_norm(xc, eps), lambda: crms_norm(xc64, eps), zm_rms[:, :-1]),
        ]
        if _is_pow2(d):
            padded_ref = np.concatenate([zm_rms[:, :-1], np.zeros((rows, 1))], axis=1)
            cases.append(
                (
                    "crms_norm_padded",
                    lambda: crms_norm(xc_pad, eps, d=d),
                    lambda: crms_norm(T.pad_last(xc64), eps, d=d),
                    padded_ref,
                )
            )

        for name, fn, fn64, reference in cases:
            got = np.asarray(fn64())
            err = float(np.max(np.abs(got - reference)))
            if err > SPOT_CHECK_TOL:
                raise AssertionError(f"{name} at d={d} deviates from reference by {err:.3e}")
            counter = count_call(fn)
            p25, p50, p75 = time_call(fn, iters, warmup)
            results.append(
                BenchResult(
                    label="norm-kernels",
                    variant=name,
                    d=d,
                    seq=rows,
                    batch=1,
                    L=0,
                    dtype=dtype,
                    iters=iters,
                    p25_ns=p25,
                    p50_ns=p50,
                    p75_ns=p75,
                    flops=counter.total(),
                    ops=dict(counter.counts),
                )
            )
    return results


def forward_ops(tokens, params, cfg) -> T.OpCounter:
    return count_call(lambda: forward(tokens, params, cfg))


def bench_forward(
    cfg: ModelConfig,
    variants: Iterable[Variant],
    batch_sizes: Iterable[int] = (1,),
    iters: int = MIN_ITERS,
    warmup: int = 10,
    seed: int = 0,
    scale: float = 0.02,
    allow_short: bool = False,
) -> list[BenchResult]:
    """Median forward time per variant and batch size, all variants
    converted from one seed model.

    The batch is a Python loop of single-sequence forwards, as a serving
    loop would run it. ``norm_share`` is the fraction of scalar ops spent
    inside normalization kernels.
    """
    _check_iters(iters, allow_short)
    variants = [Variant(v) for v in variants]
    models = {}
    for family, base in ((False, Variant.PRE_LN), (True, Variant.POST_LN)):
        wanted = [v for v in variants if v.is_post == family]
        if not wanted:
            continue
        base_cfg = cfg.with_variant(base, recenter_branch=False)
        base_params = init_params(base_cfg, seed, scale)
        for v in wanted:
            params, vcfg, _ = convert(base_params, base_cfg, v)
            report = verify_equivalence(base_params, params, base_cfg, vcfg, seed=seed, n_seqs=4)
            if not report.passed:
                raise BenchRefusedError(
                    f"{v.value} is not equivalent to {base.value}: "
                    f"max logit diff {report.max_abs_logit_diff:.3e}"
                )
            models[v] = (params, vcfg)

    results = []
    for batch in batch_sizes:
        seqs = rng.random_tokens(seed, batch, cfg.max_seq, cfg.vocab_size)
        for v in variants:
            params, vcfg = models[v]

            def run(params=params, vcfg=vcfg):
                for toks in seqs:
                    forward(toks, params, vcfg)

            counter = count_call(run)
            p25, p50, p75 = time_call(run, iters, warmup)
            total = counter.total()
            results.append(
                BenchResult(
                    label="forward",
                    variant=v.value,
                    d=cfg.d,
                    seq=cfg.max_seq,
                    batch=batch,
                    L=len(cfg.blocks),
                    dtype=cfg.dtype,
                    iters=iters,
                    p25_ns=p25,
                    p50_ns=p50,
                    p75_ns=p75,
                    flops=total,
                    ops=dict(counter.counts),
                    norm_share=counter.scope_total("norm") / total,
                )
            )
    return results


def emit_csv(results: Iterable[BenchResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in results:
            writer.writerow(r.row())


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            {k: int(v) if k in _INT_FIELDS else v for k, v in row.items()}
            for row in csv.DictReader(f)
        ]


def summary_table(results: list[BenchResult]) -> str:
    header = f"{'label':<13}{'variant':<18}{'d':>6}{'batch':>6}{'p50 us':>11}{'flops':>13}  extra"
    lines = [header, "-" * len(header)]
    baselines: dict[tuple, int] = {}
    for r in results:
        key = (r.label, r.d, r.batch)
        if r.variant in ("layer_norm", "pre-ln", "post-ln"):
            baselines[key] = r.p50_ns
    for r in results:
        extra = []
        base = baselines.get((r.label, r.d, r.batch))
        if base:
            extra.append(f"time x{r.p50_ns / base:.3f}")
        if r.norm_share is not None:
            extra.append(f"norm share {r.norm_share:.1%}")
        lines.append(
            f"{r.label:<13}{r.variant:<18}{r.d:>6}{r.batch:>6}{r.p50_ns / 1e3:>11.1f}"
            f"{r.flops:>13}  {', '.join(extra)}"
        )
    return "\n".join(lines)
