"""Numerical certification that two model variants compute the same thing.

Three checks:

* logit comparison on random token sequences (``verify_equivalence``),
* a drift audit of the main-branch means of zero-mean variants,
* finite-difference gradient equivalence between a Pre-LN loss and the
  Pre-RMS loss that recenters the same stored parameters on the fly.

There is no autograd here. The training claim reduces to "both losses are
the same function of the stored parameters", and central differences on
both sides certify that at sampled coordinates.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from normunify import rng
from normunify.config import ModelConfig, Variant
from normunify.convert import recentered_params
from normunify.model import ModelParams, cast, check_params, forward, loss

LOGIT_TOL = {"float32": 1e-4, "float64": 1e-10}
DRIFT_TOL = {"float32": 1e-5, "float64": 1e-12}
REL_FLOOR = 1e-8
ROUNDOFF_ULPS = 64


class IncompatibleModelsError(ValueError):
    pass


class FDInstabilityError(ArithmeticError):
    """A central difference is dominated by roundoff in the loss."""


def worker_count() -> int:
    """Thread cap from ``NORMUNIFY_THREADS``; 0 (the default) means serial."""
    raw = os.environ.get("NORMUNIFY_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"NORMUNIFY_THREADS must be an integer, got {raw!r}") from None
    return max(n, 0)


def run_batch(tokens: np.ndarray, params: ModelParams, cfg: ModelConfig) -> list:
    """Forward every row of ``tokens``; rows are split across worker threads
    when ``NORMUNIFY_THREADS`` > 0. Results do not depend on the split."""
    workers = worker_count()
    if workers <= 1 or len(tokens) < 2:
        return [forward(tokens, params, cfg)]
    chunks = np.array_split(tokens, min(workers, len(tokens)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: forward(c, params, cfg), chunks))


def _zero_mean_start(variant: Variant) -> int | None:
    """First main-branch state covered by the zero-mean invariant."""
    if variant in (Variant.PRE_RMS, Variant.PRE_CRMS):
        return 0
    if variant is Variant.POST_RMS:
        # x_0 feeds block 0 raw; only norm outputs are guaranteed zero-mean
        return 1
    return None


def _drift(traces: list, variant: Variant) -> list[float] | None:
    start = _zero_mean_start(variant)
    if start is None:
        return None
    per_trace = [t.block_means()[start:] for t in traces]
    return [max(col) for col in zip(*per_trace)]


@dataclass
class EquivalenceReport:
    max_abs_logit_diff: float
    mean_abs_logit_diff: float
    drift_a: list[float] | None
    drift_b: list[float] | None
    dtype: str
    seed: int
    n_seqs: int
    seq_len: int
    tol: float
    drift_tol: float

    @property
    def drift_ok(self) -> bool:
        return all(
            max(d, default=0.0) <= self.drift_tol for d in (self.drift_a, self.drift_b) if d
        )

    @property
    def passed(self) -> bool:
        return self.max_abs_logit_diff <= self.tol and self.drift_ok

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_abs_logit_diff": self.max_abs_logit_diff,
            "mean_abs_logit_diff": self.mean_abs_logit_diff,
            "tol": self.tol,
            "drift_a": self.drift_a,
            "drift_b": self.drift_b,
            "drift_tol": self.drift_tol,
            "dtype": self.dtype,
            "tokens": {"seed": self.seed, "count": self.n_seqs, "seq_len": self.seq_len},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        lines = [
            f"equivalence: {verdict}",
            f"  max |logit diff|  {self.max_abs_logit_diff:.3e} (tol {self.tol:.1e})",
            f"  mean |logit diff| {self.mean_abs_logit_diff:.3e}",
            f"  {self.n_seqs} sequences of length {self.seq_len}, seed {self.seed}, {self.dtype}",
        ]
        for label, drift in (("a", self.drift_a), ("b", self.drift_b)):
            if drift:
                lines.append(
                    f"  drift {label}: max |mean(x_l)| {max(drift):.3e} over {len(drift)} states "
                    f"(tol {self.drift_tol:.1e})"
                )
        return "\n".join(lines)


def _check_compatible(cfg_a: ModelConfig, cfg_b: ModelConfig) -> None:
    fields = ("vocab_size", "max_seq", "d", "blocks", "heads", "head_dim", "mlp_dim", "n_classes")
    for name in fields:
        if getattr(cfg_a, name) != getattr(cfg_b, name):
            raise IncompatibleModelsError(
                f"{name} differs: {getattr(cfg_a, name)} vs {getattr(cfg_b, name)}"
            )


def verify_equivalence(
    a: ModelParams,
    b: ModelParams,
    cfg_a: ModelConfig,
    cfg_b: ModelConfig,
    seed: int = 0,
    n_seqs: int = 16,
    tol: float | None = None,
    seq_len: int | None = None,
    dtype: str | None = None,
    drift_tol: float | None = None,
) -> EquivalenceReport:
    """Run both models on ``n_seqs`` random sequences and compare logits."""
    _check_compatible(cfg_a, cfg_b)
    check_params(a, cfg_a)
    check_params(b, cfg_b)
    if n_seqs < 1:
        raise ValueError("n_seqs must be positive")
    seq_len = cfg_a.max_seq if seq_len is None else seq_len
    if not 1 <= seq_len <= cfg_a.max_seq:
        raise ValueError(f"seq_len must be in 1..{cfg_a.max_seq}")
    if dtype is not None:
        a, cfg_a = cast(a, cfg_a, dtype)
        b, cfg_b = cast(b, cfg_b, dtype)
    elif cfg_a.dtype != cfg_b.dtype:
        raise IncompatibleModelsError(f"dtypes differ: {cfg_a.dtype} vs {cfg_b.dtype}")
    dtype = cfg_a.dtype
    tol = LOGIT_TOL[dtype] if tol is None else tol
    drift_tol = DRIFT_TOL[dtype] if drift_tol is None else drift_tol

    tokens = np.stack(rng.random_tokens(seed, n_seqs, seq_len, cfg_a.vocab_size))
    traces_a = run_batch(tokens, a, cfg_a)
    traces_b = run_batch(tokens, b, cfg_b)
    logits_a = np.concatenate([t.logits for t in traces_a]).astype(np.float64)
    logits_b = np.concatenate([t.logits for t in traces_b]).astype(np.float64)
    diff = np.abs(logits_a - logits_b)
    return EquivalenceReport(
        max_abs_logit_diff=float(diff.max()),
        mean_abs_logit_diff=float(diff.mean()),
        drift_a=_drift(traces_a, cfg_a.variant),
        drift_b=_drift(traces_b, cfg_b.variant),
        dtype=dtype,
        seed=seed,
        n_seqs=n_seqs,
        seq_len=seq_len,
        tol=tol,
        drift_tol=drift_tol,
    )


# ---------------------------------------------------------------------------
# finite differences


def central_difference(f: Callable[[float], float], h: float, check: bool = True) -> float:
    """``(f(h) - f(-h)) / 2h``, where ``f(t)`` is the loss moved by ``t``
    along some direction.

    With ``check``, raises :class:`FDInstabilityError` when the two losses
    differ by fewer than 64 ulps of the loss value.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    plus, minus = float(f(h)), float(f(-h))
    if not (np.isfinite(plus) and np.isfinite(minus)):
        raise ArithmeticError("non-finite loss in finite difference")
    if check and abs(plus - minus) < ROUNDOFF_ULPS * np.spacing(max(abs(plus), abs(minus))):
        raise FDInstabilityError(
            f"loss difference {abs(plus - minus):.3e} is within {ROUNDOFF_ULPS} ulps of {plus:.6g}"
        )
    return (plus - minus) / (2.0 * h)


def fd_gradient(loss_fn, params, coord, h: float = 1e-5, check: bool = True) -> float:
    """Central-difference partial derivative of ``loss_fn`` at ``params``.

    ``params`` is either an ndarray (``coord`` an index into it) or a
    :class:`ModelParams` (``coord`` a ``(tensor_name, index)`` pair).
    """
    if isinstance(params, ModelParams):
        name, index = coord
        base = params.named_tensors()[name]
        direction = np.zeros(base.shape)
        direction[index] = 1.0
        return fd_directional(loss_fn, params, {name: direction}, h, check)
    base = np.asarray(params, dtype=np.float64)

    def moved(t: float) -> float:
        theta = base.copy()
        theta[coord] += t
        return loss_fn(theta)

    return central_difference(moved, h, check)


def fd_directional(loss_fn, params: ModelParams, direction: dict, h: float, check: bool = True):
    """Directional derivative along ``direction`` (tensor name -> array)."""
    named = params.named_tensors()

    def moved(t: float) -> float:
        updates = {k: (named[k] + t * np.asarray(v)).astype(named[k].dtype) for k, v in direction.items()}
        return loss_fn(params.replace_tensors(updates))

    return central_difference(moved, h, check)


@dataclass
class GradCheckReport:
    coords: list[tuple[str, tuple[int, ...]]]
    grads_ln: list[float]
    grads_rms: list[float]
    rel: list[float]
    h: float
    tol: float
    shift_tensor: str
    shift_derivative: float
    shift_tol: float = 1e-8
    flat: list[int] = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        return max(self.rel, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.tol and abs(self.shift_derivative) <= self.shift_tol

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "h": self.h,
            "tol": self.tol,
            "max_rel_disagreement": self.max_rel,
            "coords": [
                {"tensor": n, "index": list(i), "grad_ln": g1, "grad_rms": g2, "rel": r}
                for (n, i), g1, g2, r in zip(self.coords, self.grads_ln, self.grads_rms, self.rel)
            ],
            "flat_coords": self.flat,
            "shift": {"tensor": self.shift_tensor, "derivative": self.shift_derivative},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        worst = int(np.argmax(self.rel)) if self.rel else None
        lines = [
            f"gradient equivalence: {'PASS' if self.passed else 'FAIL'}",
            f"  {len(self.coords)} coordinates, h={self.h:.1e}, tol {self.tol:.1e}",
            f"  max relative disagreement {self.max_rel:.3e}",
        ]
        if worst is not None:
            name, idx = self.coords[worst]
            lines.append(
                f"  worst at {name}{list(idx)}: {self.grads_ln[worst]:.6e} vs {self.grads_rms[worst]:.6e}"
            )
        if self.flat:
            lines.append(f"  {len(self.flat)} coordinates flat on both sides (gradient below roundoff)")
        lines.append(
            f"  shift direction on {self.shift_tensor}: derivative {self.shift_derivative:.3e}"
            f" (tol {self.shift_tol:.0e})"
        )
        return "\n".join(lines)


def _sample_coords(
    params: ModelParams, tokens: np.ndarray, k: int, seed: int
) -> list[tuple[str, tuple[int, ...]]]:
    """Stratified sample over output projections, output biases, input
    projections and the embedding rows the batch actually reads."""
    named = params.named_tensors()
    groups = [
        [n for n in named if n.endswith(".A_o")],
        [n for n in named if n.endswith(".b_o")],
        [n for n in named if n.endswith(".A_i")],
        ["emb.token", "emb.pos"],
    ]
    used_tokens = np.unique(tokens)
    seq_len = tokens.shape[-1]
    g = rng.philox(seed, rng.COORDS)
    coords = []
    for i in range(k):
        names = groups[i % len(groups)]
        name = names[g.integers(len(names))]
        shape = named[name].shape
        if name == "emb.token":
            index = (int(used_tokens[g.integers(len(used_tokens))]), int(g.integers(shape[1])))
        elif name == "emb.pos":
            index = (int(g.integers(seq_len)), int(g.integers(shape[1])))
        else:
            index = tuple(int(g.integers(s)) for s in shape)
        coords.append((name, index))
    return coords


def grad_equivalence_check(
    params: ModelParams,
    cfg: ModelConfig,
    seed: int = 0,
    k_coords: int = 32,
    h: float = 1e-5,
    tol: float = 1e-4,
    n_seqs: int = 2,
    seq_len: int | None = None,
) -> GradCheckReport:
    """FD gradients of the Pre-LN loss vs the on-the-fly-recentered Pre-RMS
    loss, both as functions of the same stored Pre-LN parameters."""
    if cfg.variant is not Variant.PRE_LN:
        raise ValueError(f"gradient check needs a pre-ln model, got {cfg.variant.value}")
    if cfg.dropout_p > 0:
        raise ValueError("gradient check requires dropout off")
    if params.has_affine:
        raise ValueError("fuse norm affines before the gradient check")
    check_params(params, cfg)
    if cfg.dtype != "float64":
        params, cfg = cast(params, cfg, "float64")
    rms_cfg = cfg.with_variant(Variant.PRE_RMS)
    seq_len = cfg.max_seq if seq_len is None else seq_len
    tokens = np.stack(rng.random_tokens(seed, n_seqs, seq_len, cfg.vocab_size))
    targets = np.stack(rng.random_tokens(seed + 1, n_seqs, seq_len, cfg.n_classes))

    def loss_ln(theta: ModelParams) -> float:
        return loss(forward(tokens, theta, cfg).logits, targets)

    def loss_rms(theta: ModelParams) -> float:
        return loss(forward(tokens, recentered_params(theta), rms_cfg).logits, targets)

    coords = _sample_coords(params, tokens, k_coords, seed)
    grads_ln, grads_rms, rel, flat = [], [], [], []
    for i, coord in enumerate(coords):
        try:
            g1 = fd_gradient(loss_ln, params, coord, h)
            g1_flat = False
        except FDInstabilityError:
            g1, g1_flat = fd_gradient(loss_ln, params, coord, h, check=False), True
        try:
            g2 = fd_gradient(loss_rms, params, coord, h)
            g2_flat = False
        except FDInstabilityError:
            g2, g2_flat = fd_gradient(loss_rms, params, coord, h, check=False), True
        if g1_flat and g2_flat:
            # both gradients are numerically zero: they agree
            flat.append(i)
            r = 0.0
        elif g1_flat or g2_flat:
            raise FDInstabilityError(
                f"{coord[0]}{list(coord[1])}: one side is below roundoff "
                f"({g1:.3e} vs {g2:.3e}); increase h"
            )
        else:
            r = abs(g1 - g2) / max(abs(g1), abs(g2), REL_FLOOR)
        grads_ln.append(g1)
        grads_rms.append(g2)
        rel.append(r)

    shift_name = next(n for n in params.named_tensors() if n.endswith(".b_o"))
    shift_dir = {shift_name: np.ones(cfg.d)}
    shift = fd_directional(loss_rms, params, shift_dir, h, check=False)
    return GradCheckReport(
        coords=coords,
        grads_ln=grads_ln,
        grads_rms=grads_rms,
        rel=rel,
        h=h,
        tol=tol,
        shift_tensor=shift_name,
        shift_derivative=shift,
        flat=flat,
    )


# ---------------------------------------------------------------------------
# drift


@dataclass
class DriftTable:
    variant: Variant
    n_seqs: int
    per_dtype: dict[str, list[float]]

    def max(self, dtype: str) -> float:
        return max(self.per_dtype[dtype])

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "n_seqs": self.n_seqs, "drift": self.per_dtype}

    def to_text(self) -> str:
        lines = [f"zero-mean drift ({self.variant.value}, {self.n_seqs} sequences)"]
        dtypes = list(self.per_dtype)
        lines.append("  state  " + "  ".join(f"{d:>10}" for d in dtypes))
        for l, row in enumerate(zip(*self.per_dtype.values())):
            lines.append(f"  x_{l:<4} " + "  ".join(f"{v:10.3e}" for v in row))
        return "\n".join(lines)


def drift_audit(
    params: ModelParams,
    cfg: ModelConfig,
    seed: int = 0,
    n_seqs: int = 8,
    seq_len: int | None = None,
    dtypes: tuple[str, ...] = ("float32", "float64"),
) -> DriftTable:
    """max |mean(x_l)| per main-branch state, evaluated in each dtype."""
    if cfg.variant not in (Variant.PRE_RMS, Variant.PRE_CRMS):
        raise ValueError(f"drift audit needs pre-rms or pre-crms, got {cfg.variant.value}")
    seq_len = cfg.max_seq if seq_len is None else seq_len
    tokens = np.stack(rng.random_tokens(seed, n_seqs, seq_len, cfg.vocab_size))
    table = {}
    for dtype in dtypes:
        p, c = cast(params, cfg, dtype)
        table[dtype] = _drift(run_batch(tokens, p, c), c.variant)
    return DriftTable(cfg.variant, n_seqs, table)
