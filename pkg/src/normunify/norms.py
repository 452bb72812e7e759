"""LayerNorm, RMSNorm, CRMSNorm and the zero-mean compression pair.

epsilon sits inside the square root, added to the mean square, for all three
norms. Some frameworks add it outside the root (``x / (rms + eps)``); those
conventions are not interchangeable with these kernels.

Every kernel is written in terms of the instrumented primitives of
:mod:`normunify.tensor`, so the op counts reported by the benchmark harness
are what these exact code paths execute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from normunify import tensor as T
from normunify.config import NormConfig, NormKind


class ZeroMeanError(ValueError):
    """A vector expected to be zero-mean is not, within tolerance."""


@dataclass(frozen=True)
class AffineParams:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise T.TensorError(
                f"affine gamma/beta shapes differ: {self.gamma.shape} vs {self.beta.shape}"
            )

    @classmethod
    def identity(cls, d: int, dtype=np.float64) -> AffineParams:
        return cls(T.as_tensor(np.ones(d), dtype), T.as_tensor(np.zeros(d), dtype))


def _eps(cfg: NormConfig | float) -> float:
    # a bare float may be 0 for exact-arithmetic checks; NormConfig forbids it
    eps = cfg.eps if isinstance(cfg, NormConfig) else float(cfg)
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    return eps


def _require_finite(x: np.ndarray) -> None:
    T._check(x)
    if not np.isfinite(x).all():
        raise T.NonFiniteError("normalization input contains NaN or Inf")


def layer_norm(x: np.ndarray, cfg: NormConfig | float) -> np.ndarray:
    """``(x - mu 1) / sqrt(|x|^2/d - mu^2 + eps)`` over the last dimension."""
    _require_finite(x)
    eps = _eps(cfg)
    mu = T.row_mean(x, keepdims=True)
    mean_sq = T.row_mean(T.mul(x, x), keepdims=True)
    # the one-pass form can round below zero when the variance is tiny
    var = T.clamp_min(T.sub(mean_sq, T.mul(mu, mu)), 0.0)
    denom = T.sqrt(T.add(var, eps))
    return T.div(T.sub(x, mu), denom)


def rms_norm(x: np.ndarray, cfg: NormConfig | float) -> np.ndarray:
    """``x / sqrt(|x|^2/d + eps)`` over the last dimension."""
    _require_finite(x)
    eps = _eps(cfg)
    mean_sq = T.row_mean(T.mul(x, x), keepdims=True)
    return T.div(x, T.sqrt(T.add(mean_sq, eps)))


def crms_norm(x: np.ndarray, cfg: NormConfig | float, d: int | None = None) -> np.ndarray:
    """RMSNorm of the zero-mean vector whose first ``d - 1`` entries are ``x``.

    The result stays in compressed form. ``d`` defaults to ``len + 1``; pass
    it explicitly for a zero-padded input whose trailing slots are zero.
    """
    _require_finite(x)
    eps = _eps(cfg)
    n = x.shape[-1]
    d = n + 1 if d is None else d
    if d < n:
        raise T.TensorError(f"full dimension {d} smaller than compressed length {n}")
    sum_sq = T.row_sum(T.mul(x, x), keepdims=True)
    total = T.row_sum(x, keepdims=True)
    mean_sq = T.div(T.add(sum_sq, T.mul(total, total)), d)
    return T.div(x, T.sqrt(T.add(mean_sq, eps)))


def normalize(x: np.ndarray, cfg: NormConfig) -> np.ndarray:
    if cfg.kind is NormKind.LAYER_NORM:
        return layer_norm(x, cfg)
    if cfg.kind is NormKind.RMS_NORM:
        return rms_norm(x, cfg)
    return crms_norm(x, cfg)


def recenter(x: np.ndarray) -> np.ndarray:
    """``x - mean(x) 1`` per last-dim vector.

    A second pass removes the rounding residual of the first, so the result's
    mean is small relative to its own spread rather than to ``|x|``. Without
    it a near-constant ``x`` leaves a uniform residual that RMSNorm would
    amplify by ``1/sqrt(eps)``.
    """
    y = T.sub(x, T.row_mean(x, keepdims=True))
    return T.sub(y, T.row_mean(y, keepdims=True))


def compress_zero_mean(x: np.ndarray, tol: float | None = None) -> np.ndarray:
    """Drop the last element of each zero-mean vector.

    The mean is only checked when ``tol`` is given; the hot path trusts the
    caller.
    """
    T._check(x)
    if x.shape[-1] < 2:
        raise T.TensorError("cannot compress a length-1 vector")
    if tol is not None:
        worst = float(np.max(np.abs(T.row_mean(x))))
        if worst > tol:
            raise ZeroMeanError(f"max |mean| {worst:.3e} exceeds tolerance {tol:.3e}")
    return T.slice_last(x, x.shape[-1] - 1)


def decompress_zero_mean(x: np.ndarray) -> np.ndarray:
    """Append the negated sum so each vector has zero mean."""
    return T.concat_last(x, T.mul(T.row_sum(x, keepdims=True), -1.0))


def apply_affine(x: np.ndarray, p: AffineParams) -> np.ndarray:
    T._check(x)
    if x.shape[-1] != p.gamma.shape[0]:
        raise T.TensorError(f"affine of size {p.gamma.shape[0]} on width {x.shape[-1]}")
    return T.add(T.mul(x, p.gamma), p.beta)


def layer_norm_two_pass(x: np.ndarray, eps: float) -> np.ndarray:
    """Float64 LayerNorm reference: compensated sums, variance as
    ``sum((x - mu)^2) / d``. Not instrumented; meant as an oracle."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    d = flat.shape[1]
    out = np.empty_like(flat)
    for i, row in enumerate(flat):
        mu = math.fsum(row) / d
        centered = row - mu
        var = math.fsum(centered * centered) / d
        out[i] = centered / math.sqrt(var + eps)
    return out.reshape(x.shape)
