"""Checkpoint surgery between the normalization variants.

Conversion graph::

    pre-ln <-> pre-rms <-> pre-crms        post-ln -> post-rms

pre-ln -> pre-rms recenters the embeddings and every residual output
projection, then swaps LayerNorm for RMSNorm. pre-rms -> pre-crms drops the
redundant last coordinate of the main branch: embeddings lose their last
column, input projections (and the head) fold their last column into the
rest, output projections lose their last row. Every transform is a one-shot,
whole-checkpoint function; nothing is fine-tuned.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from normunify import tensor as T
from normunify.config import ModelConfig, Variant
from normunify.model import BlockParams, ModelParams, check_params
from normunify.norms import AffineParams, decompress_zero_mean, recenter

GATE_TOL = {"float32": 1e-5, "float64": 1e-12}


class ConversionError(ValueError):
    pass


class UndefinedConversionError(ConversionError):
    """No path between the two variants in the conversion graph."""


class AffineError(ConversionError):
    """The source model still carries elementwise norm affines."""


class ZeroMeanGateError(ConversionError):
    """A tensor that must be zero-mean is not; ``tensor`` names it."""

    def __init__(self, tensor: str, residual: float, tol: float):
        self.tensor = tensor
        self.residual = residual
        self.tol = tol
        super().__init__(f"{tensor}: zero-mean residual {residual:.3e} exceeds gate {tol:.3e}")


@dataclass
class ConversionReport:
    source: Variant
    target: Variant
    tol: float
    deltas: dict[str, float] = field(default_factory=dict)
    residuals: dict[str, float] = field(default_factory=dict)
    dim_changes: dict[str, tuple[list[int], list[int]]] = field(default_factory=dict)
    stages: list[ConversionReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        own = all(r <= self.tol for r in self.residuals.values())
        return own and all(s.passed for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "source": self.source.value,
            "target": self.target.value,
            "tol": self.tol,
            "passed": self.passed,
            "deltas": self.deltas,
            "residuals": self.residuals,
            "dim_changes": {k: {"from": a, "to": b} for k, (a, b) in self.dim_changes.items()},
            "stages": [s.to_dict() for s in self.stages],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [
            f"conversion {self.source.value} -> {self.target.value}: "
            f"{'PASS' if self.passed else 'FAIL'} (tol {self.tol:.1e})"
        ]
        for stage in self.stages:
            lines += ["  " + line for line in stage.to_text().splitlines()]
        if self.residuals:
            worst = max(self.residuals, key=self.residuals.get)
            lines.append(
                f"  max zero-mean residual {self.residuals[worst]:.3e} ({worst}), "
                f"{len(self.residuals)} checks"
            )
        if self.deltas:
            worst = max(self.deltas, key=self.deltas.get)
            lines.append(f"  max parameter delta {self.deltas[worst]:.3e} ({worst})")
        for name, (a, b) in self.dim_changes.items():
            lines.append(f"  {name}: {tuple(a)} -> {tuple(b)}")
        return "\n".join(lines)


def _gate_tol(cfg: ModelConfig, tol: float | None) -> float:
    return GATE_TOL[cfg.dtype] if tol is None else tol


def _record_changes(report: ConversionReport, old: ModelParams, new: ModelParams) -> None:
    before = old.named_tensors()
    for name, arr in new.named_tensors().items():
        prev = before.get(name)
        if prev is None:
            continue
        if prev.shape != arr.shape:
            report.dim_changes[name] = (list(prev.shape), list(arr.shape))
            common = tuple(slice(0, min(a, b)) for a, b in zip(prev.shape, arr.shape))
            prev, arr = prev[common], arr[common]
        report.deltas[name] = float(np.max(np.abs(arr - prev))) if arr.size else 0.0


def _ones(n: int, dtype) -> np.ndarray:
    return T.as_tensor(np.ones(n), dtype)


def column_means(A: np.ndarray) -> np.ndarray:
    return T.div(T.seq_sum(A, axis=0), A.shape[0])


# ---------------------------------------------------------------------------
# primitives


def recenter_linear(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``y = A x + b`` into its zero-mean part.

    Returns ``(A - 1 mu_colᵀ, b - mean(b) 1)`` so that for every ``x``,
    ``Â x + b̂ = y - mean(y) 1``.
    """
    if A.ndim != 2 or b.shape != (A.shape[0],):
        raise T.TensorError(f"recenter_linear shapes {A.shape}, {b.shape}")
    ones = _ones(A.shape[0], A.dtype)
    A_hat = T.outer_sub_rank1(A, ones, column_means(A))
    # correction pass, as in norms.recenter
    A_hat = T.outer_sub_rank1(A_hat, ones, column_means(A_hat))
    return A_hat, recenter(b)


def recenter_embeddings(params: ModelParams) -> ModelParams:
    return replace(params, token_emb=recenter(params.token_emb), pos_emb=recenter(params.pos_emb))


def fuse_norm_affine(
    affine: AffineParams, A_i: np.ndarray, b_i: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Fold ``gamma * z + beta`` into the linear layer that consumes it."""
    if A_i.ndim != 2 or affine.gamma.shape != (A_i.shape[1],) or b_i.shape != (A_i.shape[0],):
        raise T.TensorError(
            f"affine of size {affine.gamma.shape} cannot fuse into {A_i.shape} / {b_i.shape}"
        )
    A_fused = T.mul(A_i, affine.gamma)
    b_fused = T.add(T.matmul(A_i, affine.beta[:, None])[:, 0], b_i)
    return A_fused, b_fused


def fuse_affines(params: ModelParams) -> ModelParams:
    """Remove every norm affine by folding it into the next linear layer.

    Only pre-norm models qualify: in a post-norm model the affine output
    also feeds the main branch, not just a linear layer.
    """
    if params.variant.is_post and params.has_affine:
        raise AffineError("post-norm affines feed the main branch and cannot be fused away")
    blocks = []
    for bp in params.blocks:
        if bp.norm_affine is None:
            blocks.append(bp)
            continue
        A_i, b_i = fuse_norm_affine(bp.norm_affine, bp.A_i, bp.b_i)
        blocks.append(replace(bp, A_i=A_i, b_i=b_i, norm_affine=None))
    head_W, head_b = params.head_W, params.head_b
    if params.final_affine is not None:
        head_W, head_b = fuse_norm_affine(params.final_affine, head_W, head_b)
    return replace(params, blocks=tuple(blocks), head_W=head_W, head_b=head_b, final_affine=None)


def _require_affine_free(params: ModelParams) -> None:
    if params.has_affine:
        raise AffineError("model has unfused norm affines; run fuse_affines first")


def zero_mean_residuals(params: ModelParams) -> dict[str, float]:
    """max |mean| of every tensor the zero-mean invariant covers: embedding
    rows, output-projection columns and biases."""
    out = {
        "emb.token": float(np.max(np.abs(T.row_mean(params.token_emb)))),
        "emb.pos": float(np.max(np.abs(T.row_mean(params.pos_emb)))),
    }
    for l, bp in enumerate(params.blocks):
        prefix = f"block.{l}.{bp.kind.value}"
        out[f"{prefix}.A_o"] = float(np.max(np.abs(column_means(bp.A_o))))
        out[f"{prefix}.b_o"] = abs(float(T.row_mean(bp.b_o)[0]))
    return out


def _gate(params: ModelParams, tol: float, skip_outputs: bool = False) -> dict[str, float]:
    residuals = zero_mean_residuals(params)
    for name, value in residuals.items():
        if skip_outputs and not name.startswith("emb."):
            continue
        if value > tol:
            raise ZeroMeanGateError(name, value, tol)
    return residuals


def _recenter_outputs(params: ModelParams) -> ModelParams:
    blocks = []
    for bp in params.blocks:
        A_o, b_o = recenter_linear(bp.A_o, bp.b_o)
        blocks.append(replace(bp, A_o=A_o, b_o=b_o))
    return replace(params, blocks=tuple(blocks))


def _check_source(params: ModelParams, cfg: ModelConfig, variant: Variant) -> None:
    if cfg.variant is not variant:
        raise ConversionError(f"expected a {variant.value} model, got {cfg.variant.value}")
    check_params(params, cfg)


# ---------------------------------------------------------------------------
# conversion edges


def recentered_params(params: ModelParams, explicit_recenter: bool = False) -> ModelParams:
    """Parameters of the Pre-RMS equivalent of a Pre-LN model (variant tag
    switched, nothing checked). Used on the fly by gradient checks."""
    out = recenter_embeddings(params)
    if not explicit_recenter:
        out = _recenter_outputs(out)
    return replace(out, variant=Variant.PRE_RMS)


def ln_to_rms(
    params: ModelParams,
    cfg: ModelConfig,
    tol: float | None = None,
    explicit_recenter: bool = False,
) -> tuple[ModelParams, ModelConfig, ConversionReport]:
    """Pre-LN -> Pre-RMS.

    With ``explicit_recenter`` the output projections are left alone and the
    target recenters each residual-branch output in its forward pass, which
    is what keeps the main branch zero-mean once dropout is applied.
    """
    _check_source(params, cfg, Variant.PRE_LN)
    _require_affine_free(params)
    tol = _gate_tol(cfg, tol)
    new = recentered_params(params, explicit_recenter)
    new_cfg = cfg.with_variant(Variant.PRE_RMS, recenter_branch=explicit_recenter)
    report = ConversionReport(Variant.PRE_LN, Variant.PRE_RMS, tol)
    residuals = zero_mean_residuals(new)
    if explicit_recenter:
        residuals = {k: v for k, v in residuals.items() if k.startswith("emb.")}
    report.residuals = residuals
    _record_changes(report, params, new)
    return new, new_cfg, report


def rms_to_crms(
    params: ModelParams, cfg: ModelConfig, tol: float | None = None
) -> tuple[ModelParams, ModelConfig, ConversionReport]:
    """Pre-RMS -> Pre-CRMS (main-branch width d -> d - 1)."""
    _check_source(params, cfg, Variant.PRE_RMS)
    _require_affine_free(params)
    tol = _gate_tol(cfg, tol)
    report = ConversionReport(Variant.PRE_RMS, Variant.PRE_CRMS, tol)
    source = params
    if cfg.recenter_branch:
        # branch outputs were recentered in the forward pass; bake that into
        # the output projections so the compressed rows can be dropped
        source = _recenter_outputs(source)
    _gate(source, tol)
    w = cfg.d
    dtype = cfg.np_dtype
    ones = _ones(w, dtype)

    def fold_last_column(A: np.ndarray, name: str) -> np.ndarray:
        A_hat = T.outer_sub_rank1(A, np.ascontiguousarray(A[:, -1]), ones)
        report.residuals[f"{name}.last_column"] = float(np.max(np.abs(A_hat[:, -1])))
        return T.slice_last(A_hat, w - 1)

    blocks = []
    for l, bp in enumerate(source.blocks):
        prefix = f"block.{l}.{bp.kind.value}"
        blocks.append(
            BlockParams(
                kind=bp.kind,
                A_i=fold_last_column(bp.A_i, f"{prefix}.A_i"),
                b_i=bp.b_i,
                A_o=T.drop_last_row(bp.A_o),
                b_o=T.slice_last(bp.b_o, w - 1),
            )
        )
    new = ModelParams(
        variant=Variant.PRE_CRMS,
        token_emb=T.slice_last(source.token_emb, w - 1),
        pos_emb=T.slice_last(source.pos_emb, w - 1),
        blocks=tuple(blocks),
        head_W=fold_last_column(source.head_W, "head.W"),
        head_b=source.head_b,
    )
    new_cfg = cfg.with_variant(Variant.PRE_CRMS, recenter_branch=False)
    _record_changes(report, params, new)
    return new, new_cfg, report


def ln_to_crms(
    params: ModelParams, cfg: ModelConfig, tol: float | None = None
) -> tuple[ModelParams, ModelConfig, ConversionReport]:
    mid, mid_cfg, first = ln_to_rms(params, cfg, tol)
    new, new_cfg, second = rms_to_crms(mid, mid_cfg, tol)
    report = ConversionReport(Variant.PRE_LN, Variant.PRE_CRMS, first.tol, stages=[first, second])
    _record_changes(report, params, new)
    return new, new_cfg, report


def crms_to_rms(
    params: ModelParams, cfg: ModelConfig, tol: float | None = None
) -> tuple[ModelParams, ModelConfig, ConversionReport]:
    """Pre-CRMS -> Pre-RMS (width d - 1 -> d). Each restored output row is
    the negated sum of the kept rows, the one choice that keeps columns
    zero-mean."""
    _check_source(params, cfg, Variant.PRE_CRMS)
    _require_affine_free(params)

    def zero_column(A: np.ndarray) -> np.ndarray:
        return T.pad_last(A, 0.0)

    def restore_row(A: np.ndarray) -> np.ndarray:
        return T.append_row(A, T.mul(T.seq_sum(A, axis=0), -1.0))

    blocks = tuple(
        BlockParams(
            kind=bp.kind,
            A_i=zero_column(bp.A_i),
            b_i=bp.b_i,
            A_o=restore_row(bp.A_o),
            b_o=decompress_zero_mean(bp.b_o),
        )
        for bp in params.blocks
    )
    new = ModelParams(
        variant=Variant.PRE_RMS,
        token_emb=decompress_zero_mean(params.token_emb),
        pos_emb=decompress_zero_mean(params.pos_emb),
        blocks=blocks,
        head_W=zero_column(params.head_W),
        head_b=params.head_b,
    )
    new_cfg = cfg.with_variant(Variant.PRE_RMS)
    report = ConversionReport(Variant.PRE_CRMS, Variant.PRE_RMS, _gate_tol(cfg, tol))
    report.residuals = zero_mean_residuals(new)
    _record_changes(report, params, new)
    return new, new_cfg, report


def rms_to_ln(
    params: ModelParams, cfg: ModelConfig, tol: float | None = None
) -> tuple[ModelParams, ModelConfig, ConversionReport]:
    """Pre-RMS -> Pre-LN: only the norm kind changes, valid because the
    main branch stays zero-mean (gated)."""
    _check_source(params, cfg, Variant.PRE_RMS)
    tol = _gate_tol(cfg, tol)
    if cfg.recenter_branch:
        params_src = _recenter_outputs(params)
    else:
        params_src = params
    residuals = _gate(params_src, tol)
    new = replace(params_src, variant=Variant.PRE_LN)
    new_cfg = cfg.with_variant(Variant.PRE_LN, recenter_branch=False)
    report = ConversionReport(Variant.PRE_RMS, Variant.PRE_LN, tol, residuals=residuals)
    _record_changes(report, params, new)
    return new, new_cfg, report


def postln_to_postrms(
    params: ModelParams,
    cfg: ModelConfig,
    tol: float | None = None,
    explicit_recenter: bool = False,
) -> tuple[ModelParams, ModelConfig, ConversionReport]:
    """Post-LN -> Post-RMS.

    Output projections are recentered so each branch output is zero-mean;
    every later main-branch state is a norm output and already zero-mean.
    The embeddings are left alone: block 0 consumes x_0 directly, so the
    Post-RMS forward recenters x_0 on the residual path instead.
    """
    _check_source(params, cfg, Variant.POST_LN)
    if params.has_affine:
        raise AffineError("post-norm models with elementwise affines are not converted")
    tol = _gate_tol(cfg, tol)
    new = params if explicit_recenter else _recenter_outputs(params)
    new = replace(new, variant=Variant.POST_RMS)
    new_cfg = cfg.with_variant(Variant.POST_RMS, recenter_branch=explicit_recenter)
    report = ConversionReport(Variant.POST_LN, Variant.POST_RMS, tol)
    if not explicit_recenter:
        report.residuals = {
            k: v for k, v in zero_mean_residuals(new).items() if not k.startswith("emb.")
        }
    _record_changes(report, params, new)
    return new, new_cfg, report


EDGES = {
    (Variant.PRE_LN, Variant.PRE_RMS): ln_to_rms,
    (Variant.PRE_RMS, Variant.PRE_CRMS): rms_to_crms,
    (Variant.PRE_CRMS, Variant.PRE_RMS): crms_to_rms,
    (Variant.PRE_RMS, Variant.PRE_LN): rms_to_ln,
    (Variant.POST_LN, Variant.POST_RMS): postln_to_postrms,
}


def conversion_path(source: Variant, target: Variant) -> list[Variant]:
    """Shortest variant path from ``source`` to ``target`` (inclusive)."""
    source, target = Variant(source), Variant(target)
    prev: dict[Variant, Variant | None] = {source: None}
    queue = deque([source])
    while queue:
        v = queue.popleft()
        if v is target:
            path = [v]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return path[::-1]
        for a, b in EDGES:
            if a is v and b not in prev:
                prev[b] = v
                queue.append(b)
    raise UndefinedConversionError(f"no conversion from {source.value} to {target.value}")


def convert(
    params: ModelParams, cfg: ModelConfig, target: Variant, tol: float | None = None
) -> tuple[ModelParams, ModelConfig, ConversionReport]:
    """Follow the conversion graph from ``cfg.variant`` to ``target``."""
    path = conversion_path(cfg.variant, target)
    if len(path) == 1:
        report = ConversionReport(cfg.variant, cfg.variant, _gate_tol(cfg, tol))
        return params, cfg, report
    stages = []
    cur, cur_cfg = params, cfg
    for a, b in zip(path, path[1:]):
        cur, cur_cfg, rep = EDGES[(a, b)](cur, cur_cfg, tol)
        stages.append(rep)
    if len(stages) == 1:
        return cur, cur_cfg, stages[0]
    report = ConversionReport(path[0], path[-1], stages[0].tol, stages=stages)
    _record_changes(report, params, cur)
    return cur, cur_cfg, report
