"""Architecture hyperparameters shared by every module."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np


class NormKind(str, enum.Enum):
    LAYER_NORM = "layer_norm"
    RMS_NORM = "rms_norm"
    CRMS_NORM = "crms_norm"


class Variant(str, enum.Enum):
    PRE_LN = "pre-ln"
    PRE_RMS = "pre-rms"
    PRE_CRMS = "pre-crms"
    POST_LN = "post-ln"
    POST_RMS = "post-rms"

    @property
    def norm_kind(self) -> NormKind:
        return _VARIANT_NORM[self]

    @property
    def is_post(self) -> bool:
        return self in (Variant.POST_LN, Variant.POST_RMS)

    @property
    def zero_mean_main_branch(self) -> bool:
        """Variants whose correctness depends on the zero-mean invariant."""
        return self in (Variant.PRE_RMS, Variant.PRE_CRMS, Variant.POST_RMS)


_VARIANT_NORM = {
    Variant.PRE_LN: NormKind.LAYER_NORM,
    Variant.PRE_RMS: NormKind.RMS_NORM,
    Variant.PRE_CRMS: NormKind.CRMS_NORM,
    Variant.POST_LN: NormKind.LAYER_NORM,
    Variant.POST_RMS: NormKind.RMS_NORM,
}


class BlockKind(str, enum.Enum):
    ATTENTION = "attn"
    MLP = "mlp"


DEFAULT_EPS = {"float32": 1e-6, "float64": 1e-12}


@dataclass(frozen=True)
class NormConfig:
    eps: float
    kind: NormKind = NormKind.LAYER_NORM

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    @classmethod
    def for_dtype(cls, dtype, kind: NormKind = NormKind.LAYER_NORM) -> NormConfig:
        return cls(eps=DEFAULT_EPS[np.dtype(dtype).name], kind=kind)


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of one model.

    ``d`` is always the full hidden size; a Pre-CRMS model stores its
    main branch with width ``d - 1`` (see :attr:`width`).
    """

    vocab_size: int
    max_seq: int
    d: int
    blocks: tuple[BlockKind, ...]
    heads: int
    head_dim: int
    mlp_dim: int
    norm: NormConfig
    variant: Variant = Variant.PRE_LN
    causal: bool = True
    dropout_p: float = 0.0
    n_classes: int | None = None
    dtype: str = "float64"
    # Residual-branch outputs are recentered explicitly in the forward pass
    # (the dropout remedy) instead of through recentered output projections.
    recenter_branch: bool = False

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(BlockKind(b) for b in self.blocks))
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "dtype", np.dtype(self.dtype).name)
        if self.n_classes is None:
            object.__setattr__(self, "n_classes", self.vocab_size)
        if self.d < 2:
            raise ValueError("hidden size d must be at least 2")
        if min(self.vocab_size, self.max_seq, self.heads, self.head_dim, self.mlp_dim) < 1:
            raise ValueError("vocab_size, max_seq, heads, head_dim, mlp_dim must be positive")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.dtype not in DEFAULT_EPS:
            raise ValueError(f"unsupported dtype {self.dtype}")
        if self.norm.kind != self.variant.norm_kind:
            raise ValueError(
                f"norm kind {self.norm.kind.value} does not match variant {self.variant.value}"
            )

    @property
    def width(self) -> int:
        return self.d - 1 if self.variant is Variant.PRE_CRMS else self.d

    @property
    def attn_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def branch_dims(self, kind: BlockKind) -> tuple[int, int]:
        """(rows of A_i, columns of A_o) for a block of ``kind``."""
        if kind is BlockKind.ATTENTION:
            return 3 * self.attn_dim, self.attn_dim
        return self.mlp_dim, self.mlp_dim

    def with_variant(self, variant: Variant, **changes) -> ModelConfig:
        variant = Variant(variant)
        norm = replace(self.norm, kind=variant.norm_kind)
        return replace(self, variant=variant, norm=norm, **changes)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_seq": self.max_seq,
            "d": self.d,
            "blocks": [b.value for b in self.blocks],
            "heads": self.heads,
            "head_dim": self.head_dim,
            "mlp_dim": self.mlp_dim,
            "norm": {"eps": self.norm.eps, "kind": self.norm.kind.value},
            "variant": self.variant.value,
            "causal": self.causal,
            "dropout_p": self.dropout_p,
            "n_classes": self.n_classes,
            "dtype": self.dtype,
            "recenter_branch": self.recenter_branch,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        data = dict(data)
        norm = data.pop("norm")
        return cls(norm=NormConfig(eps=float(norm["eps"]), kind=NormKind(norm["kind"])), **data)


def tiny_config(dtype="float64", variant: Variant = Variant.PRE_LN, **overrides) -> ModelConfig:
    """d=16, attn/mlp/attn/mlp, 2 heads, vocab 64, seq 8."""
    values = dict(
        vocab_size=64,
        max_seq=8,
        d=16,
        blocks=("attn", "mlp", "attn", "mlp"),
        heads=2,
        head_dim=8,
        mlp_dim=64,
    )
    values.update(overrides)
    variant = Variant(variant)
    norm = NormConfig.for_dtype(dtype, variant.norm_kind)
    return ModelConfig(norm=norm, variant=variant, dtype=np.dtype(dtype).name, **values)


def small_config(dtype="float64", variant: Variant = Variant.PRE_LN, **overrides) -> ModelConfig:
    values = dict(
        vocab_size=256,
        max_seq=32,
        d=64,
        blocks=("attn", "mlp") * 3,
        heads=4,
        head_dim=16,
        mlp_dim=256,
    )
    values.update(overrides)
    return tiny_config(dtype, variant, **values)


def alternating_blocks(n_layers: int) -> tuple[BlockKind, ...]:
    return tuple(BlockKind.ATTENTION if i % 2 == 0 else BlockKind.MLP for i in range(n_layers))


__all__ = [
    "BlockKind",
    "DEFAULT_EPS",
    "ModelConfig",
    "NormConfig",
    "NormKind",
    "Variant",
    "alternating_blocks",
    "small_config",
    "tiny_config",
]
