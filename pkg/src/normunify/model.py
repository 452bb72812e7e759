"""Forward pass of the abstracted transformer in every variant.

A model is preprocessing (token + position embeddings), a stack of
residual blocks, and a classifier head. Each residual branch is
``Linear(A_i, b_i) -> g -> Linear(A_o, b_o)`` where ``g`` is either exact
GELU or multi-head scaled dot-product attention over a fused QKV
projection. Weights follow ``y = A x + b`` with ``A`` shaped (out, in).

Pre variants:  x_{l+1} = x_l + F_l(Norm(x_l)),   logits = head(Norm(x_L))
Post variants: x_{l+1} = Norm(x_l + F_l(x_l)),   logits = head(x_L)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from normunify import rng
from normunify import tensor as T
from normunify.config import BlockKind, ModelConfig, Variant
from normunify.norms import AffineParams, apply_affine, normalize, recenter


class ShapeError(T.TensorError):
    """A parameter tensor does not fit the model config."""


@dataclass(frozen=True)
class BlockParams:
    kind: BlockKind
    A_i: np.ndarray
    b_i: np.ndarray
    A_o: np.ndarray
    b_o: np.ndarray
    norm_affine: AffineParams | None = None


@dataclass(frozen=True)
class ModelParams:
    variant: Variant
    token_emb: np.ndarray
    pos_emb: np.ndarray
    blocks: tuple[BlockParams, ...]
    head_W: np.ndarray
    head_b: np.ndarray
    final_affine: AffineParams | None = None

    @property
    def dtype(self) -> np.dtype:
        return self.token_emb.dtype

    @property
    def has_affine(self) -> bool:
        return self.final_affine is not None or any(b.norm_affine is not None for b in self.blocks)

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Tensors under their checkpoint names, in checkpoint order."""
        out = {"emb.token": self.token_emb, "emb.pos": self.pos_emb}
        for l, bp in enumerate(self.blocks):
            prefix = f"block.{l}.{bp.kind.value}"
            if bp.norm_affine is not None:
                out[f"{prefix}.norm.gamma"] = bp.norm_affine.gamma
                out[f"{prefix}.norm.beta"] = bp.norm_affine.beta
            out[f"{prefix}.A_i"] = bp.A_i
            out[f"{prefix}.b_i"] = bp.b_i
            out[f"{prefix}.A_o"] = bp.A_o
            out[f"{prefix}.b_o"] = bp.b_o
        if self.final_affine is not None:
            out["final.gamma"] = self.final_affine.gamma
            out["final.beta"] = self.final_affine.beta
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], variant: Variant, kinds) -> ModelParams:
        try:
            blocks = []
            for l, kind in enumerate(kinds):
                kind = BlockKind(kind)
                prefix = f"block.{l}.{kind.value}"
                affine = None
                if f"{prefix}.norm.gamma" in named:
                    affine = AffineParams(named[f"{prefix}.norm.gamma"], named[f"{prefix}.norm.beta"])
                blocks.append(
                    BlockParams(
                        kind=kind,
                        A_i=named[f"{prefix}.A_i"],
                        b_i=named[f"{prefix}.b_i"],
                        A_o=named[f"{prefix}.A_o"],
                        b_o=named[f"{prefix}.b_o"],
                        norm_affine=affine,
                    )
                )
            final = None
            if "final.gamma" in named:
                final = AffineParams(named["final.gamma"], named["final.beta"])
            params = cls(
                variant=Variant(variant),
                token_emb=named["emb.token"],
                pos_emb=named["emb.pos"],
                blocks=tuple(blocks),
                head_W=named["head.W"],
                head_b=named["head.b"],
                final_affine=final,
            )
        except KeyError as exc:
            raise ShapeError(f"missing tensor {exc.args[0]}") from None
        expected = set(params.named_tensors())
        extra = sorted(set(named) - expected)
        if extra:
            raise ShapeError(f"unexpected tensors: {', '.join(extra)}")
        return params

    def replace_tensors(self, updates: dict[str, np.ndarray]) -> ModelParams:
        named = self.named_tensors()
        unknown = set(updates) - set(named)
        if unknown:
            raise KeyError(f"unknown tensors: {sorted(unknown)}")
        named.update(updates)
        return ModelParams.from_named(named, self.variant, self.kinds)

    @property
    def kinds(self) -> tuple[BlockKind, ...]:
        return tuple(b.kind for b in self.blocks)

    def astype(self, dtype) -> ModelParams:
        named = {k: T.as_tensor(v, dtype) for k, v in self.named_tensors().items()}
        return ModelParams.from_named(named, self.variant, self.kinds)


@dataclass
class ForwardTrace:
    states: list[np.ndarray]
    logits: np.ndarray
    variant: Variant = Variant.PRE_LN
    d: int = 0

    def block_means(self) -> list[float]:
        """max |mean| of each main-branch state x_0..x_L, in full dimension."""
        out = []
        for x in self.states:
            if self.variant is Variant.PRE_CRMS:
                total = np.cumsum(x, axis=-1)[..., -1]
                # the implicit last coordinate is -total, so the d-sum is total - total
                means = (total - total) / self.d
            else:
                means = np.cumsum(x, axis=-1)[..., -1] / x.shape[-1]
            out.append(float(np.max(np.abs(means))))
        return out


def cast(params: ModelParams, cfg: ModelConfig, dtype) -> tuple[ModelParams, ModelConfig]:
    dtype = np.dtype(dtype)
    return params.astype(dtype), replace(cfg, dtype=dtype.name)


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    w = cfg.width
    shapes = {"emb.token": (cfg.vocab_size, w), "emb.pos": (cfg.max_seq, w)}
    for l, kind in enumerate(cfg.blocks):
        d_i, d_o = cfg.branch_dims(kind)
        p = f"block.{l}.{kind.value}"
        shapes[f"{p}.norm.gamma"] = (w,)
        shapes[f"{p}.norm.beta"] = (w,)
        shapes[f"{p}.A_i"] = (d_i, w)
        shapes[f"{p}.b_i"] = (d_i,)
        shapes[f"{p}.A_o"] = (w, d_o)
        shapes[f"{p}.b_o"] = (w,)
    shapes["final.gamma"] = (w,)
    shapes["final.beta"] = (w,)
    shapes["head.W"] = (cfg.n_classes, w)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    """Raise :class:`ShapeError` if ``params`` does not fit ``cfg``."""
    if params.variant is not cfg.variant:
        raise ShapeError(f"params are {params.variant.value}, config is {cfg.variant.value}")
    if len(params.blocks) != len(cfg.blocks):
        raise ShapeError(f"{len(params.blocks)} blocks, config has {len(cfg.blocks)}")
    if cfg.variant.is_post and params.final_affine is not None:
        raise ShapeError("post-norm models have no final norm to carry an affine")
    shapes = expected_shapes(cfg)
    for name, arr in params.named_tensors().items():
        if arr.dtype != cfg.np_dtype:
            raise ShapeError(f"{name}: dtype {arr.dtype}, config says {cfg.dtype}")
        if arr.shape != shapes[name]:
            raise ShapeError(f"{name}: shape {arr.shape}, expected {shapes[name]}")


def init_params(cfg: ModelConfig, seed: int, scale: float = 0.02) -> ModelParams:
    """Normal(0, scale) init of every tensor (biases and embeddings included).

    Tensor ``i`` in checkpoint order draws from its own Philox counter, so
    its values depend only on (seed, i, shape).
    """
    dtype = cfg.np_dtype
    named = {}
    shapes = expected_shapes(cfg)
    order = [n for n in shapes if ".norm." not in n and not n.startswith("final.")]
    for i, name in enumerate(order):
        draw = rng.philox(seed, rng.INIT, i).standard_normal(shapes[name])
        named[name] = T.as_tensor(draw * scale, dtype)
    return ModelParams.from_named(named, cfg.variant, cfg.blocks)


def zero_params(cfg: ModelConfig) -> ModelParams:
    shapes = expected_shapes(cfg)
    named = {
        n: T.as_tensor(np.zeros(s), cfg.np_dtype)
        for n, s in shapes.items()
        if ".norm." not in n and not n.startswith("final.")
    }
    return ModelParams.from_named(named, cfg.variant, cfg.blocks)


def with_random_affine(params: ModelParams, cfg: ModelConfig, seed: int) -> ModelParams:
    """Attach gamma ~ 1 + N(0, 0.1), beta ~ N(0, 0.1) to every norm."""
    w = cfg.width
    dtype = cfg.np_dtype

    def draw(i: int) -> AffineParams:
        g = rng.philox(seed, rng.INIT, 10_000 + i)
        return AffineParams(
            T.as_tensor(1.0 + 0.1 * g.standard_normal(w), dtype),
            T.as_tensor(0.1 * g.standard_normal(w), dtype),
        )

    blocks = tuple(replace(bp, norm_affine=draw(l)) for l, bp in enumerate(params.blocks))
    final = None if cfg.variant.is_post else draw(len(blocks))
    return replace(params, blocks=blocks, final_affine=final)


# ---------------------------------------------------------------------------
# forward pieces


def preprocess(tokens, params: ModelParams) -> np.ndarray:
    """``x_0[t] = token_emb[tokens[t]] + pos_emb[t]``.

    ``tokens`` is one sequence, or a (batch, seq) array of equal-length
    sequences processed together.
    """
    toks = np.asarray(tokens)
    if toks.ndim not in (1, 2) or toks.size == 0:
        raise ValueError("tokens must be a non-empty sequence or (batch, seq) array")
    if not np.issubdtype(toks.dtype, np.integer):
        raise ValueError("tokens must be integers")
    vocab, max_seq = params.token_emb.shape[0], params.pos_emb.shape[0]
    if toks.min() < 0 or toks.max() >= vocab:
        raise IndexError(f"token index outside vocabulary of {vocab}")
    seq = toks.shape[-1]
    if seq > max_seq:
        raise IndexError(f"sequence length {seq} exceeds max_seq {max_seq}")
    return T.add(params.token_emb[toks], params.pos_emb[:seq])


def _cols(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    out = np.ascontiguousarray(x[..., start:stop])
    out.flags.writeable = False
    return out


def attention(qkv: np.ndarray, heads: int, head_dim: int, causal: bool) -> np.ndarray:
    """Multi-head scaled dot-product attention on a fused (seq, 3*h*hd) input."""
    inner = heads * head_dim
    if qkv.shape[-1] != 3 * inner:
        raise ShapeError(f"fused qkv width {qkv.shape[-1]}, expected {3 * inner}")
    inv_scale = 1.0 / math.sqrt(head_dim)
    outs = []
    for h in range(heads):
        lo = h * head_dim
        q = _cols(qkv, lo, lo + head_dim)
        k = _cols(qkv, inner + lo, inner + lo + head_dim)
        v = _cols(qkv, 2 * inner + lo, 2 * inner + lo + head_dim)
        scores = T.scale(T.matmul(q, T.transpose(k)), inv_scale)
        weights = T.softmax_last_dim(scores, causal=causal)
        outs.append(T.matmul(weights, v))
    out = outs[0]
    for o in outs[1:]:
        out = T.concat_last(out, o)
    return out


def residual_branch(x_norm: np.ndarray, bp: BlockParams, cfg: ModelConfig) -> np.ndarray:
    """``Linear(A_i, b_i) -> g -> Linear(A_o, b_o)`` on an already-normalized input."""
    u = T.linear(x_norm, bp.A_i, bp.b_i)
    if bp.kind is BlockKind.ATTENTION:
        u = attention(u, cfg.heads, cfg.head_dim, cfg.causal)
    else:
        u = T.gelu(u)
    return T.linear(u, bp.A_o, bp.b_o)


def dropout_mask(p: float, seed: int, block: int, shape: tuple[int, ...], dtype) -> np.ndarray:
    """Inverted-dropout multipliers, 0 or 1/(1-p), for a (seq, w) or
    (batch, seq, w) activation.

    The row at (batch b, position t) comes from Philox counter
    (block, b * 2^32 + t): masks replay exactly across variants and dtypes
    whenever the width matches, and an unbatched sequence gets the masks
    of batch entry 0.
    """
    keep_scale = 1.0 / (1.0 - p)
    batch, seq, width = (1,) * (3 - len(shape)) + tuple(shape)
    u = np.empty((batch, seq, width))
    for b in range(batch):
        for t in range(seq):
            u[b, t] = rng.philox(seed, rng.DROPOUT, block, (b << 32) + t).random(width)
    mask = np.where(u >= p, keep_scale, 0.0).reshape(shape)
    return T.as_tensor(mask, dtype)


def dropout_residual(x: np.ndarray, p: float, seed: int, block: int) -> np.ndarray:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    return T.mul(x, dropout_mask(p, seed, block, x.shape, x.dtype))


def _norm(x: np.ndarray, cfg: ModelConfig, affine: AffineParams | None) -> np.ndarray:
    with T.op_scope("norm"):
        h = normalize(x, cfg.norm)
        if affine is not None:
            h = apply_affine(h, affine)
    return h


def _branch_output(f: np.ndarray, cfg: ModelConfig, block: int, seed: int) -> np.ndarray:
    f = dropout_residual(f, cfg.dropout_p, seed, block)
    if cfg.variant in (Variant.PRE_RMS, Variant.POST_RMS) and (
        cfg.recenter_branch or cfg.dropout_p > 0
    ):
        with T.op_scope("recenter"):
            f = recenter(f)
    return f


def forward(tokens, params: ModelParams, cfg: ModelConfig, seed: int = 0) -> ForwardTrace:
    """Run the model on one token sequence (or a batch of equal-length ones,
    see :func:`preprocess`); ``seed`` drives dropout only."""
    if params.variant is not cfg.variant:
        raise ValueError(f"params are {params.variant.value}, config is {cfg.variant.value}")
    x = preprocess(tokens, params)
    states = [x]
    post = cfg.variant.is_post
    for l, bp in enumerate(params.blocks):
        try:
            if post:
                f = _branch_output(residual_branch(x, bp, cfg), cfg, l, seed)
                base = x
                if l == 0 and cfg.variant is Variant.POST_RMS:
                    # x_0 is not a norm output, so its mean is removed explicitly
                    with T.op_scope("recenter"):
                        base = recenter(x)
                x = _norm(T.add(base, f), cfg, bp.norm_affine)
            else:
                h = _norm(x, cfg, bp.norm_affine)
                f = _branch_output(residual_branch(h, bp, cfg), cfg, l, seed)
                x = T.add(x, f)
        except T.NonFiniteError as exc:
            raise T.NonFiniteError(f"block {l}: {exc}") from exc
        states.append(x)
    try:
        h = x if post else _norm(x, cfg, params.final_affine)
        logits = T.linear(h, params.head_W, params.head_b)
    except T.NonFiniteError as exc:
        raise T.NonFiniteError(f"head: {exc}") from exc
    return ForwardTrace(states=states, logits=logits, variant=cfg.variant, d=cfg.d)


def loss(logits: np.ndarray, targets) -> float:
    """Mean cross-entropy over positions, via a max-shifted log-sum-exp."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    z = z.reshape(-1, z.shape[-1])
    t = t.reshape(-1)
    if t.shape != (z.shape[0],):
        raise ValueError(f"{t.size} targets for {z.shape[0]} positions")
    if t.min() < 0 or t.max() >= z.shape[1]:
        raise IndexError("target class index out of range")
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return float(np.mean(lse - z[np.arange(z.shape[0]), t]))
