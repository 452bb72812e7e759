"""Acceptance suite: one test and one PASS/FAIL line per criterion."""

import time

import numpy as np
import pytest

from conftest import record_criterion
from normunify import checkpoint as ck
from normunify import rng
from normunify import tensor as T
from normunify.bench import forward_ops, norm_kernel_ops
from normunify.config import Variant, alternating_blocks, tiny_config
from normunify.convert import (
    crms_to_rms,
    ln_to_crms,
    ln_to_rms,
    postln_to_postrms,
    recenter_linear,
    rms_to_crms,
    rms_to_ln,
)
from normunify.model import forward, init_params
from normunify.norms import layer_norm, recenter, rms_norm
from normunify.verify import drift_audit, grad_equivalence_check, verify_equivalence

LOGIT_TOL = {"float64": 1e-10, "float32": 1e-4}
# init scales spread from the usual 0.02 up to 1.0, so branch outputs range
# from negligible to dominant
SCALES = np.geomspace(0.02, 1.0, 20)


def _edges(seed: int, scale: float, dtype: str):
    """(label, model_a, cfg_a, model_b, cfg_b) for every conversion edge."""
    cfg = tiny_config(dtype)
    ln = init_params(cfg, seed, scale)
    rms, rcfg, _ = ln_to_rms(ln, cfg)
    crms, ccfg, _ = rms_to_crms(rms, rcfg)
    direct, dcfg, _ = ln_to_crms(ln, cfg)
    back, bcfg, _ = crms_to_rms(crms, ccfg)
    ln2, lcfg, _ = rms_to_ln(rms, rcfg)
    pcfg = tiny_config(dtype, Variant.POST_LN)
    post = init_params(pcfg, seed, scale)
    postrms, prcfg, _ = postln_to_postrms(post, pcfg)
    return [
        ("ln->rms", ln, cfg, rms, rcfg),
        ("rms->crms", rms, rcfg, crms, ccfg),
        ("ln->crms", ln, cfg, direct, dcfg),
        ("crms->rms", crms, ccfg, back, bcfg),
        ("rms->ln", rms, rcfg, ln2, lcfg),
        ("postln->postrms", post, pcfg, postrms, prcfg),
    ]


def test_c01_equivalence_suite():
    start = time.perf_counter()
    worst = {"float64": 0.0, "float32": 0.0}
    worst_edge = {}
    for dtype in ("float64", "float32"):
        for i, scale in enumerate(SCALES):
            for label, a, ca, b, cb in _edges(i, float(scale), dtype):
                r = verify_equivalence(a, b, ca, cb, seed=1000 + i, n_seqs=16)
                if r.max_abs_logit_diff >= worst[dtype]:
                    worst[dtype] = r.max_abs_logit_diff
                    worst_edge[dtype] = label
    elapsed = time.perf_counter() - start
    ok = worst["float64"] <= 1e-10 and worst["float32"] <= 1e-4 and elapsed < 10.0
    record_criterion(
        1,
        ok,
        f"20 models x 6 edges x 16 seqs: f64 max {worst['float64']:.2e} ({worst_edge['float64']}) <= 1e-10, "
        f"f32 max {worst['float32']:.2e} ({worst_edge['float32']}) <= 1e-4, {elapsed:.2f} s < 10 s",
    )
    assert ok


def test_c02_lemma_identity():
    g = rng.philox(2, rng.PERTURB)
    worst_identity = worst_mean = 0.0
    for _ in range(200):
        m, n = int(g.integers(1, 9)), int(g.integers(1, 9))
        A = T.as_tensor(g.standard_normal((m, n)))
        b = T.as_tensor(g.standard_normal(m))
        x = T.as_tensor(g.standard_normal((1, n)))
        A_hat, b_hat = recenter_linear(A, b)
        lhs = T.linear(x, A_hat, b_hat)
        y = T.linear(x, A, b)
        rhs = T.sub(y, T.row_mean(y, keepdims=True))
        worst_identity = max(worst_identity, float(np.max(np.abs(lhs - rhs))))
        worst_mean = max(worst_mean, abs(float(np.mean(lhs))))
    ok = worst_identity <= 1e-12 and worst_mean <= 1e-14
    record_criterion(
        2,
        ok,
        f"200 (A,b,x) triples: identity residual {worst_identity:.2e} <= 1e-12, "
        f"|mean| {worst_mean:.2e} <= 1e-14",
    )
    assert ok


def test_c03_zero_mean_drift():
    cfg = tiny_config()
    tiny_worst = 0.0
    for i, scale in enumerate(SCALES[::4]):
        rms, rcfg, _ = ln_to_rms(init_params(cfg, i, float(scale)), cfg)
        tiny_worst = max(tiny_worst, drift_audit(rms, rcfg, seed=i, dtypes=("float64",)).max("float64"))
    deep = tiny_config(
        "float32",
        d=64,
        heads=4,
        head_dim=16,
        mlp_dim=256,
        blocks=tuple(b.value for b in alternating_blocks(48)),
    )
    deep_worst = 0.0
    for scale in (0.02, 0.2, 1.0):
        rms, rcfg, _ = ln_to_rms(init_params(deep, 0, scale), deep)
        deep_worst = max(deep_worst, drift_audit(rms, rcfg, dtypes=("float32",)).max("float32"))
    ok = tiny_worst <= 1e-12 and deep_worst <= 1e-4
    record_criterion(
        3,
        ok,
        f"tiny f64 per-block drift {tiny_worst:.2e} <= 1e-12; "
        f"deep f32 (d=64, L=48) drift {deep_worst:.2e} <= 1e-4",
    )
    assert ok


def _bytes_equal(a, b):
    na, nb = a.named_tensors(), b.named_tensors()
    return list(na) == list(nb) and all(x.tobytes() == y.tobytes() for x, y in zip(na.values(), nb.values()))


def test_c04_roundtrip(tmp_path):
    worst = 0.0
    exact = True
    for i, scale in enumerate(SCALES[::5]):
        cfg = tiny_config()
        ln = init_params(cfg, 40 + i, float(scale))
        crms, ccfg, _ = ln_to_crms(ln, cfg)
        rms, rcfg, _ = crms_to_rms(crms, ccfg)
        back, bcfg, _ = rms_to_ln(rms, rcfg)
        worst = max(worst, verify_equivalence(ln, back, cfg, bcfg).max_abs_logit_diff)
        for name, p, c in (("ln", ln, cfg), ("crms", crms, ccfg), ("back", back, bcfg)):
            path = tmp_path / f"{i}-{name}"
            ck.save(p, c, path)
            loaded, lcfg = ck.load(path)
            exact &= _bytes_equal(p, loaded) and lcfg == c
    cfg32 = tiny_config("float32")
    p32 = init_params(cfg32, 3, 0.5)
    ck.save(p32, cfg32, tmp_path / "f32")
    exact &= _bytes_equal(p32, ck.load(tmp_path / "f32")[0])
    ok = worst <= 1e-10 and exact
    record_criterion(
        4,
        ok,
        f"ln->crms->rms->ln logits {worst:.2e} <= 1e-10; save/load bit-exact: {exact}",
    )
    assert ok


def test_c05_gradient_equivalence():
    cfg = tiny_config()
    worst_rel = worst_shift = 0.0
    all_ok = True
    for seed, scale in ((0, 0.02), (1, 0.2), (2, 0.5), (3, 1.0)):
        r = grad_equivalence_check(init_params(cfg, seed, scale), cfg, seed=seed, k_coords=32, h=1e-5)
        worst_rel = max(worst_rel, r.max_rel)
        worst_shift = max(worst_shift, abs(r.shift_derivative))
        all_ok &= r.passed and len(r.coords) == 32
    ok = all_ok and worst_rel <= 1e-4 and worst_shift <= 1e-8
    record_criterion(
        5,
        ok,
        f"4 models x 32 coords, h=1e-5: max rel disagreement {worst_rel:.2e} <= 1e-4; "
        f"shift derivative {worst_shift:.2e} <= 1e-8",
    )
    assert ok


def test_c06_dropout_equivalence():
    worst = 0.0
    drift = 0.0
    tokens = np.stack(rng.random_tokens(6, 16, 8, 64))
    for i, scale in enumerate(SCALES[::4]):
        cfg = tiny_config(dropout_p=0.1)
        ln = init_params(cfg, 60 + i, float(scale))
        rms, rcfg, _ = ln_to_rms(ln, cfg, explicit_recenter=True)
        for seed in (0, 1, 2):
            a = forward(tokens, ln, cfg, seed=seed)
            b = forward(tokens, rms, rcfg, seed=seed)
            worst = max(worst, float(np.max(np.abs(a.logits - b.logits))))
            drift = max(drift, max(b.block_means()))
    ok = worst <= 1e-10 and drift <= 1e-12
    record_criterion(
        6,
        ok,
        f"p=0.1 replayed masks, explicit recentering: logits {worst:.2e} <= 1e-10 "
        f"(main-branch drift {drift:.2e})",
    )
    assert ok


def test_c07_norm_invariances():
    # x ~ N(0, 1) of the reference width 16, shift k ~ U[-10, 10]
    tol = {"float32": 1e-6, "float64": 1e-12}
    eps = {"float32": 1e-6, "float64": 1e-12}
    g = rng.philox(7, rng.PERTURB)
    raw = g.standard_normal((1000, 16))
    k = g.uniform(-10, 10, (1000, 1))
    shift = {}
    zero_mean = {}
    for dtype in ("float32", "float64"):
        x = T.as_tensor(raw, dtype)
        shifted = T.add(x, T.as_tensor(k, dtype))
        shift[dtype] = float(np.max(np.abs(layer_norm(shifted, eps[dtype]) - layer_norm(x, eps[dtype]))))
        xc = recenter(x)
        zero_mean[dtype] = float(np.max(np.abs(layer_norm(xc, eps[dtype]) - rms_norm(xc, eps[dtype]))))
    ok = all(shift[d] <= tol[d] and zero_mean[d] <= tol[d] for d in tol)
    record_criterion(
        7,
        ok,
        f"1000 vectors: shift invariance f64 {shift['float64']:.2e} <= 1e-12, "
        f"f32 {shift['float32']:.2e} <= 1e-6; zero-mean LN=RMS f64 {zero_mean['float64']:.2e} <= 1e-12, "
        f"f32 {zero_mean['float32']:.2e} <= 1e-6",
    )
    assert ok


def test_c08_op_counts():
    lines = []
    ok = True
    for d in (16, 64, 256, 1024):
        ln = sum(norm_kernel_ops("layer_norm", d).values())
        rms = sum(norm_kernel_ops("rms_norm", d).values())
        crms = sum(norm_kernel_ops("crms_norm", d).values())
        ok &= rms < ln and crms < ln
        ok &= all(isinstance(v, int) for v in (ln, rms, crms))
        lines.append(f"d={d}: ln {ln} rms {rms} crms {crms}")
    cfg = tiny_config()
    ln_model = init_params(cfg, 0, 0.5)
    rms_model, rcfg, _ = ln_to_rms(ln_model, cfg)
    tokens = np.arange(8)
    ln_flops = forward_ops(tokens, ln_model, cfg).total()
    rms_flops = forward_ops(tokens, rms_model, rcfg).total()
    ok &= rms_flops < ln_flops and forward_ops(tokens, ln_model, cfg).total() == ln_flops
    record_criterion(
        8,
        ok,
        "; ".join(lines) + f"; tiny forward pre-rms {rms_flops} < pre-ln {ln_flops}",
    )
    assert ok


def test_c09_size_saving(tmp_path):
    ok = True
    details = []
    for dtype, itemsize in (("float64", 8), ("float32", 4)):
        cfg = tiny_config(dtype)
        ln = init_params(cfg, 9, 0.5)
        crms, ccfg, _ = ln_to_crms(ln, cfg)
        ck.save(ln, cfg, tmp_path / f"ln-{dtype}")
        ck.save(crms, ccfg, tmp_path / f"crms-{dtype}")
        saved = ck.checkpoint_bytes(tmp_path / f"ln-{dtype}") - ck.checkpoint_bytes(tmp_path / f"crms-{dtype}")
        # dropped: a column of token/pos embeddings and head.W, and per block
        # a column of A_i (d_i long), a row of A_o (d_o long) and one b_o entry
        d_attn = (3 * cfg.heads * cfg.head_dim, cfg.heads * cfg.head_dim)
        d_mlp = (cfg.mlp_dim, cfg.mlp_dim)
        per_block = sum(
            (d_attn if k.value == "attn" else d_mlp)[0] + (d_attn if k.value == "attn" else d_mlp)[1] + 1
            for k in cfg.blocks
        )
        expected = (cfg.vocab_size + cfg.max_seq + cfg.n_classes + per_block) * itemsize
        ok &= saved == expected
        details.append(f"{dtype} saved {saved} B == {expected} B")
    record_criterion(9, ok, "; ".join(details))
    assert ok


def test_c10_negative_controls(tmp_path):
    cfg = tiny_config()
    ln = init_params(cfg, 10, 0.5)
    rms, rcfg, _ = ln_to_rms(ln, cfg)
    failures = 0
    targets = ["emb.token", "block.0.attn.A_i", "block.1.mlp.A_o", "block.3.mlp.b_i", "head.W"]
    for name in targets:
        arr = np.array(rms.named_tensors()[name])
        arr.flat[0] += 1e-2
        bad = rms.replace_tensors({name: arr})
        failures += not verify_equivalence(ln, bad, cfg, rcfg).passed
    ck.save(rms, rcfg, tmp_path / "m")
    blob = tmp_path / "m" / ck.BLOB
    blob.write_bytes(blob.read_bytes()[:-16])
    try:
        ck.load(tmp_path / "m")
        truncated = "loaded"
    except ck.ChecksumError:
        truncated = "checksum error"
    except Exception as exc:  # any other failure is still a wrong outcome
        truncated = type(exc).__name__
    ok = failures == len(targets) and truncated == "checksum error"
    record_criterion(
        10,
        ok,
        f"1e-2 perturbations failing verification: {failures}/{len(targets)}; truncated blob -> {truncated}",
    )
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
