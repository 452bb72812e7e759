import json

import numpy as np
import pytest

from normunify.config import Variant, tiny_config
from normunify.convert import convert, ln_to_rms
from normunify.model import init_params, with_random_affine, zero_params
from normunify.verify import (
    FDInstabilityError,
    IncompatibleModelsError,
    central_difference,
    drift_audit,
    fd_gradient,
    grad_equivalence_check,
    run_batch,
    verify_equivalence,
    worker_count,
)


def test_model_vs_itself(tiny_ln):
    params, cfg = tiny_ln
    r = verify_equivalence(params, params, cfg, cfg, n_seqs=4)
    assert r.max_abs_logit_diff == 0.0 and r.passed
    assert r.drift_a is None


def test_converted_models_pass(tiny_ln):
    params, cfg = tiny_ln
    for target in (Variant.PRE_RMS, Variant.PRE_CRMS):
        other, ocfg, _ = convert(params, cfg, target)
        r = verify_equivalence(params, other, cfg, ocfg)
        assert r.passed and r.max_abs_logit_diff <= 1e-10
        assert max(r.drift_b) <= 1e-12


def test_reinitialised_model_fails(tiny_ln):
    params, cfg = tiny_ln
    other = init_params(cfg, 999, 0.5)
    r = verify_equivalence(params, other, cfg, cfg, n_seqs=4)
    assert not r.passed and r.max_abs_logit_diff > 1e-2


def test_single_weight_perturbation_fails(tiny_ln):
    params, cfg = tiny_ln
    rms, rcfg, _ = ln_to_rms(params, cfg)
    A = np.array(rms.blocks[0].A_i)
    A[0, 0] += 1e-2
    bad = rms.replace_tensors({"block.0.attn.A_i": A})
    assert not verify_equivalence(params, bad, cfg, rcfg).passed


def test_symmetric(tiny_ln):
    params, cfg = tiny_ln
    other, ocfg, _ = convert(params, cfg, Variant.PRE_CRMS)
    ab = verify_equivalence(params, other, cfg, ocfg, n_seqs=4)
    ba = verify_equivalence(other, params, ocfg, cfg, n_seqs=4)
    assert ab.max_abs_logit_diff == ba.max_abs_logit_diff


def test_incompatible(tiny_ln):
    params, cfg = tiny_ln
    other_cfg = tiny_config(vocab_size=32)
    with pytest.raises(IncompatibleModelsError):
        verify_equivalence(params, init_params(other_cfg, 0), cfg, other_cfg)
    f32 = tiny_config("float32")
    with pytest.raises(IncompatibleModelsError):
        verify_equivalence(params, init_params(f32, 0), cfg, f32)


def test_dtype_override_and_f32(tiny_ln):
    params, cfg = tiny_ln
    other, ocfg, _ = convert(params, cfg, Variant.PRE_RMS)
    r = verify_equivalence(params, other, cfg, ocfg, dtype="float32")
    assert r.dtype == "float32" and r.tol == 1e-4 and r.passed


def test_report_json(tiny_ln):
    params, cfg = tiny_ln
    data = json.loads(verify_equivalence(params, params, cfg, cfg, n_seqs=2, seq_len=5).to_json())
    assert data["tokens"] == {"seed": 0, "count": 2, "seq_len": 5}
    assert data["passed"]


def test_threads_do_not_change_results(tiny_ln, monkeypatch):
    params, cfg = tiny_ln
    tokens = np.arange(48).reshape(6, 8) % 64
    serial = np.concatenate([t.logits for t in run_batch(tokens, params, cfg)])
    monkeypatch.setenv("NORMUNIFY_THREADS", "3")
    assert worker_count() == 3
    threaded = np.concatenate([t.logits for t in run_batch(tokens, params, cfg)])
    assert np.array_equal(serial, threaded)
    monkeypatch.setenv("NORMUNIFY_THREADS", "many")
    with pytest.raises(ValueError):
        worker_count()


def test_fd_examples():
    assert fd_gradient(lambda th: float(th[0] ** 2), np.array([3.0]), 0, h=1e-4) == pytest.approx(6.0, abs=1e-6)
    assert central_difference(lambda t: 5.0, 1e-4, check=False) == 0.0
    assert central_difference(lambda t: (t - 0.0) ** 2, 1e-3, check=False) == 0.0
    with pytest.raises(FDInstabilityError):
        central_difference(lambda t: 5.0, 1e-4)
    with pytest.raises(ValueError):
        central_difference(lambda t: t, 0.0)
    with pytest.raises(ArithmeticError):
        central_difference(lambda t: float("nan"), 1e-3)


def test_grad_check_passes(tiny_ln):
    params, cfg = tiny_ln
    r = grad_equivalence_check(params, cfg, k_coords=16)
    assert r.passed, r.to_text()
    assert r.max_rel <= 1e-4 and abs(r.shift_derivative) <= 1e-8
    groups = {name.rsplit(".", 1)[-1] for name, _ in r.coords}
    assert {"A_o", "b_o", "A_i"} <= groups and any(n.startswith("emb.") for n, _ in r.coords)
    assert json.loads(r.to_json())["passed"]


def test_grad_check_step_robust(tiny_ln):
    params, cfg = tiny_ln
    a = grad_equivalence_check(params, cfg, k_coords=12, h=1e-4)
    b = grad_equivalence_check(params, cfg, k_coords=12, h=5e-5)
    assert a.passed == b.passed


def test_grad_check_zero_model(tiny_cfg):
    r = grad_equivalence_check(zero_params(tiny_cfg), tiny_cfg, k_coords=8)
    assert r.passed


def test_grad_check_preconditions(tiny_ln):
    params, cfg = tiny_ln
    rms, rcfg, _ = ln_to_rms(params, cfg)
    with pytest.raises(ValueError):
        grad_equivalence_check(rms, rcfg)
    with pytest.raises(ValueError):
        grad_equivalence_check(params, cfg.with_variant(Variant.PRE_LN, dropout_p=0.1))
    with pytest.raises(ValueError):
        grad_equivalence_check(with_random_affine(params, cfg, 0), cfg)


def test_drift_audit(tiny_ln):
    params, cfg = tiny_ln
    rms, rcfg, _ = ln_to_rms(params, cfg)
    table = drift_audit(rms, rcfg, n_seqs=4)
    assert table.max("float64") <= 1e-14
    assert table.max("float32") <= 1e-5
    assert len(table.per_dtype["float64"]) == len(cfg.blocks) + 1
    assert "x_0" in table.to_text()
    z = zero_params(rcfg)
    assert drift_audit(z, rcfg, n_seqs=2).max("float64") == 0.0
    with pytest.raises(ValueError):
        drift_audit(params, cfg)
