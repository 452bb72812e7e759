import json

import numpy as np
import pytest

from normunify import checkpoint as ck
from normunify.config import Variant, tiny_config
from normunify.convert import convert
from normunify.model import init_params
from normunify.verify import verify_equivalence


def tensors_equal(a, b):
    na, nb = a.named_tensors(), b.named_tensors()
    return list(na) == list(nb) and all(
        x.dtype == y.dtype and x.tobytes() == y.tobytes() for x, y in zip(na.values(), nb.values())
    )


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_roundtrip_bit_exact(tmp_path, dtype):
    cfg = tiny_config(dtype)
    params = init_params(cfg, 1, 0.5)
    ck.save(params, cfg, tmp_path / "m")
    loaded, lcfg = ck.load(tmp_path / "m")
    assert lcfg == cfg and tensors_equal(params, loaded)
    r = verify_equivalence(params, loaded, cfg, lcfg, n_seqs=2)
    assert r.max_abs_logit_diff == 0.0


def test_deterministic_bytes(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, 2)
    for name in ("a", "b"):
        ck.save(params, cfg, tmp_path / name)
    for f in (ck.MANIFEST, ck.BLOB):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_manifest_layout(tmp_path):
    cfg = tiny_config()
    ck.save(init_params(cfg, 0), cfg, tmp_path)
    m = json.loads((tmp_path / ck.MANIFEST).read_text())
    assert m["format_version"] == ck.FORMAT_VERSION
    assert m["checksum"]["algorithm"] == "crc32"
    end = 0
    for e in m["tensors"]:
        assert e["byte_offset"] == end
        assert np.prod(e["shape"]) * 8 == e["byte_length"]
        end += e["byte_length"]
    assert end == ck.checkpoint_bytes(tmp_path)
    # little-endian on disk
    blob = (tmp_path / ck.BLOB).read_bytes()
    first = np.frombuffer(blob, "<f8", count=1)[0]
    assert first == init_params(cfg, 0).token_emb[0, 0]


def test_empty_model(tmp_path):
    cfg = tiny_config(blocks=())
    params = init_params(cfg, 0)
    ck.save(params, cfg, tmp_path)
    names = [e["name"] for e in json.loads((tmp_path / ck.MANIFEST).read_text())["tensors"]]
    assert names == ["emb.token", "emb.pos", "head.W", "head.b"]
    assert tensors_equal(ck.load(tmp_path)[0], params)


def test_crms_is_smaller_by_dropped_elements(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, 3, 0.5)
    crms, ccfg, _ = convert(params, cfg, Variant.PRE_CRMS)
    ck.save(params, cfg, tmp_path / "ln")
    ck.save(crms, ccfg, tmp_path / "crms")
    saved = ck.checkpoint_bytes(tmp_path / "ln") - ck.checkpoint_bytes(tmp_path / "crms")
    # one column of each embedding, A_i and head.W; one row of A_o; one b_o entry
    dropped = cfg.vocab_size + cfg.max_seq + cfg.n_classes
    for kind in cfg.blocks:
        d_i, d_o = cfg.branch_dims(kind)
        dropped += d_i + d_o + 1
    assert saved == dropped * 8


def test_truncated_blob(tmp_path):
    cfg = tiny_config()
    ck.save(init_params(cfg, 0), cfg, tmp_path)
    blob = tmp_path / ck.BLOB
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(ck.ChecksumError) as info:
        ck.load(tmp_path)
    assert info.value.code == "checksum-mismatch"


def _rewrite(path, edit):
    m = json.loads((path / ck.MANIFEST).read_text())
    edit(m)
    (path / ck.MANIFEST).write_text(json.dumps(m))


def test_version_gate(tmp_path):
    cfg = tiny_config()
    ck.save(init_params(cfg, 0), cfg, tmp_path)
    _rewrite(tmp_path, lambda m: m.update(format_version=2))
    with pytest.raises(ck.VersionError):
        ck.load(tmp_path)


def test_malformed_manifest(tmp_path):
    cfg = tiny_config()
    ck.save(init_params(cfg, 0), cfg, tmp_path)
    (tmp_path / ck.MANIFEST).write_text("{not json")
    with pytest.raises(ck.ManifestError) as info:
        ck.load(tmp_path)
    assert info.value.code == "malformed-manifest"


def test_overlapping_offsets(tmp_path):
    cfg = tiny_config()
    ck.save(init_params(cfg, 0), cfg, tmp_path)
    _rewrite(tmp_path, lambda m: m["tensors"][1].update(byte_offset=0))
    with pytest.raises(ck.ManifestError, match="overlaps"):
        ck.load(tmp_path)


def test_crms_claim_with_full_width(tmp_path):
    cfg = tiny_config()
    ck.save(init_params(cfg, 0), cfg, tmp_path)
    crms_cfg = tiny_config(variant=Variant.PRE_CRMS).to_dict()
    _rewrite(tmp_path, lambda m: m.update(config=crms_cfg))
    with pytest.raises(ck.ConsistencyError) as info:
        ck.load(tmp_path)
    assert info.value.code == "variant-inconsistent"


def test_error_codes_distinct():
    codes = {e.code for e in (ck.ManifestError, ck.VersionError, ck.ChecksumError, ck.ConsistencyError)}
    assert len(codes) == 4


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        ck.load(tmp_path / "nothing")
