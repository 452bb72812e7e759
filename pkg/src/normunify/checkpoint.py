"""Two-file checkpoint directory: ``manifest.json`` + ``tensors.bin``.

``tensors.bin`` holds the tensors back to back in manifest order as
little-endian IEEE-754 scalars, without padding. The manifest carries the
format version, the full model config, one index entry per tensor
(name, dtype, shape, byte_offset, byte_length) and the CRC32 of the blob.
Saving the same model twice gives byte-identical files.
"""

from __future__ import annotations

import json
import os
import zlib
from pathlib import Path

import numpy as np

from normunify.config import ModelConfig
from normunify.model import ModelParams, ShapeError, check_params

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class CheckpointError(Exception):
    """Base class; ``code`` distinguishes the failure kinds."""

    code = "checkpoint"


class ManifestError(CheckpointError):
    code = "malformed-manifest"


class VersionError(ManifestError):
    code = "unsupported-version"


class ChecksumError(CheckpointError):
    code = "checksum-mismatch"


class ConsistencyError(CheckpointError):
    """Tensor shapes do not match the declared variant/config."""

    code = "variant-inconsistent"


def save(params: ModelParams, cfg: ModelConfig, dir_path) -> Path:
    check_params(params, cfg)
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in params.named_tensors().items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "tensors": entries,
        "checksum": {"algorithm": "crc32", "value": zlib.crc32(blob)},
    }
    (out / BLOB).write_bytes(blob)
    text = json.dumps(manifest, indent=2) + "\n"
    (out / MANIFEST).write_text(text, encoding="utf-8")
    return out


def _read_manifest(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict):
        raise ManifestError(f"{path}: top level must be an object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"format_version {version!r} not supported (expected {FORMAT_VERSION})")
    for key in ("config", "tensors", "checksum"):
        if key not in manifest:
            raise ManifestError(f"manifest lacks {key!r}")
    return manifest


def load(dir_path) -> tuple[ModelParams, ModelConfig]:
    """Read a checkpoint, validating checksum, index and shapes first."""
    root = Path(dir_path)
    manifest = _read_manifest(root / MANIFEST)
    blob = (root / BLOB).read_bytes()

    checksum = manifest["checksum"]
    if not isinstance(checksum, dict) or checksum.get("algorithm") != "crc32":
        raise ManifestError("checksum must be {'algorithm': 'crc32', 'value': int}")
    if zlib.crc32(blob) != checksum.get("value"):
        raise ChecksumError(
            f"CRC32 {zlib.crc32(blob)} of {BLOB} ({len(blob)} bytes) != manifest {checksum.get('value')}"
        )

    try:
        cfg = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"bad config: {exc}") from exc

    named = {}
    end = 0
    for i, entry in enumerate(manifest["tensors"]):
        try:
            name = entry["name"]
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["byte_offset"])
            length = int(entry["byte_length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"tensor entry {i} malformed: {exc!r}") from exc
        if name in named:
            raise ManifestError(f"duplicate tensor {name}")
        if offset < end:
            raise ManifestError(f"{name}: offset {offset} overlaps previous tensor ending at {end}")
        if offset + length > len(blob):
            raise ManifestError(f"{name}: bytes {offset}..{offset + length} exceed blob of {len(blob)}")
        if int(np.prod(shape)) * dtype.itemsize != length:
            raise ManifestError(f"{name}: shape {shape} does not fill {length} bytes of {dtype}")
        if entry["dtype"] != cfg.dtype:
            raise ConsistencyError(f"{name}: dtype {entry['dtype']}, config says {cfg.dtype}")
        arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        arr = arr.reshape(shape).astype(cfg.np_dtype)
        arr.flags.writeable = False
        named[name] = arr
        end = offset + length
    if end != len(blob):
        raise ManifestError(f"{len(blob) - end} trailing bytes after last tensor")

    try:
        params = ModelParams.from_named(named, cfg.variant, cfg.blocks)
        check_params(params, cfg)
    except ShapeError as exc:
        raise ConsistencyError(f"{cfg.variant.value} checkpoint: {exc}") from exc
    return params, cfg


def checkpoint_bytes(dir_path) -> int:
    return os.path.getsize(Path(dir_path) / BLOB)
