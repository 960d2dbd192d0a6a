"""Checkpoint / tensor-block container.

Each artifact is a pair of files sharing a stem:

* ``<stem>.json`` - manifest: format version, producing module, config
  hash, seed, free-form metadata and a tensor directory
  (name -> dtype, shape, byte offset, byte length);
* ``<stem>.bin``  - the tensors back to back as little-endian float32,
  row-major, in directory order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1
DTYPE = np.dtype("<f4")


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def save_tensors(path, tensors: Mapping[str, object], *, module: str, config_hash: str,
                 seed: int, meta: dict | None = None) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    offset = 0
    chunks = []
    for name, value in tensors.items():
        if hasattr(value, "detach"):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value, dtype=DTYPE)
        raw = arr.tobytes(order="C")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "module": module,
        "config_hash": config_hash,
        "seed": int(seed),
        "dtype": "float32-le",
        "meta": meta or {},
        "tensors": directory,
    }
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return stem


def read_manifest(path) -> dict:
    stem = _stem(path)
    mpath = stem.with_suffix(".json")
    if not mpath.exists():
        raise DataError(f"missing artifact manifest {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {mpath}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{mpath}: unsupported format version {manifest.get('format_version')}")
    return manifest


def load_tensors(path, expect_module: str | None = None, expect_hash: str | None = None,
                 expect_seed: int | None = None) -> tuple[dict, dict]:
    """Return ``(name -> float32 array, manifest)``; checks module, hash and seed if given."""
    stem = _stem(path)
    manifest = read_manifest(stem)
    if expect_module is not None and manifest["module"] != expect_module:
        raise DataError(f"{stem}: expected a {expect_module} artifact, found {manifest['module']}")
    if expect_hash is not None and manifest["config_hash"] != expect_hash:
        raise DataError(
            f"{stem}: config hash {manifest['config_hash'][:12]} does not match "
            f"current config {expect_hash[:12]}"
        )
    if expect_seed is not None and manifest["seed"] != expect_seed:
        raise DataError(f"{stem}: produced with seed {manifest['seed']}, current seed is {expect_seed}")
    bpath = stem.with_suffix(".bin")
    if not bpath.exists():
        raise DataError(f"missing artifact payload {bpath}")
    raw = bpath.read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(raw):
            raise DataError(f"{stem}: payload truncated at tensor {entry['name']}")
        arr = np.frombuffer(raw[start:start + n], dtype=DTYPE).reshape(entry["shape"])
        out[entry["name"]] = arr.copy()
    return out, manifest
