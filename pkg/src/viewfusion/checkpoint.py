"""Binary parameter checkpoints.

Layout (documented, versioned):

    bytes 0..7    magic b"VFUSCKPT"
    bytes 8..11   format version, uint32 little-endian (currently 1)
    bytes 12..19  manifest length in bytes, uint64 little-endian
    next          manifest, UTF-8 JSON:
                      {"dtype": "<f8",
                       "params": [{"name": str, "shape": [int, ...]}, ...],
                       "meta": {...}}
    rest          raw parameter data: for each manifest entry in order, the
                  row-major little-endian float64 array bytes.

``meta`` is free-form JSON; model checkpoints store the model config echo and
its hash there and refuse to load under a mismatched hash.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import DiffTensor

MAGIC = b"VFUSCKPT"
FORMAT_VERSION = 1
DTYPE_TAG = "<f8"


class CheckpointError(RuntimeError):
    pass


def save_params(path: str | Path, params: dict[str, DiffTensor], meta: dict | None = None) -> None:
    path = Path(path)
    names = sorted(params)
    manifest = {
        "dtype": DTYPE_TAG,
        "params": [{"name": n, "shape": list(params[n].values.shape)} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n].values, dtype=DTYPE_TAG).tobytes())


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    mlen = struct.unpack("<Q", raw[12:20])[0]
    try:
        manifest = json.loads(raw[20:20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest: {e}") from e
    if manifest.get("dtype") != DTYPE_TAG:
        raise CheckpointError(f"{path}: unsupported dtype tag {manifest.get('dtype')!r}")
    offset = 20 + mlen
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for parameter '{entry['name']}'")
        arr = np.frombuffer(raw, dtype=DTYPE_TAG, count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after parameter data")
    return arrays, manifest.get("meta", {})


def load_params(path: str | Path) -> tuple[dict[str, DiffTensor], dict]:
    arrays, meta = load_arrays(path)
    return {n: DiffTensor.param(a, name=n) for n, a in arrays.items()}, meta
