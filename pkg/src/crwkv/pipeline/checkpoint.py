"""Checkpoint directories.

A checkpoint is a directory holding

* ``weights.ctn``   every parameter as a ``.ctn`` record, concatenated
* ``manifest.txt``  ``name offset`` per line, offsets into ``weights.ctn``
* ``config.txt``    the model config as ``key=value`` lines
* ``meta.txt``      optional free-form ``key=value`` run info
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .. import params as P
from ..numerics import ConfigError, ctn
from .config import format_kv, model_config, model_values, read_kv
from .model import ChangeRWKVParams

WEIGHTS = "weights.ctn"
MANIFEST = "manifest.txt"
CONFIG = "config.txt"
META = "meta.txt"


def save_checkpoint(path, cfg, weights: ChangeRWKVParams, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs, lines, offset = [], [], 0
    for name, t in P.named_tensors(weights):
        blob = ctn.encode(t.data)
        lines.append(f"{name} {offset}\n")
        blobs.append(blob)
        offset += len(blob)
    (path / WEIGHTS).write_bytes(b"".join(blobs))
    (path / MANIFEST).write_text("".join(lines))
    (path / CONFIG).write_text(format_kv(model_values(cfg)))
    if meta:
        (path / META).write_text(format_kv(meta))
    return path


def read_manifest(path) -> dict[str, int]:
    out = {}
    for line in (Path(path) / MANIFEST).read_text().splitlines():
        if line.strip():
            name, off = line.rsplit(" ", 1)
            out[name] = int(off)
    return out


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = (path / WEIGHTS).read_bytes()
    return {name: ctn.decode(buf, off)[0] for name, off in read_manifest(path).items()}


def load_checkpoint(path):
    """Returns ``(ModelConfig, ChangeRWKVParams, meta)``."""
    path = Path(path)
    if not (path / WEIGHTS).is_file() or not (path / MANIFEST).is_file():
        raise ConfigError(f"{path} is not a checkpoint directory")
    cfg = model_config(read_kv(path / CONFIG))
    arrays = load_arrays(path)
    dtype = next(iter(arrays.values())).dtype if arrays else np.float32
    weights = ChangeRWKVParams.init(cfg, seed=0, dtype=dtype)
    P.assign(weights, arrays, strict=True)
    meta = read_kv(path / META) if (path / META).is_file() else {}
    return cfg, weights, meta
