"""Checkpoint serialization shared by both prior families.

Layout (little-endian):

    magic  "PSEP-CK1"
    u32    model-kind tag (1 = flow, 2 = autoregressive)
    u32    noise-conditioning level index into NOISE_LEVELS
           (0xFFFFFFFF for a custom sigma; the exact value always lives
           in the metadata JSON)
    u32    metadata JSON byte length, then the JSON (utf-8)
    u32    parameter count, then per parameter:
           u32 name length + name, u32 ndim, u32 dims..., f32 data

Parameters are stored as f32; loading re-expands to f64, so save(load(p))
round-trips bit-exactly at the file level.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .arprior import ARConfig, ARModel
from .errors import DataFormatError, ShapeError
from .flowprior import FlowConfig, FlowModel

CHECKPOINT_MAGIC = b"PSEP-CK1"
KIND_FLOW = 1
KIND_AR = 2
CUSTOM_SIGMA = 0xFFFFFFFF

# the canonical noise-conditioning ladder (index 0 = noise-free)
NOISE_LEVELS = (0.0, 0.01, 0.027, 0.077, 0.129, 0.359)


def sigma_index(sigma: float) -> int:
    for i, s in enumerate(NOISE_LEVELS):
        if abs(sigma - s) < 1e-12:
            return i
    return CUSTOM_SIGMA


def serialize(model, meta: dict) -> bytes:
    """Serialize a model + metadata dict to the checkpoint wire format."""
    if isinstance(model, FlowModel):
        kind = KIND_FLOW
    elif isinstance(model, ARModel):
        kind = KIND_AR
    else:
        raise ShapeError(f"cannot checkpoint a {type(model).__name__}")
    meta = dict(meta)
    meta.setdefault("sigma", 0.0)
    meta["family"] = model.family
    meta["model_config"] = model.config.to_dict()
    meta["sample_rate"] = model.sample_rate
    if isinstance(model, FlowModel):
        meta["actnorm_initialized"] = model.actnorm_initialized
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")

    parts = [CHECKPOINT_MAGIC,
             struct.pack("<II", kind, sigma_index(float(meta["sigma"]))),
             struct.pack("<I", len(meta_blob)), meta_blob]
    params = model.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, tensor in params:
        nb = name.encode("utf-8")
        arr = tensor.data
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def content_hash(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path: str | Path, model, meta: dict) -> str:
    """Write the checkpoint; returns the sha256 of the file content."""
    blob = serialize(model, meta)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(blob)
    return content_hash(blob)


def _take(blob: bytes, offset: int, n: int, path) -> tuple:
    if offset + n > len(blob):
        raise DataFormatError(f"{path}: truncated checkpoint")
    return blob[offset: offset + n], offset + n


def load_checkpoint(path: str | Path):
    """Reconstruct (model, meta) from disk; meta gains 'hash' and 'path'."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path}: not a PSEP-CK1 checkpoint")
    off = 8
    raw, off = _take(blob, off, 8, path)
    kind, _sig_idx = struct.unpack("<II", raw)
    raw, off = _take(blob, off, 4, path)
    (meta_len,) = struct.unpack("<I", raw)
    raw, off = _take(blob, off, meta_len, path)
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: bad checkpoint metadata: {e}") from e

    raw, off = _take(blob, off, 4, path)
    (n_params,) = struct.unpack("<I", raw)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        raw, off = _take(blob, off, 4, path)
        (nlen,) = struct.unpack("<I", raw)
        raw, off = _take(blob, off, nlen, path)
        name = raw.decode("utf-8")
        raw, off = _take(blob, off, 4, path)
        (ndim,) = struct.unpack("<I", raw)
        raw, off = _take(blob, off, 4 * ndim, path)
        shape = struct.unpack(f"<{ndim}I", raw)
        count = int(np.prod(shape)) if shape else 1
        raw, off = _take(blob, off, 4 * count, path)
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if off != len(blob):
        raise DataFormatError(f"{path}: trailing bytes in checkpoint")

    cfg_dict = meta.get("model_config", {})
    rate = meta.get("sample_rate")
    if kind == KIND_FLOW:
        model = FlowModel(FlowConfig(**cfg_dict), sample_rate=rate)
        if meta.get("actnorm_initialized"):
            model.mark_actnorm_initialized()
    elif kind == KIND_AR:
        model = ARModel(ARConfig(**cfg_dict), sample_rate=rate)
    else:
        raise DataFormatError(f"{path}: unknown model-kind tag {kind}")

    params = dict(model.parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise DataFormatError(f"{path}: parameter names do not match the config: {missing[:5]}")
    for name, arr in arrays.items():
        if params[name].data.shape != arr.shape:
            raise DataFormatError(
                f"{path}: parameter {name} has shape {arr.shape}, expected {params[name].data.shape}")
        params[name].data[...] = arr
    meta["hash"] = content_hash(blob)
    meta["path"] = str(path)
    return model, meta
