"""Binary checkpoint files.

Layout, all integers little-endian u32::

    magic        8 bytes  b"DMHCKPT\\0"
    version      u32      1
    meta_len     u32
    meta         meta_len bytes of UTF-8 JSON: system, mode, head kind,
                 window, horizon, seed, activation, grouping, scaling,
                 epoch, monitored loss, multipliers, parameter names/shapes
    n_tensors    u32
    per tensor:  ndim u32, ndim x u32 dims, prod(dims) float64 little-endian

Tensors appear in the model's parameter declaration order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .engine import BaselineModel, Checkpoint, DmhModel
from .features import GroupSpec, Normalizer

MAGIC = b"DMHCKPT\0"
VERSION = 1
_U32 = struct.Struct("<I")


def _meta(ckpt: Checkpoint) -> dict:
    model = ckpt.model
    meta = {
        "system": model.system_name,
        "head_kind": model.head_kind,
        "window": model.window,
        "horizon": model.horizon,
        "seed": model.seed,
        "activation": model.activation,
        "normalizer": model.normalizer.to_dict(),
        "epoch": ckpt.epoch,
        "monitored_loss": ckpt.monitored_loss,
        "multipliers": list(ckpt.multipliers),
        "params": [{"name": p.name, "shape": list(p.shape)} for p in model.params()],
    }
    if isinstance(model, DmhModel):
        meta["mode"] = model.mode
        meta["groups"] = model.spec.to_dict()
    else:
        meta["columns"] = model.columns
        meta["feature_names"] = model.feature_names
    return meta


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = json.dumps(_meta(ckpt), sort_keys=True).encode()
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(meta)), meta, _U32.pack(len(ckpt.state))]
    for arr in ckpt.state:
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _model_from_meta(meta: dict):
    norm = Normalizer.from_dict(meta["normalizer"])
    if meta["system"].startswith("DMH-"):
        spec = GroupSpec.from_dict(meta["groups"])
        return DmhModel(meta["mode"], meta["head_kind"], spec, meta["window"], meta["horizon"],
                        meta["seed"], meta["activation"], norm)
    return BaselineModel(meta["system"], meta["head_kind"], meta["columns"], meta["window"], meta["horizon"],
                         meta["seed"], meta["activation"], norm, meta.get("feature_names", ()))


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    (version,) = _U32.unpack_from(buf, pos)
    if version != VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (meta_len,) = _U32.unpack_from(buf, pos + 4)
    pos += 8
    meta = json.loads(buf[pos:pos + meta_len])
    pos += meta_len
    (count,) = _U32.unpack_from(buf, pos)
    pos += 4
    state = []
    for _ in range(count):
        (ndim,) = _U32.unpack_from(buf, pos)
        shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
        pos += 4 + 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        state.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    model = _model_from_meta(meta)
    model.load_state(state)
    model.multipliers = list(meta["multipliers"])
    return Checkpoint(model, state, meta["epoch"], meta["monitored_loss"], list(meta["multipliers"]))
