"""Binary checkpoint format.

Layout::

    b"MTLCKPT\\0"  | u32 version | u64 header length | header JSON (utf-8)
    | raw little-endian float64 parameter data | 32-byte SHA-256 of everything before

The header carries the model config, branches, regularization, metadata and
the name/shape/offset of every tensor. Output is byte-stable: no timestamps,
sorted JSON keys.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from ..numeric import RegularizationSpec
from .model import ModelConfig, ModelError, Seq2SeqModel

MAGIC = b"MTLCKPT\0"
VERSION = 1


class CheckpointError(ModelError):
    pass


def serialize(model: Seq2SeqModel) -> bytes:
    tensors = []
    offset = 0
    for name, shape, _ in model.layout:
        n = int(np.prod(shape))
        tensors.append({"name": name, "shape": list(shape), "offset": offset, "count": n})
        offset += n
    header = {
        "format": "mtl-degradation-checkpoint",
        "version": VERSION,
        "config": model.config.to_dict(),
        "branches": list(model.branches),
        "regularization": {"lambda1": model.reg.lambda1, "lambda2": model.reg.lambda2},
        "meta": model.meta,
        "tensors": tensors,
        "dtype": "<f8",
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = (MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes
            + model.flat.astype("<f8").tobytes())
    return body + hashlib.sha256(body).digest()


def deserialize(data: bytes) -> Seq2SeqModel:
    if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
        raise CheckpointError("corrupt checkpoint: bad magic or truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("corrupt checkpoint: checksum mismatch")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = len(MAGIC) + 12
    try:
        header = json.loads(body[start:start + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        reg = RegularizationSpec(**header["regularization"])
        branches = tuple(header["branches"])
        tensors = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    raw = body[start + hlen:]
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    model = Seq2SeqModel(config, branches, reg, meta=header.get("meta"))
    if flat.size * 8 != len(raw) or flat.size != model.num_parameters:
        raise CheckpointError("checkpoint dimension mismatch: parameter count differs from config")
    for t in tensors:
        sl = model.slices.get(t["name"])
        if sl is None or sl.start != t["offset"] or list(model.params[t["name"]].shape) != t["shape"]:
            raise CheckpointError(f"checkpoint dimension mismatch for tensor {t['name']!r}")
    model.set_flat(flat)
    return model


def save(model: Seq2SeqModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load(path) -> Seq2SeqModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
