"""Binary checkpoint format.

Layout::

    b"LFCK" | u32 version | u64 header length | UTF-8 JSON header | payload

The header holds the architecture descriptor, a tensor index (name, shape,
dtype, byte offset into the payload, byte length) and free-form training
metadata. The payload is the tensors back to back as little-endian float32.
Headers are serialised with sorted keys and no whitespace so identical
models always produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from . import effnet, unet
from .nn import Module

MAGIC = b"LFCK"
VERSION = 1
DTYPE = "<f4"
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Corrupt file or a descriptor that does not match the stored tensors."""


@dataclass
class ModelCheckpoint:
    descriptor: dict
    tensors: "OrderedDict[str, np.ndarray]"
    meta: dict = field(default_factory=dict)


def describe(model: Module) -> dict:
    if isinstance(model, unet.UNetModel):
        return {"kind": unet.DESCRIPTOR_KIND, "config": model.config.to_dict()}
    if isinstance(model, effnet.EffNetModel):
        return {"kind": effnet.DESCRIPTOR_KIND, "preset": model.config.preset, "config": model.config.to_dict()}
    raise TypeError(f"no descriptor for {type(model).__name__}")


def build_from_descriptor(descriptor: dict) -> Module:
    kind = descriptor.get("kind")
    try:
        if kind == unet.DESCRIPTOR_KIND:
            return unet.build_unet(unet.UNetConfig(**descriptor["config"]))
        if kind == effnet.DESCRIPTOR_KIND:
            return effnet.build_effnet_b0(effnet.EffNetConfig(**descriptor["config"]))
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"invalid {kind} descriptor: {exc}") from exc
    raise CheckpointError(f"unknown architecture kind {kind!r}")


def encode(descriptor: dict, tensors: Dict[str, np.ndarray], meta: dict) -> bytes:
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": DTYPE, "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"descriptor": descriptor, "tensors": index, "meta": meta},
                        sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes) -> ModelCheckpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("corrupt checkpoint: file shorter than its fixed prefix")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"corrupt checkpoint: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"corrupt checkpoint: unsupported version {version}")
    start = _PREFIX.size + header_len
    if start > len(blob):
        raise CheckpointError("corrupt checkpoint: header runs past end of file")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
        index = header["tensors"]
        descriptor = header["descriptor"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: unreadable header ({exc})") from exc
    payload = memoryview(blob)[start:]
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    cursor = 0
    for entry in index:
        name, shape, off, nbytes = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        if entry.get("dtype") != DTYPE:
            raise CheckpointError(f"corrupt checkpoint: unsupported dtype for {name}")
        if off != cursor or nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or off + nbytes > len(payload):
            raise CheckpointError(f"corrupt checkpoint: tensor {name!r} has invalid offset/length")
        if name in tensors:
            raise CheckpointError(f"corrupt checkpoint: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(payload[off : off + nbytes], dtype=DTYPE).astype(np.float32).reshape(shape)
        cursor = off + nbytes
    if cursor != len(payload):
        raise CheckpointError(f"corrupt checkpoint: {len(payload) - cursor} trailing payload bytes")
    return ModelCheckpoint(descriptor, tensors, header.get("meta", {}))


def save_checkpoint(model: Module, meta: dict, path) -> Path:
    """Serialise ``model`` (parameters and batch-norm buffers) with ``meta``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(describe(model), model.state_dict(), meta or {}))
    return path


def save_raw(ckpt: ModelCheckpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(encode(ckpt.descriptor, ckpt.tensors, ckpt.meta))
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(blob)


def load_model(path) -> Tuple[Module, ModelCheckpoint]:
    """Rebuild the architecture from the descriptor, check it against the stored tensors, bind weights.

    The model is returned in eval mode.
    """
    ckpt = load_checkpoint(path)
    model = build_from_descriptor(ckpt.descriptor)
    expected = model.state_dict()
    if list(expected) != list(ckpt.tensors):
        missing = [k for k in expected if k not in ckpt.tensors][:3]
        extra = [k for k in ckpt.tensors if k not in expected][:3]
        raise CheckpointError(f"descriptor/architecture mismatch: missing {missing}, unexpected {extra}")
    for name, arr in expected.items():
        if arr.shape != ckpt.tensors[name].shape:
            raise CheckpointError(f"descriptor/architecture mismatch for {name}: "
                                  f"{ckpt.tensors[name].shape} vs {arr.shape}")
    model.load_state_dict(ckpt.tensors)
    model.eval()
    return model, ckpt
