"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SCINGCKPT" | u32 version | u64 meta_len | meta JSON (utf-8, sorted keys)
    u32 n_arrays
    repeated: u16 name_len | name | u8 dtype (0=float32, 1=float64) | u8 ndim
              | u64 * ndim shape | raw little-endian data

Arrays are written in sorted name order so save -> load -> save is byte-stable.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"SCINGCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Checkpoint:
    stage: str
    arrays: dict
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def params(self, prefix: str) -> dict:
        """Arrays under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}

    def digest(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()[:16]


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta)
    meta["stage"] = ckpt.stage
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", ckpt.version, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(ckpt.arrays))]
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        if arr.dtype not in _CODES:
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint: bad magic")
    pos = len(MAGIC)
    try:
        version, meta_len = struct.unpack_from("<IQ", data, pos)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        pos += 12
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(n):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            dtype = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(data):
                raise CheckpointError(f"truncated array {name!r}")
            arrays[name] = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize,
                                         offset=pos).reshape(shape).copy()
            pos += size
    except CheckpointError:
        raise
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupted checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointError("corrupted checkpoint: trailing bytes")
    stage = meta.pop("stage", "")
    return Checkpoint(stage=stage, arrays=arrays, meta=meta, version=version)


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())


def module_arrays(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, arrays: dict, strict: bool = True) -> None:
    state = module.state_dict()
    missing = set(state) - set(arrays)
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks field(s): {sorted(missing)[:5]}")
    unexpected = set(arrays) - set(state)
    if strict and unexpected:
        raise CheckpointError(f"checkpoint has unexpected field(s): {sorted(unexpected)[:5]}")
    tensors = {}
    for k, v in arrays.items():
        if k not in state:
            continue
        if tuple(v.shape) != tuple(state[k].shape):
            raise CheckpointError(f"field {k!r}: shape {v.shape} != {tuple(state[k].shape)}")
        tensors[k] = torch.from_numpy(np.ascontiguousarray(v)).to(state[k].dtype)
    module.load_state_dict(tensors, strict=False)
