"""Flat named-tensor archive.

Layout (all integers little-endian)::

    b"GWCT" | version u32 | count u32
    per tensor: name_len u32 | name utf-8 | rank u32 | extents u64 * rank
                | dtype u32 | raw little-endian data

dtype tags: 0 = float32, 1 = float64.
"""

from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path
from typing import Dict

import numpy as np

from .config import NetworkConfig

MAGIC = b"GWCT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
CONFIG_PREFIX = "config."


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: Dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            arr = arr.astype(np.float32)
        tag = _TAGS[arr.dtype]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<I", tag))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        (tag,) = take("<I")
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        out[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos) \
            .reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes
    return out


def config_tensors(cfg: NetworkConfig) -> Dict[str, np.ndarray]:
    """Network config encoded as float32 entries (all values are small integers)."""
    out = {}
    for f in fields(NetworkConfig):
        v = getattr(cfg, f.name)
        out[CONFIG_PREFIX + f.name] = np.asarray(v, dtype=np.float32).reshape(-1)
    return out


def config_from_tensors(tensors: Dict[str, np.ndarray]) -> NetworkConfig:
    kw = {}
    for f in fields(NetworkConfig):
        key = CONFIG_PREFIX + f.name
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks network setting {f.name!r}")
        v = tensors[key]
        if f.name == "stage_blocks":
            kw[f.name] = tuple(int(x) for x in v)
        elif isinstance(getattr(NetworkConfig(), f.name), bool):
            kw[f.name] = bool(v[0])
        else:
            kw[f.name] = int(v[0])
    return NetworkConfig(**kw)


def save_model(path, model) -> None:
    tensors = config_tensors(model.cfg)
    tensors.update(model.state_dict())
    save_tensors(path, tensors)


def load_model(path, dtype=np.float32):
    """Rebuild a :class:`StereoNet` from a checkpoint; returned in eval mode."""
    from .model import StereoNet

    tensors = load_tensors(path)
    cfg = config_from_tensors(tensors)
    model = StereoNet(cfg)
    state = {k: v for k, v in tensors.items() if not k.startswith(CONFIG_PREFIX)}
    model.load_state_dict(state)
    if np.dtype(dtype) != np.float32:
        model.to(dtype)
    return model.eval()

