"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"HSID"                      magic
    u16                          format version
    u32                          tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8 ndim, ndim x u32 dims
        prod(dims) x f64 values (C order)
    u32                          CRC32 of every preceding byte

Run metadata (architecture, stage, step) is stored as the JSON text of a
``__meta__`` tensor, one byte per float64 element.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datacube import _atomic_write
from .denoiser import DenoiserConfig, DenoiserParams
from .errors import CheckpointError

MAGIC = b"HSID"
VERSION = 1
META = "__meta__"


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise CheckpointError("not an HSID checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC32 mismatch (file corrupted)")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after tensor table")
    return out


def _meta_tensor(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float64)


@dataclass
class CheckpointBundle:
    params: DenoiserParams
    meta: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path: str | os.PathLike, bundle: CheckpointBundle) -> Path:
    meta = dict(bundle.meta)
    meta["config"] = bundle.params.config.to_dict()
    meta["frozen"] = sorted(bundle.params.frozen)
    tensors = {META: _meta_tensor(meta)}
    tensors.update(bundle.params.tensors)
    tensors.update({f"adam.{k}": v for k, v in bundle.optimizer.items()})
    path = Path(path)
    _atomic_write(path, encode(tensors))
    return path


def load_checkpoint(path: str | os.PathLike) -> CheckpointBundle:
    tensors = decode(Path(path).read_bytes())
    if META not in tensors:
        raise CheckpointError(f"{path}: missing {META} record")
    meta = json.loads(tensors.pop(META).astype(np.uint8).tobytes().decode("utf-8"))
    cfg_d = meta["config"]
    cfg = DenoiserConfig(**{**cfg_d, "channels": tuple(cfg_d["channels"])})
    opt = {k[len("adam.") :]: v for k, v in tensors.items() if k.startswith("adam.")}
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    return CheckpointBundle(DenoiserParams(cfg, params, frozenset(meta.get("frozen", []))), meta, opt)
