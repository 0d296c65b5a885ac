"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"RAWLMCKP"
    version    u32
    length     u64       payload byte count
    sha256     32 bytes  digest of the payload
    payload:
        u32 meta length, UTF-8 JSON metadata (sorted keys)
        u32 array count
        per array: u16 name length, name, u8 ndim, u32 dims..., float32 data
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ChecksumError, UnsupportedVersionError
from .model import ModelConfig

MAGIC = b"RAWLMCKP"
VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> float32 array
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_step: int = 0
    step: int = 0
    best_val_bits: float = float("inf")
    rng_states: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _pack_arrays(arrays: list[tuple[str, np.ndarray]]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<B", a.ndim))
        out.write(struct.pack(f"<{a.ndim}I", *a.shape))
        out.write(a.tobytes())
    return out.getvalue()


def encode(ckpt: Checkpoint) -> bytes:
    meta = {
        "config": ckpt.config.to_dict(),
        "adam_step": int(ckpt.adam_step),
        "step": int(ckpt.step),
        "best_val_bits": float(ckpt.best_val_bits),
        "rng_states": ckpt.rng_states,
        "extra": ckpt.extra,
        "param_names": list(ckpt.params),
        "has_adam": bool(ckpt.adam_m),
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    arrays = [("param/" + k, v) for k, v in ckpt.params.items()]
    if ckpt.adam_m:
        arrays += [("adam.m/" + k, ckpt.adam_m[k]) for k in ckpt.params]
        arrays += [("adam.v/" + k, ckpt.adam_v[k]) for k in ckpt.params]
    payload = struct.pack("<I", len(meta_raw)) + meta_raw + _pack_arrays(arrays)
    header = _HEADER.pack(MAGIC, VERSION, len(payload), hashlib.sha256(payload).digest())
    return header + payload


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < _HEADER.size:
        raise ChecksumError("checkpoint truncated inside header")
    magic, version, length, digest = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ChecksumError("not a rawlm checkpoint (bad magic)")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    payload = blob[_HEADER.size:]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise ChecksumError("checkpoint payload failed checksum (truncated or corrupt)")

    view = memoryview(payload)
    pos = 0

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, view, pos)
        pos += struct.calcsize(fmt)
        return vals

    (meta_len,) = take("<I")
    meta = json.loads(bytes(view[pos:pos + meta_len]).decode("utf-8"))
    pos += meta_len
    (n_arrays,) = take("<I")
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = take("<H")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        arrays[name] = arr.astype(np.float32)

    names = meta["param_names"]
    params = {k: arrays["param/" + k] for k in names}
    adam_m = {k: arrays["adam.m/" + k] for k in names} if meta["has_adam"] else {}
    adam_v = {k: arrays["adam.v/" + k] for k in names} if meta["has_adam"] else {}
    return Checkpoint(
        config=ModelConfig.from_dict(meta["config"]),
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        adam_step=meta["adam_step"],
        step=meta["step"],
        best_val_bits=meta["best_val_bits"],
        rng_states=meta["rng_states"],
        extra=meta["extra"],
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


def read_version(path) -> Optional[int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:8] != MAGIC:
        return None
    return _HEADER.unpack(head)[1]
