"""Byte-stable checkpoint container.

Layout: magic ``OCMK`` + u32 version + u64 header length + UTF-8 JSON
header, then per entry (names sorted): u16 name length, name bytes, u8
ndim, u64 dims, little-endian float64 payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"OCMK"
VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray], header: dict) -> None:
    path = Path(path)
    header = dict(header)
    header.setdefault("schema", 1)
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for name in sorted(params):
            arr = params[name]
            arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        params: dict[str, np.ndarray] = {}
        while True:
            raw = f.read(2)
            if not raw:
                break
            (nlen,) = struct.unpack("<H", raw)
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            params[name] = arr.astype(np.float64)
    return params, header


def checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def params_to_tensors(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
