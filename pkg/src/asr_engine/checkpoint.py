"""Versioned, checksummed container for named tensors plus JSON metadata.

Layout (all integers little-endian)::

    magic  b"ASRCKPT\\0"            8 bytes
    version                       uint32
    header length                 uint32
    header                        UTF-8 JSON: {"meta": ..., "tensors": [[name, dtype, shape], ...]}
    payload                       tensors back to back, row-major, little-endian
    sha256                        32 bytes over everything above

Tensor dtypes are ``f4``, ``f8`` and ``i8``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"ASRCKPT\0"
VERSION = 1
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


def _code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    if np.issubdtype(arr.dtype, np.integer):
        return "i8"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def encode(tensors: Mapping[str, np.ndarray], meta: Any) -> bytes:
    entries, chunks = [], []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _code(arr)
        entries.append([name, code, list(arr.shape)])
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], Any]:
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; checkpoint is corrupt")
    version, header_len = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + header_len])
    offset = start + header_len
    tensors = {}
    for name, code, shape in header["tensors"]:
        dtype = np.dtype(_DTYPES[code])
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + n > len(body):
            raise CheckpointError(f"tensor {name} runs past the end of the payload")
        tensors[name] = np.frombuffer(body, dtype=dtype, count=n // dtype.itemsize,
                                      offset=offset).reshape(shape).copy()
        offset += n
    if offset != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    return tensors, header["meta"]


def save(path, tensors: Mapping[str, np.ndarray], meta: Any) -> Path:
    """Atomic write: the previous file stays intact until the new one is complete."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict[str, np.ndarray], Any]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(blob)
