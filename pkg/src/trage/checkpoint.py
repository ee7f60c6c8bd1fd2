"""Tensor container format.

Layout::

    b"TRGE" | u32 version (LE) | u64 metadata length (LE) | UTF-8 JSON metadata
    | raw little-endian tensor payloads, in manifest order

The metadata carries a ``tensors`` manifest (name, shape, dtype, offset,
nbytes; offsets relative to the first payload byte) next to arbitrary
JSON-serialisable fields.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import BadMagic, ManifestMismatch, VersionUnsupported

MAGIC = b"TRGE"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8"), "i32": np.dtype("<i4")}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def _dtype_name(arr: np.ndarray) -> str:
    try:
        return _DTYPE_NAMES[arr.dtype.newbyteorder("<")]
    except KeyError:
        raise TypeError(f"unsupported tensor dtype {arr.dtype}") from None


def encode_container(meta: dict[str, Any], tensors: dict[str, np.ndarray]) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        kind = _dtype_name(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": kind, "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    meta_bytes = json.dumps({**meta, "tensors": manifest}, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(meta_bytes))
    return head + meta_bytes + b"".join(blobs)


def decode_container(data: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {bytes(data[:4])!r}")
    if len(data) < 16:
        raise ManifestMismatch("file shorter than the fixed header")
    version, meta_len = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"format version {version}; this build reads {FORMAT_VERSION}")
    start = 16 + meta_len
    if start > len(data):
        raise ManifestMismatch("metadata length runs past end of file")
    try:
        meta = json.loads(bytes(data[16:start]).decode("utf-8"))
        manifest = meta.pop("tensors")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, AttributeError) as exc:
        raise ManifestMismatch(f"unreadable metadata: {exc}") from None
    expected = sum(int(t["nbytes"]) for t in manifest)
    if len(data) - start != expected:
        raise ManifestMismatch(
            f"manifest declares {expected} payload bytes, file holds {len(data) - start}"
        )
    tensors = {}
    for t in manifest:
        dt = _DTYPES.get(t["dtype"])
        if dt is None:
            raise ManifestMismatch(f"unknown dtype {t['dtype']!r}")
        shape = tuple(int(s) for s in t["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nbytes != t["nbytes"] or t["offset"] + nbytes > expected:
            raise ManifestMismatch(f"tensor {t['name']} size disagrees with its shape")
        lo = start + t["offset"]
        arr = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=lo)
        tensors[t["name"]] = arr.reshape(shape).astype(dt.newbyteorder("="), copy=True)
    return meta, tensors


def save_container(path: str | Path, meta: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_container(meta, tensors))
    tmp.replace(path)


def load_container(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes())
