"""Binary file formats.

CTAR (images and sinograms)::

    b"CTAR" | u32 version=1 | u8 kind | u32 rows | u32 cols
    | rows*cols float32 LE, row-major | u32 n | n bytes UTF-8 JSON geometry

``kind`` is 0 for an image, 1 for a fan sinogram, 2 for a parallel sinogram.

DDTC (checkpoints)::

    b"DDTC" | u32 version=1 | u32 n | n bytes UTF-8 JSON config
    | u32 tensor_count | records...

Each record is ``u16 name_len | name | u8 rank | u32 dims[rank] | float32 LE data``.
Optimizer moments are stored as ordinary records named ``adam.m.<param>`` and
``adam.v.<param>``. All integers are little-endian.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "KIND_CODES",
    "write_ctar",
    "read_ctar",
    "write_ddtc",
    "read_ddtc",
]

KIND_CODES = {"image": 0, "fan": 1, "parallel": 2}
_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

_CTAR_MAGIC = b"CTAR"
_DDTC_MAGIC = b"DDTC"
_VERSION = 1


class FormatError(ValueError):
    """Raised for malformed or unsupported files; the message names the file."""


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_ctar(path, data: np.ndarray, kind: str, geometry: dict | None) -> None:
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError(f"CTAR stores 2-d arrays, got shape {data.shape}")
    if kind not in KIND_CODES:
        raise ValueError(f"unknown CTAR kind {kind!r}")
    buf = io.BytesIO()
    buf.write(_CTAR_MAGIC)
    buf.write(struct.pack("<IBII", _VERSION, KIND_CODES[kind], *data.shape))
    buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    trailer = _json_bytes(geometry or {})
    buf.write(struct.pack("<I", len(trailer)))
    buf.write(trailer)
    _atomic_write(path, buf.getvalue())


def read_ctar(path) -> tuple[np.ndarray, str, dict]:
    """Return ``(float32 array, kind, geometry dict)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    if raw[:4] != _CTAR_MAGIC:
        raise FormatError(f"{path}: bad magic, not a CTAR file")
    try:
        version, code, rows, cols = struct.unpack_from("<IBII", raw, 4)
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported CTAR version {version}")
        off = 4 + struct.calcsize("<IBII")
        n = rows * cols
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(rows, cols)
        off += 4 * n
        (tlen,) = struct.unpack_from("<I", raw, off)
        geom = json.loads(raw[off + 4: off + 4 + tlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated or corrupt CTAR file ({exc})") from exc
    if code not in _KIND_NAMES:
        raise FormatError(f"{path}: unknown kind code {code}")
    return data.astype(np.float32), _KIND_NAMES[code], geom


def write_ddtc(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a checkpoint; ``tensors`` is stored in insertion order."""
    path = Path(path)
    buf = io.BytesIO()
    buf.write(_DDTC_MAGIC)
    cfg = _json_bytes(config)
    buf.write(struct.pack("<II", _VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = name.encode("utf-8")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    _atomic_write(path, buf.getvalue())


def read_ddtc(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    if raw[:4] != _DDTC_MAGIC:
        raise FormatError(f"{path}: bad magic, not a DDTC checkpoint")
    try:
        version, clen = struct.unpack_from("<II", raw, 4)
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported DDTC version {version}")
        off = 12
        config = json.loads(raw[off: off + clen].decode("utf-8"))
        off += clen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off: off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)
            off += 4 * n
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return config, tensors
