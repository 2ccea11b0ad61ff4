"""Named-tensor container used for model weights and direction files.

Layout::

    b"HALOTNSR"                      8-byte magic
    u64 little-endian                header length in bytes
    UTF-8 JSON header                {name: {"dtype": "f16"|"f32", "shape": [...], "offset": int}}
    payload                          raw little-endian row-major tensors

``offset`` is measured from the first byte of the payload region, i.e.
immediately after the header.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"HALOTNSR"

_DTYPES = {"f16": np.dtype("<f2"), "f32": np.dtype("<f4")}


class TensorFileError(ValueError):
    """Malformed or inconsistent tensor container."""


def write_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], dtype: str = "f32") -> None:
    """Write ``tensors`` to ``path`` atomically. Names are stored in sorted order."""
    if dtype not in _DTYPES:
        raise TensorFileError(f"unsupported dtype {dtype!r}")
    np_dtype = _DTYPES[dtype]
    header: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=np_dtype)
        blob = arr.tobytes(order="C")
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read every tensor in the container, widened to float32."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise TensorFileError(f"{path}: bad magic, not a tensor bundle")
    (header_len,) = struct.unpack("<Q", data[8:16])
    if 16 + header_len > len(data):
        raise TensorFileError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"{path}: header does not parse: {exc}") from exc
    if not isinstance(header, dict):
        raise TensorFileError(f"{path}: header must be a JSON object")

    payload = memoryview(data)[16 + header_len :]
    out: dict[str, np.ndarray] = {}
    for name, meta in header.items():
        try:
            dtype_name, shape, offset = meta["dtype"], meta["shape"], int(meta["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TensorFileError(f"tensor {name!r}: incomplete header entry") from exc
        if dtype_name not in _DTYPES:
            raise TensorFileError(f"tensor {name!r}: unsupported dtype {dtype_name!r}")
        dtype = _DTYPES[dtype_name]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset < 0 or offset + nbytes > len(payload):
            raise TensorFileError(f"tensor {name!r}: payload out of bounds")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=dtype).reshape(shape)
        out[name] = arr.astype(np.float32)
    return out
