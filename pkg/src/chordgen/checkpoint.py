"""Versioned binary checkpoint format.

Layout: ``magic | format version | config-JSON length | config JSON``
followed by one record per parameter:
``name length | name | dtype code | rank | dims | raw little-endian data``.
Parameters are written in sorted-name order so identical state produces
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CGCK"
FORMAT_VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4"}
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(IOError):
    pass


def save_checkpoint(path: str | Path, config: dict,
                    params: dict[str, np.ndarray]) -> None:
    config_blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = params[name]
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            blob = name.encode("utf-8")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, config_len = struct.unpack("<II", f.read(8))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        config = json.loads(f.read(config_len).decode("utf-8"))
        (n_params,) = struct.unpack("<I", f.read(4))
        params: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", f.read(2))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            dtype = np.dtype(_DTYPES[code])
            raw = f.read(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize)
            params[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        return config, params
