"""Binary parameter checkpoints.

One file maps dot-separated parameter names to shaped row-major float
data, with a JSON metadata blob so checkpoints are self-describing. The
writer is fully deterministic (names sorted, no timestamps), so equal
parameters produce byte-identical files.

Layout, all little-endian:

    magic "DLOGCKPT" | u32 version | u32 meta_len | meta JSON utf-8
    u32 n_params
    per param: u16 name_len | name utf-8 | u8 dtype (0=f32, 1=f64)
               u8 ndim | u32 dims... | raw values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

_MAGIC = b"DLOGCKPT"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path: str | Path, params: dict[str, Tensor | np.ndarray],
                    meta: dict | None = None) -> None:
    path = Path(path)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        if arr.dtype not in _DTYPE_CODES:
            raise FormatError(f"unsupported checkpoint dtype {arr.dtype} for {name!r}")
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise FormatError(f"{path}: not a parameter checkpoint")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (n_params,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                            offset=pos).reshape(shape).copy()
        pos += nbytes
        params[name] = arr.astype(arr.dtype.newbyteorder("="))
    return params, meta
