"""Reader/writer for the little-endian ``TNSR`` binary tensor format.

Layout: magic ``TAFT``, version ``u32``, dtype ``u8`` (0 = f32, 1 = u8),
rank ``u8``, ``rank`` x ``u32`` dims, then the row-major payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"TAFT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class TnsrError(Exception):
    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class TnsrMagicError(TnsrError):
    pass


class TnsrVersionError(TnsrError):
    pass


class TnsrSizeError(TnsrError):
    pass


class TnsrDtypeError(TnsrError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"TNSR supports float32 and uint8, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank too large for TNSR")
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 10:
        raise TnsrSizeError(path, f"truncated header ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise TnsrMagicError(path, f"bad magic {buf[:4]!r}")
    version, code, rank = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise TnsrVersionError(path, f"unsupported version {version}")
    if code not in _DTYPES:
        raise TnsrDtypeError(path, f"unknown dtype code {code}")
    off = 10 + 4 * rank
    if len(buf) < off:
        raise TnsrSizeError(path, "truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 10)
    dt = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    got = len(buf) - off
    if got != expected:
        raise TnsrSizeError(path, f"payload size mismatch (expected {expected} bytes, got {got})")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).copy()


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load(path: str | os.PathLike, expect_shape=None, expect_dtype=None) -> np.ndarray:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        arr = decode(fh.read(), path)
    if expect_dtype is not None and arr.dtype != np.dtype(expect_dtype):
        raise TnsrDtypeError(path, f"dtype {arr.dtype}, expected {np.dtype(expect_dtype)}")
    if expect_shape is not None and tuple(arr.shape) != tuple(expect_shape):
        raise TnsrSizeError(path, f"dims {arr.shape}, expected {tuple(expect_shape)}")
    return arr
