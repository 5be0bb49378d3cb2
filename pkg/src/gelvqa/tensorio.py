"""GELT binary tensor files.

Layout: magic ``b"GELT"``, version u8, rank u8, rank x u32 shape (little
endian), then the row-major float32 little-endian payload.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, FormatError

MAGIC = b"GELT"
VERSION = 1


def encode_tensor(arr) -> bytes:
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    if arr.ndim > 255:
        raise FormatError("rank too large for GELT")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("not a GELT tensor (bad magic)")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported GELT version {version}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated GELT header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + 4 * n:
        raise FormatError(f"GELT payload has {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)


def atomic_write(path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, arr):
    atomic_write(path, encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing tensor file {path}") from exc
    return decode_tensor(buf)


def save_feature_file(path, ids, matrix):
    """Write an ``N x d`` GELT matrix plus its newline-delimited id sidecar."""
    matrix = np.asarray(matrix)
    if matrix.ndim < 2 or matrix.shape[0] != len(ids):
        raise FormatError("feature matrix rows must match the id list")
    save_tensor(path, matrix)
    atomic_write(str(path) + ".ids", "".join(f"{i}\n" for i in ids))


def load_feature_vectors(path, expected_dim: int | None = None) -> dict:
    """Read ``path`` (GELT N x d) and ``path.ids``; return ``{id: vector}``."""
    sidecar = Path(str(path) + ".ids")
    if not sidecar.exists():
        raise FormatError(f"missing id sidecar {sidecar}")
    ids = [line for line in sidecar.read_text(encoding="utf-8").split("\n") if line != ""]
    mat = load_tensor(path)
    if mat.ndim != 2:
        raise FormatError(f"feature file must be N x d, got shape {mat.shape}")
    if len(ids) != mat.shape[0]:
        raise FormatError(f"{len(ids)} ids for {mat.shape[0]} rows")
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate id in sidecar")
    if expected_dim is not None and mat.shape[1] != expected_dim:
        raise CompatibilityError(f"feature dim {mat.shape[1]} does not match expected {expected_dim}")
    return {i: mat[k] for k, i in enumerate(ids)}


def load_stacked(path) -> tuple[list, np.ndarray]:
    """Read an ``N x ...`` GELT tensor with its id sidecar, keeping row order."""
    sidecar = Path(str(path) + ".ids")
    if not sidecar.exists():
        raise FormatError(f"missing id sidecar {sidecar}")
    ids = [line for line in sidecar.read_text(encoding="utf-8").split("\n") if line != ""]
    arr = load_tensor(path)
    if arr.shape[0] != len(ids):
        raise FormatError(f"{len(ids)} ids for {arr.shape[0]} rows")
    if len(set(ids)) != len(ids):
        raise FormatError("duplicate id in sidecar")
    return ids, arr
