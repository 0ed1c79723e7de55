"""
Dense tensors are plain numpy arrays in (N, C, H, W) layout. This module owns
the default element precision and the CETNSR1 container used for weights and
checkpoints.
"""

import contextlib
import contextvars
import logging
import struct
from pathlib import Path
from typing import Dict, Iterator, Mapping, Union

import numpy as np

from .exceptions import DimensionError, IntegrityError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

MAGIC = b"CETNSR1\n"

_default_dtype: contextvars.ContextVar = contextvars.ContextVar("cenet_default_dtype", default=np.float32)


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype.get())


@contextlib.contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """
    Temporarily switch the default element precision, e.g.
    `with precision(np.float64): ...` for gradient checks.
    """
    token = _default_dtype.set(np.dtype(dtype).type)
    try:
        yield np.dtype(dtype)
    finally:
        _default_dtype.reset(token)


def as_tensor(data, dtype=None) -> Tensor:
    """
    Convert `data` to a contiguous array in the requested (or default) precision.
    """
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype or default_dtype()))
    if any(d < 1 for d in arr.shape):
        raise DimensionError(f"tensor dimensions must all be >= 1, got shape {list(arr.shape)}")
    return arr


def save_tensors(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    """
    Write named tensors to a CETNSR1 container.

    Layout: magic, then per tensor: u32 name length, UTF-8 name, u32 rank,
    u32 dims, float32 little-endian elements (row-major). Insertion order of
    `tensors` is preserved.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in tensors.items():
            arr = np.asarray(value)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    logger.debug(f"💾 Saved {len(tensors)} tensors to {path}")


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """
    Read a CETNSR1 container into an ordered name -> float32 array mapping.
    Raises IntegrityError on a bad magic string or a truncated record.
    """
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a CETNSR1 container (bad magic)")

    tensors: Dict[str, np.ndarray] = {}
    offset = len(MAGIC)

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > len(raw):
            raise IntegrityError(
                f"{path}: truncated container while reading {what} at byte offset {offset}"
            )
        chunk = raw[offset:offset + count]
        offset += count
        return chunk

    while offset < len(raw):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise IntegrityError(f"{path}: corrupted tensor name at byte offset {offset}") from e
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}")) if rank else ()
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = take(4 * count, f"elements of {name!r}")
        if name in tensors:
            raise IntegrityError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)

    return tensors
