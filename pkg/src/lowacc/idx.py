"""Reader and writer for the IDX format used by the MNIST distribution.

Layout (big-endian)::

    [0000] u8 0, u8 0, u8 dtype code, u8 ndim
    [0004] ndim x u32 dimension sizes
    [....] payload, row-major

Only unsigned byte payloads (dtype code 0x08) are produced by MNIST; the
reader accepts the other standard codes as well. Files ending in ``.gz`` or
starting with the gzip magic are decompressed transparently.
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODES = {dt.newbyteorder("="): code for code, dt in _DTYPES.items()}


def _read_bytes(path: str | os.PathLike) -> bytes:
    try:
        raw = Path(path).read_bytes()
        if raw[:2] == b"\x1f\x8b":
            raw = gzip.decompress(raw)
    except (OSError, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return raw


def read_idx(path: str | os.PathLike, expect_magic: int | None = None) -> np.ndarray:
    """Read one IDX file into an array of its native dtype."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte {len(raw)} (need 4)")
    (magic,) = struct.unpack(">I", raw[:4])
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(
            f"{path}: magic 0x{magic:08x} does not match expected 0x{expect_magic:08x}"
        )
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in _DTYPES:
        raise FormatError(f"{path}: not an IDX file (magic 0x{magic:08x})")
    dtype = _DTYPES[(magic >> 8) & 0xFF]
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(
            f"{path}: truncated header at byte {len(raw)} (need {header_end})"
        )
    shape = struct.unpack(f">{ndim}I", raw[4:header_end])
    need = header_end + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload at byte {len(raw)} (need {need})")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=header_end)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write ``array`` as IDX; gzip-compressed when the name ends in ``.gz``."""
    array = np.asarray(array)
    code = _CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    header = struct.pack(">I", (code << 8) | array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.astype(_DTYPES[code]).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the output byte-stable
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike):
    """Load an MNIST-style image/label pair.

    Returns:
        ``(images, labels)`` where images are float32 in [0, 1] with shape
        ``(n, rows, cols)`` and labels are int64 with shape ``(n,)``.
    """
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)
