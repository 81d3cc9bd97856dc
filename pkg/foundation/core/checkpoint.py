"""
Parameter file format
=====================

Flat binary container of named float64 arrays, shared by network checkpoints
and shape models:

    magic            8 bytes  b"TSPARAM1"
    count            uint64
    per array:
        name length  uint64
        name         utf-8 bytes
        rank         uint64
        dims         rank x uint64
        values       prod(dims) x float64, C order

All integers and floats are little-endian.
"""

from pathlib import Path
from typing import Dict, Union
import logging
import struct

import numpy as np

from .errors import CorruptFileError

logger = logging.getLogger(__name__)

MAGIC = b"TSPARAM1"
_U64 = struct.Struct("<Q")

PathLike = Union[str, Path]


def save_arrays(path: PathLike, arrays: Dict[str, np.ndarray]) -> None:
    """Write named arrays in insertion order"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_U64.pack(len(arrays)))
        for name, array in arrays.items():
            encoded = name.encode("utf-8")
            array = np.asarray(array, dtype="<f8")
            f.write(_U64.pack(len(encoded)))
            f.write(encoded)
            f.write(_U64.pack(array.ndim))
            for n in array.shape:
                f.write(_U64.pack(n))
            f.write(np.ascontiguousarray(array).tobytes())
    logger.debug(f"Saved {len(arrays)} arrays to {path}")


def _read_exact(f, n: int, path: Path) -> bytes:
    chunk = f.read(n)
    if len(chunk) != n:
        raise CorruptFileError(f"{path}: unexpected end of file")
    return chunk


def load_arrays(path: PathLike) -> Dict[str, np.ndarray]:
    """Read named arrays; raises CorruptFileError on a bad magic or truncated body"""
    path = Path(path)
    arrays: Dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CorruptFileError(f"{path}: not a parameter file")
        (count,) = _U64.unpack(_read_exact(f, 8, path))
        for _ in range(count):
            (name_len,) = _U64.unpack(_read_exact(f, 8, path))
            name = _read_exact(f, name_len, path).decode("utf-8")
            (rank,) = _U64.unpack(_read_exact(f, 8, path))
            shape = tuple(_U64.unpack(_read_exact(f, 8, path))[0] for _ in range(rank))
            size = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, size * 8, path)
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if f.read(1):
            raise CorruptFileError(f"{path}: trailing bytes after {count} arrays")
    return arrays
