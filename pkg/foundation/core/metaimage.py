"""
MetaImage volume I/O
====================

Reads and writes the MetaImage subset the pipeline needs: 3-D, single
channel, uncompressed little-endian MET_UCHAR / MET_SHORT / MET_FLOAT, x-fastest
body. `.mhd` files point at a sibling `.raw`; `.mha` files carry the body
after the header (`ElementDataFile = LOCAL`).

Unknown header keys are ignored with a warning. Missing or malformed
mandatory keys raise ParseError with the offending line number.
"""

from pathlib import Path
from typing import Dict, Optional, Tuple, Union
import logging

import numpy as np

from .errors import CorruptFileError, InvalidArgumentError, ParseError
from .validation import ELEMENT_TYPES, validate_header
from .volume import Volume

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_DTYPE_TO_ELEMENT = {
    np.dtype("uint8"): "MET_UCHAR",
    np.dtype("int16"): "MET_SHORT",
    np.dtype("float32"): "MET_FLOAT",
}


def _format_triple(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _parse_header(lines, path: Path) -> Tuple[Dict[str, Tuple[str, int]], int]:
    entries: Dict[str, Tuple[str, int]] = {}
    last_line = 0
    for line_number, line in lines:
        last_line = line_number
        stripped = line.strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ParseError(f"Expected 'Key = Value', got {stripped!r}", line_number, str(path))
        key, value = stripped.split("=", 1)
        entries[key.strip()] = (value.strip(), line_number)
        if key.strip() == "ElementDataFile":
            break
    return entries, last_line


def read_volume(path: PathLike) -> Volume:
    """Read a .mhd/.raw pair or a .mha file"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such volume file: {path}")

    with open(path, "rb") as f:
        header_lines = []
        line_number = 0
        while True:
            raw = f.readline()
            if not raw:
                break
            line_number += 1
            text = raw.decode("latin-1")
            header_lines.append((line_number, text))
            if text.strip().startswith("ElementDataFile"):
                break
        local_body = f.read()

    entries, last_line = _parse_header(header_lines, path)
    header, findings = validate_header(entries, last_line)
    for finding in findings:
        if finding.severity == "warning":
            logger.warning(f"{path}:{finding.line_number}: {finding.message}")
    errors = [e for e in findings if e.severity == "error"]
    if errors:
        first = errors[0]
        raise ParseError(first.message, first.line_number, str(path))

    dims = tuple(header["DimSize"])
    dtype = ELEMENT_TYPES[header["ElementType"]]
    data_file = header["ElementDataFile"]
    if data_file == "LOCAL":
        body = local_body
    else:
        body_path = path.parent / data_file
        if not body_path.exists():
            raise FileNotFoundError(f"Data file {body_path} referenced by {path} not found")
        body = body_path.read_bytes()

    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(body) != expected:
        raise CorruptFileError(
            f"{path}: header implies {expected} bytes ({dims} x {header['ElementType']}), body has {len(body)}"
        )

    values = np.frombuffer(body, dtype=dtype).astype(dtype.newbyteorder("="))
    origin = tuple(header.get("Offset", (0.0, 0.0, 0.0)))
    logger.debug(f"Read {path}: dims={dims} spacing={header['ElementSpacing']}")
    return Volume.from_flat(values, dims, header["ElementSpacing"], origin)


def write_volume(v: Volume, path: PathLike, element_type: Optional[str] = None) -> Path:
    """
    Write v as .mha (single file) or .mhd + .raw. The element type follows the
    array dtype (uint8, int16, float32); other dtypes need an explicit
    element_type and are cast to it.
    """
    path = Path(path)
    if element_type is None:
        element_type = _DTYPE_TO_ELEMENT.get(v.data.dtype)
        if element_type is None:
            element_type = "MET_FLOAT"
            logger.debug(f"Casting {v.data.dtype} to float32 for {path}")
    if element_type not in ELEMENT_TYPES:
        raise InvalidArgumentError(f"Unsupported element type {element_type}")

    body = np.ascontiguousarray(v.flat().astype(ELEMENT_TYPES[element_type])).tobytes()
    local = path.suffix.lower() == ".mha"
    raw_path = path.with_suffix(".raw")

    header = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"Offset = {_format_triple(v.origin)}",
        f"ElementSpacing = {_format_triple(v.spacing)}",
        f"DimSize = {' '.join(str(n) for n in v.dims)}",
        f"ElementType = {element_type}",
        f"ElementDataFile = {'LOCAL' if local else raw_path.name}",
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("latin-1"))
        if local:
            f.write(body)
    if not local:
        raw_path.write_bytes(body)
    return path
