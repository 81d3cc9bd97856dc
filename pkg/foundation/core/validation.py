"""
Data contracts
==============

Expected schema for MetaImage headers and value rules for the volume kinds
the pipeline passes around (images, masks, probability maps). Validators
return a list of ValidationError findings; callers decide whether to raise.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple
import logging

import numpy as np

from .errors import InvalidArgumentError
from .volume import Volume

logger = logging.getLogger(__name__)


@dataclass
class ValidationError:
    """Represents a validation finding"""
    field: str
    message: str
    severity: str  # "error" or "warning"
    actual_value: Any = None
    line_number: Optional[int] = None

    def to_dict(self):
        return {
            "field": self.field,
            "message": self.message,
            "severity": self.severity,
            "actual_value": self.actual_value,
            "line_number": self.line_number,
        }


ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
}


# Header contract for the MetaImage subset we read and write
HEADER_CONTRACT = {
    "source_name": "MetaImage header",
    "required_fields": [
        {"name": "NDims", "type": "int", "enum": [3]},
        {"name": "DimSize", "type": "int_list", "length": 3, "min": 1},
        {"name": "ElementSpacing", "type": "float_list", "length": 3, "min_exclusive": 0.0},
        {"name": "ElementType", "type": "str", "enum": list(ELEMENT_TYPES)},
        {"name": "ElementDataFile", "type": "str"},
    ],
    "optional_fields": [
        {"name": "ObjectType", "type": "str", "enum": ["Image"]},
        {"name": "CompressedData", "type": "bool", "enum": [False]},
        {"name": "Offset", "type": "float_list", "length": 3},
        {"name": "BinaryData", "type": "bool"},
        {"name": "BinaryDataByteOrderMSB", "type": "bool", "enum": [False]},
        {"name": "ElementNumberOfChannels", "type": "int", "enum": [1]},
    ],
}

# Value rules per volume kind
VOLUME_CONTRACTS = {
    "image": {"finite": True},
    "mask": {"finite": True, "allowed_values": (0, 1)},
    "probmap": {"finite": True, "min": 0.0, "max": 1.0},
}


def _coerce(field_spec: Dict[str, Any], raw: str) -> Any:
    expected = field_spec.get("type")
    if expected == "int":
        return int(raw)
    if expected == "float":
        return float(raw)
    if expected == "int_list":
        return [int(t) for t in raw.split()]
    if expected == "float_list":
        return [float(t) for t in raw.split()]
    if expected == "bool":
        lowered = raw.strip().lower()
        if lowered not in ("true", "false"):
            raise ValueError(f"expected True/False, got {raw!r}")
        return lowered == "true"
    return raw.strip()


def validate_field(field_spec: Dict[str, Any], raw: str, line_number: Optional[int]) -> Tuple[Any, List[ValidationError]]:
    """Type-convert one header value and check it against its header rule"""
    name = field_spec["name"]
    try:
        value = _coerce(field_spec, raw)
    except ValueError as e:
        return None, [ValidationError(name, f"Cannot parse {name}: {e}", "error", raw, line_number)]

    errors = []
    values = value if isinstance(value, list) else [value]

    if "length" in field_spec and len(values) != field_spec["length"]:
        errors.append(ValidationError(
            name, f"{name} needs {field_spec['length']} values, got {len(values)}", "error", raw, line_number
        ))
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            continue
        if "min" in field_spec and v < field_spec["min"]:
            errors.append(ValidationError(
                name, f"{name} = {v} below minimum {field_spec['min']}", "error", raw, line_number
            ))
        if "min_exclusive" in field_spec and v <= field_spec["min_exclusive"]:
            errors.append(ValidationError(
                name, f"{name} = {v} must exceed {field_spec['min_exclusive']}", "error", raw, line_number
            ))
    if "enum" in field_spec and value not in field_spec["enum"]:
        errors.append(ValidationError(
            name, f"{name} must be one of {field_spec['enum']}, got {value}", "error", raw, line_number
        ))
    return value, errors


def validate_header(entries: Dict[str, Tuple[str, int]], last_line: int) -> Tuple[Dict[str, Any], List[ValidationError]]:
    """
    Check parsed `key -> (raw value, line number)` header entries against
    HEADER_CONTRACT. Unknown keys produce warnings; missing mandatory keys are
    reported at the last header line.
    """
    parsed: Dict[str, Any] = {}
    errors: List[ValidationError] = []
    known = set()

    for field_spec in HEADER_CONTRACT["required_fields"]:
        name = field_spec["name"]
        known.add(name)
        if name not in entries:
            errors.append(ValidationError(name, f"Required key {name} is missing", "error", None, last_line))
            continue
        raw, line = entries[name]
        value, field_errors = validate_field(field_spec, raw, line)
        errors.extend(field_errors)
        parsed[name] = value

    for field_spec in HEADER_CONTRACT["optional_fields"]:
        name = field_spec["name"]
        known.add(name)
        if name in entries:
            raw, line = entries[name]
            value, field_errors = validate_field(field_spec, raw, line)
            errors.extend(field_errors)
            parsed[name] = value

    for name, (raw, line) in entries.items():
        if name not in known:
            errors.append(ValidationError(name, f"Unknown key {name} ignored", "warning", raw, line))

    return parsed, errors


def validate_volume(kind: str, v: Volume) -> List[ValidationError]:
    """Check a volume's values against the contract for its kind"""
    contract = VOLUME_CONTRACTS.get(kind)
    if contract is None:
        raise InvalidArgumentError(f"Unknown volume kind {kind!r}")
    data = np.asarray(v.data)
    errors = []
    if contract.get("finite") and not np.all(np.isfinite(data)):
        errors.append(ValidationError("data", f"{kind} contains non-finite values", "error"))
    if "allowed_values" in contract:
        if not np.all(np.isin(data, contract["allowed_values"])):
            errors.append(ValidationError(
                "data", f"{kind} values must be in {contract['allowed_values']}", "error"
            ))
    if "min" in contract and data.min() < contract["min"]:
        errors.append(ValidationError("data", f"{kind} below {contract['min']}", "error", float(data.min())))
    if "max" in contract and data.max() > contract["max"]:
        errors.append(ValidationError("data", f"{kind} above {contract['max']}", "error", float(data.max())))
    return errors


def require_volume(kind: str, v: Volume, context: str = "input") -> Volume:
    """Raise InvalidArgumentError if v breaks its kind's contract"""
    errors = validate_volume(kind, v)
    if errors:
        message = "; ".join(e.message for e in errors)
        logger.error(f"Volume contract failed for {context}: {message}")
        raise InvalidArgumentError(f"{context}: {message}")
    return v
