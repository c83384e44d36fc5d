"""
Report serialization: exact rationals as "p/q", complex values as {"re", "im"} and
deterministic JSON (sorted keys, no timestamps).
"""

import json
from enum import Enum
from fractions import Fraction
from typing import Any, Dict, List

import numpy as np
import pandas as pd
import sympy as sp
from pydantic import BaseModel

from .models import format_rational


def to_jsonable(value: Any) -> Any:
    """Convert report values into JSON-ready primitives"""
    if isinstance(value, BaseModel):
        return to_jsonable(value.model_dump(mode="python"))
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Fraction):
        return format_rational(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, (complex, np.complexfloating)):
        return {"re": float(value.real), "im": float(value.imag)}
    if isinstance(value, sp.MatrixBase):
        return [[str(value[r, c]) for c in range(value.shape[1])] for r in range(value.shape[0])]
    if isinstance(value, sp.Basic):
        return str(value)
    if isinstance(value, pd.DataFrame):
        return [to_jsonable(row) for row in value.to_dict(orient="records")]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, dict):
        return {_key(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set)):
        return [to_jsonable(v) for v in value]
    return str(value)


def _key(key: Any) -> str:
    if isinstance(key, tuple):
        return "(" + ", ".join(_key(k) for k in key) + ")"
    converted = to_jsonable(key)
    return converted if isinstance(converted, str) else json.dumps(converted, sort_keys=True)


def dumps_report(report: Any) -> str:
    """JSON text of a report; identical reports give identical text"""
    return json.dumps(to_jsonable(report), indent=2, sort_keys=True, default=str)


def text_report(report: Any, title: str = "") -> str:
    """Plain `key: value` lines, nested keys joined with dots"""
    lines: List[str] = [title, "=" * len(title)] if title else []
    for key, value in _flatten(to_jsonable(report)).items():
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def _flatten(value: Any, prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    if isinstance(value, dict) and not _is_complex(value):
        for key in sorted(value):
            flat.update(_flatten(value[key], f"{prefix}.{key}" if prefix else key))
    elif isinstance(value, list) and value and all(isinstance(v, dict) for v in value):
        for n, item in enumerate(value):
            flat.update(_flatten(item, f"{prefix}[{n}]"))
    else:
        flat[prefix or "value"] = _format_leaf(value)
    return flat


def _is_complex(value: Dict[str, Any]) -> bool:
    return set(value) == {"re", "im"}


def _format_leaf(value: Any) -> str:
    if isinstance(value, dict) and _is_complex(value):
        return f"{value['re']} + {value['im']}i"
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_csv(frame: pd.DataFrame, path: str) -> str:
    frame.to_csv(path, index=False)
    return path
