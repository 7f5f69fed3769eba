"""Deterministic writers for run artifacts (CSV tables and JSON documents)."""

from __future__ import annotations

import hashlib
import json
import math
import os
from typing import Any

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.10g"


def _json_default(value: Any):
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def _finite(payload: Any):
    """Replace NaN and infinities by None; JSON has no spelling for them."""
    if isinstance(payload, dict):
        return {key: _finite(value) for key, value in payload.items()}
    if isinstance(payload, (list, tuple)):
        return [_finite(value) for value in payload]
    if isinstance(payload, (float, np.floating)) and not math.isfinite(payload):
        return None
    return payload


def canonical_json(payload: Any) -> str:
    return json.dumps(_finite(payload), sort_keys=True, separators=(",", ":"), default=_json_default)


def config_hash(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def write_csv(frame: pd.DataFrame, path: str) -> str:
    _ensure_parent(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_json(payload: Any, path: str) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_finite(payload), fh, sort_keys=True, indent=2, default=_json_default)
        fh.write("\n")
    return path
