"""Small JSON helpers shared by the serialization surfaces.

Files are written deterministically (sorted keys, fixed separators) so
repeated runs with identical inputs produce byte-identical artifacts.
Infinities are mapped to the string sentinel "inf" on the way out and
back on the way in.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

__all__ = ["sanitize", "restore_inf", "dump_json", "load_json"]


def sanitize(obj: Any) -> Any:
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            raise ValueError("refusing to serialize NaN")
        return obj
    if isinstance(obj, dict):
        return {k: sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    return obj


def restore_inf(obj: Any) -> Any:
    if obj == "inf":
        return math.inf
    if obj == "-inf":
        return -math.inf
    return obj


def dump_json(obj: Any, path: str | Path) -> None:
    text = json.dumps(sanitize(obj), sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n")


def load_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text())
