"""Canonical JSON emission: sorted keys, 2-space indent, floats as 6-decimal fixed point."""

from __future__ import annotations

import json
import math


def _scalar(v) -> str:
    if v is None or isinstance(v, (bool, str, int)):
        return json.dumps(v, ensure_ascii=False)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError(f"cannot serialize non-finite float {v}")
        s = f"{v:.6f}"
        return "0.000000" if s == "-0.000000" else s
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _emit(v, depth: int) -> str:
    pad = "  " * (depth + 1)
    end = "  " * depth
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {_emit(v[k], depth + 1)}" for k in sorted(v, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(v, (list, tuple)):
        if not v:
            return "[]"
        if all(not isinstance(x, (dict, list, tuple)) for x in v):
            return "[" + ", ".join(_scalar(x) for x in v) + "]"
        return "[\n" + ",\n".join(pad + _emit(x, depth + 1) for x in v) + "\n" + end + "]"
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):
        return _scalar(v.item())
    return _scalar(v)


def canonical_dumps(obj) -> str:
    return _emit(obj, 0) + "\n"
