"""Canonical JSON with fixed float formatting.

Floats are rendered with %.9g (nine significant digits) and keys are
sorted, so re-serializing the same data is byte-identical across runs
and platforms.  Standard json.loads reads the output back.
"""
from __future__ import annotations

import json
import math
from typing import Any

from .errors import DataFormatError


def _render(obj: Any, out: list[str]) -> None:
    if obj is None or obj is True or obj is False:
        out.append("null" if obj is None else ("true" if obj else "false"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, bool):  # pragma: no cover - caught above
        out.append("true" if obj else "false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        if not math.isfinite(obj):
            raise DataFormatError("non-finite float in canonical JSON")
        out.append("%.9g" % obj)
    elif isinstance(obj, dict):
        out.append("{")
        first = True
        for key in sorted(obj):
            if not isinstance(key, str):
                raise DataFormatError("canonical JSON keys must be strings")
            if not first:
                out.append(",")
            first = False
            out.append(json.dumps(key, ensure_ascii=True))
            out.append(":")
            _render(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _render(item, out)
        out.append("]")
    else:
        raise DataFormatError("cannot canonicalize %r" % type(obj).__name__)


def dumps_canonical(obj: Any) -> str:
    out: list[str] = []
    _render(obj, out)
    return "".join(out)


def loads(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError("invalid JSON: %s" % exc) from exc
