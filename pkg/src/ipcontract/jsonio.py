"""Deterministic JSON rendering with 17-significant-digit floats.

The stdlib json module renders floats with repr(), which round-trips but is
value-dependent in width. Every file this package writes goes through
render() instead, so identical inputs produce byte-identical output and every
number survives a JSON round trip bit-exactly.
"""

from __future__ import annotations

import json
import math

import numpy as np


def fmt(x) -> str:
    """Render one real number with 17 significant digits."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError("cannot render a non-finite number")
    return format(x, ".17g")


def render(obj, indent: int | None = None) -> str:
    out: list[str] = []
    _render(obj, out, indent, 0)
    return "".join(out)


def dump(obj, path, indent: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render(obj, indent=indent))
        fh.write("\n")


def load(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _render(obj, out: list[str], indent, level) -> None:
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool) or isinstance(obj, np.bool_):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(fmt(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, np.ndarray):
        _render(obj.tolist(), out, indent, level)
    elif isinstance(obj, (list, tuple)):
        _render_seq(obj, out, indent, level)
    elif isinstance(obj, dict):
        _render_map(obj, out, indent, level)
    else:
        raise TypeError(f"cannot render {type(obj).__name__} as JSON")


def _pad(indent, level) -> str:
    return "\n" + " " * (indent * level) if indent else ""


def _render_seq(seq, out, indent, level) -> None:
    if len(seq) == 0:
        out.append("[]")
        return
    out.append("[")
    for i, item in enumerate(seq):
        if i:
            out.append("," if indent is None else ",")
        out.append(_pad(indent, level + 1))
        _render(item, out, indent, level + 1)
    out.append(_pad(indent, level))
    out.append("]")


def _render_map(mapping, out, indent, level) -> None:
    if len(mapping) == 0:
        out.append("{}")
        return
    out.append("{")
    for i, (key, value) in enumerate(mapping.items()):
        if not isinstance(key, str):
            raise TypeError("JSON object keys must be strings")
        if i:
            out.append(",")
        out.append(_pad(indent, level + 1))
        out.append(json.dumps(key))
        out.append(": " if indent else ":")
        _render(value, out, indent, level + 1)
    out.append(_pad(indent, level))
    out.append("}")
