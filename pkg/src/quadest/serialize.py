"""JSON and CSV emission with fixed float formatting.

All floats leaving the package are rendered with 17 significant digits so
that reports round-trip bit-exactly through text.
"""

from __future__ import annotations

import json
import math
from typing import Any, Iterable, Sequence

import numpy as np

FLOAT_FMT = "%.17g"


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return "null"
    if math.isinf(x):
        return '"Infinity"' if x > 0 else '"-Infinity"'
    return FLOAT_FMT % x


def dumps(obj: Any, indent: int = 2) -> str:
    """Serialize to JSON with 17-significant-digit floats."""
    return _dump(obj, indent, 0)


def _dump(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    close = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = (
            f"{pad}{json.dumps(str(k))}: {_dump(v, indent, level + 1)}"
            for k, v in obj.items()
        )
        return "{\n" + ",\n".join(items) + "\n" + close + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = np.asarray(obj).tolist() if isinstance(obj, np.ndarray) else list(obj)
        if not seq:
            return "[]"
        scalars = all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in seq)
        if scalars:
            return "[" + ", ".join(_dump(v, indent, level + 1) for v in seq) + "]"
        items = (pad + _dump(v, indent, level + 1) for v in seq)
        return "[\n" + ",\n".join(items) + "\n" + close + "]"
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def dump_json(obj: Any, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(obj))
        fh.write("\n")


def load_json(path) -> Any:
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Write rows of mixed ints/floats; floats at 17 significant digits."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            out = []
            for v in row:
                if isinstance(v, (float, np.floating)):
                    out.append(FLOAT_FMT % float(v))
                else:
                    out.append(str(v))
            fh.write(",".join(out) + "\n")


def read_csv_columns(path, required: Sequence[str]) -> dict[str, np.ndarray]:
    """Read a headed CSV into float columns; raises KeyError on missing names."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise ValueError(f"{path}: empty CSV")
        names = [h.strip() for h in header.split(",")]
        data = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=float)
    if data.size == 0:
        data = data.reshape(0, len(names))
    if data.shape[1] != len(names):
        raise ValueError(f"{path}: {data.shape[1]} columns, header names {len(names)}")
    cols = {name: data[:, i] for i, name in enumerate(names)}
    for name in required:
        if name not in cols:
            raise KeyError(f"{path}: missing column {name!r}")
    return cols
