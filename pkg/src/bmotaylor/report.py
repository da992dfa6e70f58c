"""JSON and CSV emission for experiment reports.

Floats are written with 17 significant digits so every double round-trips;
non-finite values become ``null``.  Keys keep insertion order, which makes
the output byte-stable for equal inputs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = ["to_jsonable", "dumps", "write_json", "content_hash", "write_csv", "csv_text"]


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy scalars/arrays, dataclasses and tuples to plain JSON types."""
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (str, type(None))):
        return obj
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    text = format(x, ".17g")
    if text.lstrip("-").isdigit():
        text += ".0"
    return text


def _emit(obj, indent: int, level: int, out: list):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(_float(obj))
    elif isinstance(obj, str):
        out.append(_quote(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (k, v) in enumerate(obj.items()):
            out.append(f"{pad}{_quote(k)}: ")
            _emit(v, indent, level + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, list):
        if not obj:
            out.append("[]")
        elif all(isinstance(v, (int, float, bool, type(None))) for v in obj):
            # numeric rows stay on one line
            parts = []
            for v in obj:
                sub: list = []
                _emit(v, indent, level, sub)
                parts.append("".join(sub))
            out.append("[" + ", ".join(parts) + "]")
        else:
            out.append("[\n")
            for i, v in enumerate(obj):
                out.append(pad)
                _emit(v, indent, level + 1, out)
                out.append(",\n" if i < len(obj) - 1 else "\n")
            out.append(end + "]")
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def _quote(s: str) -> str:
    import json

    return json.dumps(s, ensure_ascii=False)


def dumps(obj: Any, indent: int = 2) -> str:
    out: list = []
    _emit(to_jsonable(obj), indent, 0, out)
    return "".join(out) + "\n"


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def content_hash(config: dict, files: Iterable[str | Path] = ()) -> str:
    """SHA-256 over the canonical config text and the bytes of every input file."""
    h = hashlib.sha256()
    h.update(dumps(config).encode())
    for f in sorted(str(p) for p in files):
        h.update(b"\0" + f.encode() + b"\0")
        h.update(Path(f).read_bytes())
    return "sha256:" + h.hexdigest()


def _cell(v) -> str:
    v = to_jsonable(v)
    if isinstance(v, float):
        return "" if not math.isfinite(v) else format(v, ".17g")
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, dict)):
        return dumps(v).strip().replace("\n", " ")
    return "" if v is None else str(v)


def csv_text(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    Path(path).write_text(csv_text(rows, columns), encoding="utf-8")
