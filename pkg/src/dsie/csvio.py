"""Versioned CSV tables with full-precision, byte-reproducible floats."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Iterable, Sequence

SCHEMA_VERSION = "dsie-csv/1"


def fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    if v is None:
        return ""
    return str(v)


def render(header: Sequence[str], rows: Iterable[Sequence], kind: str) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={SCHEMA_VERSION} table={kind}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_table(path, header: Sequence[str], rows: Iterable[Sequence], kind: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render(header, rows, kind))
    return path


def read_table(path) -> tuple[dict, list[str], list[list[str]]]:
    """Inverse of :func:`write_table`: ``(meta, header, rows)`` with string cells."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing schema line")
    meta = dict(item.split("=", 1) for item in lines[0][2:].split())
    reader = csv.reader(lines[1:])
    header = next(reader)
    return meta, header, list(reader)
