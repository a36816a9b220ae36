"""CSV output shared by every dump: header row, LF endings, 17 significant digits."""

from __future__ import annotations

import numbers
from pathlib import Path


def _fmt(value):
    if isinstance(value, str):
        return value
    if value is None:
        return ""
    if isinstance(value, numbers.Integral):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(path, header, rows, append=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_header = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="\n") as fh:
        if write_header:
            fh.write(",".join(header) + "\n")
        for row in rows:
            row = list(row)
            if len(row) != len(header):
                raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
            fh.write(",".join(_fmt(v) for v in row) + "\n")
