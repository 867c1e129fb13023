"""Machine-readable report output.

JSON reports are written with sorted keys and a fixed indent so identical
inputs give byte-identical files.  Non-finite floats use the ``Infinity`` /
``NaN`` tokens understood by Python's ``json`` module.
"""
from __future__ import annotations

import csv
import io
import json
import sys
from pathlib import Path as FilePath
from typing import Iterable, Mapping

FORMAT_VERSION = "ctxsmc-report/1"


def to_json(report: Mapping) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def _flatten(obj, prefix: str = "") -> Iterable[tuple[str, object]]:
    if isinstance(obj, Mapping):
        for k in sorted(obj):
            yield from _flatten(obj[k], f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, (list, tuple)) and any(isinstance(v, (Mapping, list, tuple)) for v in obj):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}.{i}")
    elif isinstance(obj, (list, tuple)):
        yield prefix, " ".join(repr(v) if isinstance(v, float) else str(v) for v in obj)
    else:
        yield prefix, obj


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(report: Mapping, columns: Iterable[str] | None = None, rows_key: str = "rows") -> str:
    """CSV text.

    With ``columns`` the report's ``rows_key`` list is written one row per
    entry in that column order; otherwise the report is flattened into
    ``key,value`` lines with dotted, sorted keys.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if columns is not None:
        columns = list(columns)
        w.writerow(columns)
        for row in report[rows_key]:
            w.writerow([_cell(row.get(c)) for c in columns])
    else:
        w.writerow(["key", "value"])
        for k, v in _flatten(report):
            w.writerow([k, _cell(v)])
    return buf.getvalue()


def emit_report(report: Mapping, fmt: str = "json", out=None, columns=None) -> str:
    """Render ``report`` and write it to ``out`` (a path; ``None`` or ``-`` for stdout)."""
    if fmt == "json":
        text = to_json(report)
    elif fmt == "csv":
        text = to_csv(report, columns)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        try:
            FilePath(out).write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write report to {out}: {exc}") from None
    return text


def load_report(text_or_path) -> dict:
    """Parse a JSON report back into a dictionary."""
    p = FilePath(str(text_or_path))
    text = p.read_text() if "\n" not in str(text_or_path) and p.exists() else str(text_or_path)
    return json.loads(text)
