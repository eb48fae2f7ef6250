"""Comma-separated tables with a self-describing config echo.

Every artifact starts with ``# key=value`` comment lines echoing the run
configuration, then a header row, then data rows.  Floats are written with
shortest round-trip precision.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence


def format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_table(
    path,
    header: Sequence[str],
    rows: Iterable[Sequence],
    echo: Mapping[str, object] | None = None,
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(echo or {}):
            fh.write(f"# {key}={echo[key]}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_cell(v) for v in row) + "\n")


def read_table(path) -> tuple[list[str], list[list[str]]]:
    """Read a table back, skipping the config echo."""
    header: list[str] = []
    rows: list[list[str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if not header:
                header = line.split(",")
            else:
                rows.append(line.split(","))
    return header, rows
