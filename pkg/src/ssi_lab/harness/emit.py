"""Tidy per-figure tables.

Each figure id has a fixed column schema. CSV floats are written with
``repr`` so re-emission from the same rows is bytewise identical; JSON
mirrors the CSV rows as an array of objects.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from pathlib import Path

from ..errors import ConfigError

__all__ = ["SCHEMAS", "emit_plot_data", "format_value"]

SCHEMAS = {
    "gain": ("L", "tau_tied", "tau_untied", "gain", "policy"),
    "gain-runs": ("L", "network", "replica", "seed", "lr", "tau", "censored"),
    "phase": ("omega", "a", "label", "p_semantic", "n_runs"),
    "phase-diagram": ("omega", "a", "label", "steepest", "global_kind"),
    "sie": ("name", "L", "sie"),
    "landscape": ("omega", "a", "label", "theta", "eps", "m", "loss"),
    "ode": ("d", "m0", "tau"),
    "ode-paths": ("d", "t", "overlap"),
    "sgd-run": ("replica", "seed", "step", "time", "overlap", "eps_norm"),
    "sgd-summary": ("replica", "seed", "tau", "final_overlap", "recovered"),
}


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def emit_plot_data(rows: list[dict], figure: str, out: str | os.PathLike, fmt: str = "csv") -> Path:
    """Write ``rows`` as ``<out>/<figure>.<fmt>`` and return the path.

    Raises
    ------
    ConfigError
        Unknown figure or format, empty ``rows`` or a row missing a column.
        Nothing is written in that case.
    """
    if figure not in SCHEMAS:
        raise ConfigError(f"unknown figure id {figure!r}")
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown format {fmt!r}")
    if not rows:
        raise ConfigError(f"no records to emit for {figure!r}")
    cols = SCHEMAS[figure]
    for i, row in enumerate(rows):
        missing = [c for c in cols if c not in row]
        if missing:
            raise ConfigError(f"row {i} of {figure!r} lacks fields {missing}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{figure}.{fmt}"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([format_value(row[c]) for c in cols])
        text = buf.getvalue()
    else:
        text = json.dumps([{c: _json_value(row[c]) for c in cols} for row in rows], indent=1) + "\n"
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path
