"""CSV time series, JSON reports and gnuplot scripts."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .errors import ContractError
from .simulator import TimeSeries

FLOAT_FMT = "%.17g"


def write_table(path, columns: dict, units: dict | None = None):
    """Write equal-length columns as CSV with full round-trip precision."""
    path = Path(path)
    names = list(columns)
    data = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    lines = []
    if units:
        lines.append("# units: " + ",".join(f"{n}={units.get(n, '-')}" for n in names))
    lines.append(",".join(names))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
        np.savetxt(fh, data, fmt=FLOAT_FMT, delimiter=",")
    return path


def write_timeseries(path, ts: TimeSeries, labels=None):
    labels = list(ts.labels) if labels is None else list(labels)
    cols = {"t": ts.t}
    cols.update({lb: ts[lb] for lb in labels})
    units = {"t": "s", **{lb: ts.units.get(lb, "-") for lb in labels}}
    return write_table(path, cols, units)


def read_timeseries(path) -> TimeSeries:
    """Read a CSV written by :func:`write_timeseries` (or any ``t,...`` table)."""
    path = Path(path)
    units = {}
    header = None
    skip = 0
    with open(path) as fh:
        for line in fh:
            skip += 1
            stripped = line.strip()
            if stripped.startswith("# units:"):
                for item in stripped[len("# units:"):].split(","):
                    if "=" in item:
                        k, v = item.split("=", 1)
                        units[k.strip()] = v.strip()
            elif stripped.startswith("#") or not stripped:
                continue
            else:
                header = [h.strip() for h in stripped.split(",")]
                break
    if not header or header[0] != "t":
        raise ContractError(f"{path}: first column must be 't'")
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    if data.shape[1] != len(header):
        raise ContractError(f"{path}: {data.shape[1]} columns but {len(header)} names in the header")
    if data.shape[0] < 2:
        raise ContractError(f"{path}: need at least two samples")
    t = data[:, 0]
    steps = np.diff(t)
    dt = float(steps.mean())
    if not dt > 0 or np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise ContractError(f"{path}: samples are not uniformly spaced in time")
    labels = header[1:]
    return TimeSeries(float(t[0]), dt, labels, data[:, 1:], {k: v for k, v in units.items() if k in labels})


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, obj):
    path = Path(path)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_gnuplot(path, table, x, ys, ylabel="", logy=False, title=""):
    """Plot script for a CSV written by :func:`write_table`."""
    path = Path(path)
    header = None
    with open(table) as fh:
        for line in fh:
            if not line.startswith("#"):
                header = line.strip().split(",")
                break
    col = {name: i + 1 for i, name in enumerate(header)}
    plots = ", \\\n     ".join(f"'{Path(table).name}' using {col[x]}:{col[y]} with lines title '{y}'" for y in ys)
    lines = [
        "set datafile separator ','",
        "set datafile commentschars '#'",
        "set key outside",
        f"set xlabel '{x}'",
        f"set ylabel '{ylabel}'",
        f"set title '{title}'",
    ]
    if logy:
        lines.append("set logscale y")
    lines.append(f"plot {plots}")
    lines.append("pause mouse close")
    path.write_text("\n".join(lines) + "\n")
    return path
