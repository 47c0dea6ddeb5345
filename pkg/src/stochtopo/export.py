"""Plain-text exports of designs, metrics and run summaries.

Floats are written with ``repr`` so that a fixed seed gives byte-identical
files. Every file is written to a temporary sibling first and moved into
place.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .damping import RunMetrics
from .fem import Mesh
from .gsm import DegenerateDesignError


class ExportError(OSError):
    pass


def _fmt(v) -> str:
    return repr(float(v))


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temporary file and ``os.replace``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def density_grid_text(values: np.ndarray, nelx: int, nely: int) -> str:
    """Element values as ``nely`` rows of ``nelx`` columns.

    Row ``j`` holds elements ``j * nelx .. (j + 1) * nelx - 1`` (bottom row
    first). The first line is a ``# rows=.. cols=..`` header.
    """
    values = np.asarray(values, dtype=float)
    if values.size != nelx * nely:
        raise ValueError(f"{values.size} values do not fill a {nely}x{nelx} grid")
    lines = [f"# rows={nely} cols={nelx}"]
    for row in values.reshape(nely, nelx):
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def read_density_grid(path) -> np.ndarray:
    """Read a grid written by :func:`export_density` back as a ``(rows, cols)`` array."""
    return np.loadtxt(path, delimiter=",", comments="#", ndmin=2)


def export_density(path, values: np.ndarray, nelx: int, nely: int) -> Path:
    return atomic_write(path, density_grid_text(values, nelx, nely))


def member_table_text(mesh: Mesh, areas: np.ndarray, members: Optional[np.ndarray] = None) -> str:
    """One row per member with positive area: end coordinates then area.

    ``areas`` is either one value per ground-structure member or, when
    ``members`` is given, one value per listed member.
    """
    areas = np.asarray(areas, dtype=float)
    idx = np.arange(mesh.n_elements) if members is None else np.asarray(members, dtype=int)
    if areas.shape != idx.shape:
        raise ValueError(f"{areas.size} areas for {idx.size} members")
    pos = areas > 0.0
    if not pos.any():
        raise DegenerateDesignError("degenerate design: no member with positive area to export")
    axes = "xyz"[:mesh.dim]
    header = ["member"] + [f"{a}1" for a in axes] + [f"{a}2" for a in axes] + ["area"]
    lines = [",".join(header)]
    for e, area in zip(idx[pos], areas[pos]):
        a, b = mesh.elements[e]
        row = [str(int(e))] + [_fmt(c) for c in mesh.nodes[a]] + [_fmt(c) for c in mesh.nodes[b]] + [_fmt(area)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def export_members(path, mesh: Mesh, areas: np.ndarray, members: Optional[np.ndarray] = None) -> Path:
    return atomic_write(path, member_table_text(mesh, areas, members))


def export_metrics(path, metrics: RunMetrics) -> Path:
    return atomic_write(path, metrics.to_csv())


def export_summary(path, summary: dict) -> Path:
    return atomic_write(path, json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
