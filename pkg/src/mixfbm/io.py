"""Panel files: long-format CSV ``subject,t,value`` plus an optional JSON sidecar."""

from __future__ import annotations

import csv
import json
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError
from .sim import SubjectPanel, TimeGrid, format_float

PANEL_HEADER = ["subject", "t", "value"]


def versions() -> dict:
    from . import __version__
    from .kernel import CACHE_FORMAT_VERSION, SOLVER_VERSION

    return {
        "package": __version__,
        "solver": SOLVER_VERSION,
        "kernel_cache_format": CACHE_FORMAT_VERSION,
        "panel_format": 1,
    }


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_panel(panel: SubjectPanel, path, meta: Optional[dict] = None) -> None:
    """Write the panel CSV and, when ``meta`` is given, the sidecar JSON next to it."""
    path = Path(path)
    times = panel.grid.time_strings()
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(PANEL_HEADER)
        for i, row in enumerate(panel.values, start=1):
            for t, x in zip(times, row):
                out.writerow([i, t, format_float(x)])
    if meta is not None:
        doc = dict(meta)
        doc.update(T=panel.grid.T, n_steps=panel.grid.n_steps, N=panel.N, H=panel.hurst)
        if panel.effects is not None:
            doc["effects"] = [float(e) for e in panel.effects]
        doc["versions"] = versions()
        sidecar_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _decimal(text: str, where: str) -> Decimal:
    try:
        d = Decimal(text)
    except InvalidOperation:
        raise DataError(f"{where}: {text!r} is not a number") from None
    if not d.is_finite():
        raise DataError(f"{where}: {text!r} is not finite")
    return d


def read_panel(path, grid: TimeGrid) -> np.ndarray:
    """Read a panel CSV and return its (N, n+1) values.

    Every subject must be observed at exactly the grid times; times are
    compared as exact decimals against the grid's 17-digit representation.
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read panel {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PANEL_HEADER:
            raise DataError(f"{path}: expected header {','.join(PANEL_HEADER)}, got {header}")
        rows = list(reader)
    expected = [Decimal(s) for s in grid.time_strings()]
    m = len(expected)
    if not rows or len(rows) % m:
        raise DataError(f"{path}: {len(rows)} data rows is not a multiple of the {m} grid points")
    N = len(rows) // m
    values = np.empty((N, m))
    for r, rec in enumerate(rows):
        line = r + 2
        if len(rec) != 3:
            raise DataError(f"{path}:{line}: expected 3 fields, got {len(rec)}")
        i, k = divmod(r, m)
        if rec[0].strip() != str(i + 1):
            raise DataError(f"{path}:{line}: expected subject {i + 1}, got {rec[0]!r}")
        t = _decimal(rec[1], f"{path}:{line}")
        if t != expected[k]:
            raise DataError(
                f"{path}:{line}: time {rec[1]} does not match grid time {grid.time_strings()[k]} "
                f"(T={format_float(grid.T)}, n_steps={grid.n_steps})"
            )
        values[i, k] = float(_decimal(rec[2], f"{path}:{line}"))
    return values


def read_sidecar(path) -> Optional[dict]:
    p = sidecar_path(path)
    if not p.exists():
        return None
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: invalid JSON ({exc})") from None
