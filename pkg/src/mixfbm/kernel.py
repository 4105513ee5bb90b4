"""Kernel ``g_H(s, t)`` of the fundamental martingale and its bracket ``w^H``.

For every endpoint ``t_k`` the kernel solves

    g(s) + H (2H-1) int_0^{t_k} g(r) |s-r|^{2H-2} dr = 1,    0 <= s <= t_k,

the s-derivative form of the defining integro-differential equation. At
``H = 1/2`` the integral term collapses to ``g`` itself and ``g = 1/2``.

Two discretizations are provided:

``nystrom``
    Collocation at the grid nodes with product integration: ``g`` is piecewise
    linear and the weakly singular factor is integrated exactly against each
    hat function. Accurate pointwise; integrals over a row use the trapezoid
    rule.

``galerkin`` (default)
    ``g`` piecewise constant on grid cells and the equation averaged over each
    cell. The cell-averaged kernel is exactly the covariance of the fractional
    Gaussian noise, so row k solves ``Sigma_k g = dt 1`` with ``Sigma_k`` the
    covariance of the first k mixed increments. The discrete transform is then
    an exact discrete martingale and row integrals use the left-point rule;
    this is the discretization under which the drift likelihood is unbiased.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import lu_factor, lu_solve, solve_triangular, toeplitz

from .errors import DataError, KernelSolveError
from .sim import TimeGrid, fgn_autocovariance

log = logging.getLogger(__name__)

SOLVER_VERSION = "1"
METHODS = ("galerkin", "nystrom")
DEFAULT_METHOD = "galerkin"
CACHE_FORMAT_VERSION = 1
CACHE_MAGIC = b"MFBMKT\x00\x01"
DEFAULT_TOLERANCE = 1e-10
MAX_RECOMMENDED_STEPS = 512


@dataclass(frozen=True, eq=False)
class KernelTable:
    """``g[k, j] ~ g_H(s_j, t_k)`` for ``j <= k`` (zero above the diagonal) and ``w[k] ~ w^H_{t_k}``."""

    grid: TimeGrid
    hurst: float
    g: np.ndarray
    w: np.ndarray
    residual_norm: float
    tolerance: float = DEFAULT_TOLERANCE
    method: str = DEFAULT_METHOD

    @property
    def rule(self) -> str:
        """Quadrature rule for integrals over a kernel row: ``left`` or ``trapezoid``."""
        return "trapezoid" if self.method == "nystrom" else "left"

    @property
    def dw(self) -> np.ndarray:
        return np.diff(self.w)

    def row(self, k: int) -> np.ndarray:
        return self.g[k, : k + 1]

    @functools.cached_property
    def strict_rows(self) -> np.ndarray:
        """(n+1, n) matrix whose row k holds ``g[k, j]`` for ``j < k``."""
        return np.tril(self.g, -1)[:, : self.grid.n_steps]

    @functools.cached_property
    def trapezoid_rows(self) -> np.ndarray:
        """(n+1, n+1) matrix whose row k holds trapezoid weights times ``g[k, j]`` on ``[0, t_k]``."""
        n = self.grid.n_steps
        wts = np.tril(self.g).copy()
        wts[:, 0] *= 0.5
        wts[np.arange(n + 1), np.arange(n + 1)] *= 0.5
        wts[0, 0] = 0.0
        return self.grid.dt * wts

    @functools.cached_property
    def drift_rows(self) -> np.ndarray:
        """(n+1, n+1) weights mapping grid values of ``C`` to ``int_0^{t_k} g(s, t_k) C(s) ds``."""
        if self.rule == "trapezoid":
            return self.trapezoid_rows
        return self.grid.dt * np.tril(self.g, -1)


def _pos_pow(x, a):
    # x**a with the limiting convention 0**a = 0 for a >= 0
    x = np.asarray(x, dtype=float)
    return np.where(x > 0, np.abs(x) ** a, 0.0)


def segment_weights(n: int, H: float):
    """Product-integration weights on unit-spaced segments.

    For node offset ``d = i - m`` relative to segment ``[m, m+1]`` returns
    ``(d, left, right)`` with

        left[d]  = a int_0^1 |d - tau|^{a-1} (1 - tau) dtau
        right[d] = a int_0^1 |d - tau|^{a-1} tau dtau,      a = 2H - 1,

    for ``d`` in ``[-n, n + 1]``. The physical weight is ``dt**a`` times these.
    """
    a = 2.0 * H - 1.0
    d = np.arange(-n, n + 2)
    df = d.astype(float)
    i0 = np.empty(d.shape)
    i1 = np.empty(d.shape)
    right_of = d >= 1
    x = df[right_of]
    i0[right_of] = _pos_pow(x, a) - _pos_pow(x - 1, a)
    i1[right_of] = x * i0[right_of] - a / (a + 1) * (_pos_pow(x, a + 1) - _pos_pow(x - 1, a + 1))
    e = -df[~right_of]
    i0[~right_of] = _pos_pow(1 + e, a) - _pos_pow(e, a)
    i1[~right_of] = a / (a + 1) * (_pos_pow(1 + e, a + 1) - _pos_pow(e, a + 1)) - e * i0[~right_of]
    return d, i0 - i1, i1


def collocation_operator(n: int, H: float, dt: float) -> np.ndarray:
    """Matrix ``B`` with ``B[i, j]`` the full-hat weight of node j seen from node i (times H dt^a).

    The system for endpoint ``t_k`` is ``I + B[:k+1, :k+1]`` with the
    half-hat corrections on columns 0 and k applied by ``_system``.
    """
    d, left, right = segment_weights(n, H)
    off = n
    i = np.arange(n + 1)[:, None]
    j = np.arange(n + 1)[None, :]
    scale = H * dt ** (2.0 * H - 1.0)
    B = left[i - j + off] + right[i - j + 1 + off]
    return scale * B, scale * left, scale * right, off


def _system(B, left, right, off, k):
    i = np.arange(k + 1)
    A = B[: k + 1, : k + 1].copy()
    A[:, 0] -= right[i + 1 + off]
    A[:, k] -= left[i - k + off]
    A[np.diag_indices(k + 1)] += 1.0
    return A


def solve_kernel(
    grid: TimeGrid,
    H: float,
    tolerance: float = DEFAULT_TOLERANCE,
    cache_dir: Optional[Path] = None,
    method: str = DEFAULT_METHOD,
) -> KernelTable:
    """Solve for ``g_H(., t_k)`` at every grid endpoint and integrate the bracket.

    With ``cache_dir`` the table is read from / written to a content-addressed
    file so repeated runs on the same ``(T, n, H, method)`` skip the solve.
    """
    if not 0.5 <= H < 1.0:
        raise ValueError(f"kernel solver supports H in [1/2, 1), got {H}")
    if method not in METHODS:
        raise ValueError(f"unknown kernel method {method!r}; expected one of {METHODS}")
    n = grid.n_steps
    if cache_dir is not None:
        path = Path(cache_dir) / cache_filename(grid, H, method)
        if path.exists():
            table = load_table(path)
            if table.residual_norm <= tolerance:
                log.info("kernel cache hit: %s", path)
                return table
        log.info("kernel cache miss: %s", path)
    if n > MAX_RECOMMENDED_STEPS:
        warnings.warn(
            f"n_steps={n} exceeds {MAX_RECOMMENDED_STEPS}; the kernel solve is O(n^4)",
            RuntimeWarning,
            stacklevel=2,
        )

    g = np.zeros((n + 1, n + 1))
    if H == 0.5:
        g[np.tril_indices(n + 1)] = 0.5
        residual = 0.0
    elif method == "galerkin":
        residual = _solve_galerkin(grid, H, g, tolerance)
    else:
        B, left, right, off = collocation_operator(n, H, grid.dt)
        g[0, 0] = 1.0
        residual = 0.0
        for k in range(1, n + 1):
            A = _system(B, left, right, off, k)
            ones = np.ones(k + 1)
            try:
                row = lu_solve(lu_factor(A, check_finite=True), ones)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise KernelSolveError(f"kernel system singular at t_k={grid.points[k]!r}", grid.points[k]) from exc
            r = float(np.max(np.abs(A @ row - ones)))
            if not (r <= tolerance):
                raise KernelSolveError(
                    f"kernel residual {r:.3e} above tolerance {tolerance:.1e} at t_k={grid.points[k]!r}",
                    grid.points[k],
                )
            residual = max(residual, r)
            g[k, : k + 1] = row
    w = bracket_from_rows(g, grid.dt, "trapezoid" if method == "nystrom" else "left")
    g.setflags(write=False)
    w.setflags(write=False)
    table = KernelTable(grid, float(H), g, w, residual, tolerance, method)
    if cache_dir is not None:
        save_table(table, Path(cache_dir) / cache_filename(grid, H, method))
    return table


def mixed_increment_covariance(grid: TimeGrid, H: float) -> np.ndarray:
    """Covariance of the n increments of ``W + W^H`` on ``grid``."""
    cov = toeplitz(fgn_autocovariance(grid, H))
    cov[np.diag_indices(grid.n_steps)] += grid.dt
    return cov


def _solve_galerkin(grid, H, g, tolerance):
    # Sigma_k is the leading k x k block of Sigma_n, so one Cholesky factor
    # serves every endpoint: Sigma_k^{-1} 1 = L_k^{-T} (L^{-1} 1)[:k].
    n, dt = grid.n_steps, grid.dt
    cov = mixed_increment_covariance(grid, H)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise KernelSolveError("mixed increment covariance is not positive definite", grid.points[-1]) from exc
    c = solve_triangular(L, np.ones(n), lower=True)
    g[0, 0] = 1.0
    residual = 0.0
    for k in range(1, n + 1):
        row = dt * solve_triangular(L[:k, :k].T, c[:k], lower=False)
        r = float(np.max(np.abs(cov[:k, :k] @ row / dt - 1.0)))
        if not (r <= tolerance):
            raise KernelSolveError(
                f"kernel residual {r:.3e} above tolerance {tolerance:.1e} at t_k={grid.points[k]!r}",
                grid.points[k],
            )
        residual = max(residual, r)
        g[k, :k] = row
        g[k, k] = row[-1]
    return residual


def bracket_from_rows(g: np.ndarray, dt: float, rule: str = "trapezoid") -> np.ndarray:
    n = g.shape[0] - 1
    w = np.zeros(n + 1)
    for k in range(1, n + 1):
        row = g[k, : k + 1]
        if rule == "trapezoid":
            w[k] = dt * (row.sum() - 0.5 * (row[0] + row[-1]))
        else:
            w[k] = dt * row[:-1].sum()
    return w


def bracket(table: KernelTable, k: int) -> float:
    """``w^H_{t_k}``: integral of kernel row k under the table's row rule."""
    if not 1 <= k <= table.grid.n_steps:
        raise IndexError(f"bracket index must lie in [1, {table.grid.n_steps}], got {k}")
    return float(table.w[k])


def discrete_residuals(table: KernelTable) -> np.ndarray:
    """Max residual of the discretized equation for every endpoint (index 0 unused)."""
    n = table.grid.n_steps
    out = np.zeros(n + 1)
    if table.hurst == 0.5:
        for k in range(1, n + 1):
            out[k] = np.max(np.abs(2.0 * table.row(k) - 1.0))
        return out
    if table.method == "galerkin":
        cov = mixed_increment_covariance(table.grid, table.hurst)
        for k in range(1, n + 1):
            out[k] = np.max(np.abs(cov[:k, :k] @ table.g[k, :k] / table.grid.dt - 1.0))
        return out
    B, left, right, off = collocation_operator(n, table.hurst, table.grid.dt)
    for k in range(1, n + 1):
        A = _system(B, left, right, off, k)
        out[k] = np.max(np.abs(A @ table.row(k) - 1.0))
    return out


# --------------------------------------------------------------------------------------
# Cache files
# --------------------------------------------------------------------------------------
def cache_key(grid: TimeGrid, H: float, method: str = DEFAULT_METHOD) -> str:
    ident = f"{float(grid.T).hex()}|{grid.n_steps}|{float(H).hex()}|{method}|{SOLVER_VERSION}"
    return hashlib.sha256(ident.encode()).hexdigest()[:24]


def cache_filename(grid: TimeGrid, H: float, method: str = DEFAULT_METHOD) -> str:
    return f"kernel-{method}-{cache_key(grid, H, method)}.bin"


def save_table(table: KernelTable, path: Path) -> Path:
    """Write the table as magic + JSON header + little-endian float64 ``g`` and ``w``."""
    header = {
        "format_version": CACHE_FORMAT_VERSION,
        "solver_version": SOLVER_VERSION,
        "T": float(table.grid.T).hex(),
        "n_steps": table.grid.n_steps,
        "H": float(table.hurst).hex(),
        "method": table.method,
        "tolerance": float(table.tolerance).hex(),
        "residual_norm": float(table.residual_norm).hex(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(table.g, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(table.w, dtype="<f8").tobytes())
    tmp.replace(path)
    return path


def load_table(path: Path) -> KernelTable:
    data = Path(path).read_bytes()
    if data[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise DataError(f"{path} is not a kernel cache file")
    pos = len(CACHE_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    if header.get("format_version") != CACHE_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported kernel cache format {header.get('format_version')}")
    n = int(header["n_steps"])
    grid = TimeGrid(float.fromhex(header["T"]), n)
    count = (n + 1) * (n + 1)
    if len(data) != pos + 8 * (count + n + 1):
        raise DataError(f"{path}: truncated kernel cache file")
    g = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(n + 1, n + 1).astype(float)
    w = np.frombuffer(data, dtype="<f8", count=n + 1, offset=pos + 8 * count).astype(float)
    g.setflags(write=False)
    w.setflags(write=False)
    return KernelTable(
        grid,
        float.fromhex(header["H"]),
        g,
        w,
        float.fromhex(header["residual_norm"]),
        float.fromhex(header["tolerance"]),
        header["method"],
    )
