"""Simulation of fractional, mixed fractional and SDE sample paths.

Fractional Brownian motion is generated exactly on a uniform grid: the
Cholesky factor of the fractional Gaussian noise covariance (stationary
increments) is applied to i.i.d. normals and the levels are recovered by a
cumulative sum. The factor depends only on ``(T, n, H)`` and is cached.

The SDE ``dX = S(X, phi) dt + dW + dW^H`` is integrated with the Euler scheme.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import toeplitz

from . import rng as _rng
from .errors import CovarianceError, EulerDivergenceError


# --------------------------------------------------------------------------------------
# Grid and paths
# --------------------------------------------------------------------------------------
@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.T) and self.T > 0):
            raise ValueError(f"horizon T must be positive and finite, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @functools.cached_property
    def points(self) -> np.ndarray:
        pts = np.linspace(0.0, self.T, self.n_steps + 1)
        pts.setflags(write=False)
        return pts

    def __len__(self):
        return self.n_steps + 1

    def time_strings(self) -> list[str]:
        """Grid times as written to panel files (17 significant digits)."""
        return [format_float(t) for t in self.points]


def format_float(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class SamplePath:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.grid),):
            raise ValueError(
                f"path has {self.values.shape} values, grid has {len(self.grid)} points"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("path contains non-finite values")


# --------------------------------------------------------------------------------------
# Random effects
# --------------------------------------------------------------------------------------
@dataclass(frozen=True)
class GaussianEffect:
    mean: float
    variance: float

    def __post_init__(self):
        if not (self.variance >= 0 and math.isfinite(self.variance)):
            raise ValueError(f"effect variance must be >= 0, got {self.variance}")


@dataclass(frozen=True)
class DegenerateEffect:
    value: float


@dataclass(frozen=True)
class TabulatedDensity:
    """Discrete approximation of ``g(psi, theta) dnu(psi)``: nodes and probability weights."""

    nodes: tuple
    weights: tuple

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float).ravel()
        weights = np.asarray(self.weights, dtype=float).ravel()
        if nodes.shape != weights.shape or nodes.size == 0:
            raise ValueError("nodes and weights must be non-empty and of equal length")
        if np.any(weights < 0):
            raise ValueError("tabulated weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-10:
            raise ValueError(f"tabulated weights sum to {weights.sum()!r}, expected 1")
        object.__setattr__(self, "nodes", tuple(nodes.tolist()))
        object.__setattr__(self, "weights", tuple(weights.tolist()))


EffectDistribution = GaussianEffect | DegenerateEffect | TabulatedDensity


def gauss_hermite_density(logpdf: Callable, loc: float, scale: float, n_nodes: int = 64) -> TabulatedDensity:
    """Tabulate a Lebesgue density on Gauss-Hermite nodes centred at ``loc``.

    The weights are the Hermite weights corrected by the ratio of the target
    density to the Gaussian weight function, then renormalized.
    """
    x, wts = np.polynomial.hermite.hermgauss(n_nodes)
    nodes = loc + math.sqrt(2.0) * scale * x
    logw = np.log(wts) + x**2 + np.asarray(logpdf(nodes), dtype=float)
    logw -= logw.max()
    w = np.exp(logw)
    return TabulatedDensity(tuple(nodes), tuple(w / w.sum()))


def sample_effects(dist: EffectDistribution, N: int, rng: np.random.Generator) -> np.ndarray:
    if N < 1:
        raise ValueError("N must be at least 1")
    if isinstance(dist, DegenerateEffect):
        return np.full(N, float(dist.value))
    if isinstance(dist, GaussianEffect):
        if dist.variance == 0:
            return np.full(N, float(dist.mean))
        return dist.mean + math.sqrt(dist.variance) * rng.standard_normal(N)
    if isinstance(dist, TabulatedDensity):
        return rng.choice(np.asarray(dist.nodes), size=N, p=np.asarray(dist.weights))
    raise TypeError(f"unknown effect distribution {dist!r}")


# --------------------------------------------------------------------------------------
# Drift specifications
# --------------------------------------------------------------------------------------
def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_BUILTINS = {
    "identity": lambda x: x,
    "sine": np.sin,
    "logistic": _logistic,
    "bump": lambda x: 1.0 / (1.0 + x * x),
}


@dataclass(frozen=True)
class LinearMultiplier:
    """Drift ``psi * S(x)`` with a known base function ``S``.

    ``name`` is one of ``identity``, ``constant``, ``sine``, ``logistic``,
    ``bump`` (``1/(1+x^2)``) or ``tabulated`` (piecewise linear through
    ``table``, flat outside it).
    """

    name: str
    constant: float = 0.0
    table: Optional[tuple] = None

    def __post_init__(self):
        if self.name == "tabulated":
            if self.table is None:
                raise ValueError("tabulated drift needs a (xs, ys) table")
            xs, ys = (np.asarray(a, dtype=float) for a in self.table)
            if xs.shape != ys.shape or xs.size < 2 or np.any(np.diff(xs) <= 0):
                raise ValueError("tabulated drift needs increasing xs and matching ys")
            object.__setattr__(self, "table", (tuple(xs), tuple(ys)))
        elif self.name != "constant" and self.name not in _BUILTINS:
            raise ValueError(f"unknown drift base function {self.name!r}")

    def base(self, x):
        x = np.asarray(x, dtype=float)
        if self.name == "constant":
            return np.full_like(x, self.constant)
        if self.name == "tabulated":
            xs, ys = self.table
            return np.interp(x, xs, ys)
        return _BUILTINS[self.name](x)

    def __call__(self, x, psi):
        return np.asarray(psi, dtype=float) * self.base(x)

    def describe(self) -> str:
        if self.name == "constant":
            return f"constant:{format_float(self.constant)}"
        return self.name


@dataclass(frozen=True)
class GeneralDrift:
    func: Callable
    name: str = "general"

    def __call__(self, x, psi):
        return np.asarray(self.func(np.asarray(x, dtype=float), psi), dtype=float)

    def describe(self) -> str:
        return self.name


DriftSpec = LinearMultiplier | GeneralDrift


def parse_drift(text: str) -> LinearMultiplier:
    """Parse ``identity``, ``sine``, ``logistic``, ``bump`` or ``constant:<c>``."""
    name, _, arg = text.partition(":")
    name = name.strip()
    if name == "constant":
        if not arg:
            raise ValueError("constant drift needs a value, e.g. 'constant:1.5'")
        return LinearMultiplier("constant", constant=float(arg))
    if arg:
        raise ValueError(f"drift {name!r} takes no argument")
    return LinearMultiplier(name)


def lipschitz_estimate(drift: DriftSpec, lo: float, hi: float, psi: float = 1.0, n: int = 2001) -> float:
    """Largest finite-difference slope of the drift on ``[lo, hi]`` (sampled, not proved)."""
    x = np.linspace(lo, hi, n)
    y = drift(x, psi)
    if not np.all(np.isfinite(y)):
        raise ValueError("drift is not finite on the sampled state range")
    return float(np.max(np.abs(np.diff(y) / np.diff(x))))


# --------------------------------------------------------------------------------------
# Gaussian drivers
# --------------------------------------------------------------------------------------
def fgn_autocovariance(grid: TimeGrid, H: float) -> np.ndarray:
    m = np.arange(grid.n_steps, dtype=float)
    h2 = 2.0 * H
    return 0.5 * grid.dt**h2 * (np.abs(m + 1) ** h2 - 2.0 * m**h2 + np.abs(m - 1) ** h2)


@functools.lru_cache(maxsize=32)
def _fgn_factor(T: float, n_steps: int, H: float) -> np.ndarray:
    grid = TimeGrid(T, n_steps)
    cov = toeplitz(fgn_autocovariance(grid, H))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(cov)
        raise CovarianceError(
            f"fGn covariance for H={H}, n={n_steps}, T={T} is not positive definite "
            f"(smallest eigenvalue {eig[0]:.3e}); the grid is too fine for double precision"
        ) from None
    L.setflags(write=False)
    return L


def fgn_factor(grid: TimeGrid, H: float) -> np.ndarray:
    """Lower Cholesky factor of the fractional Gaussian noise covariance on ``grid``."""
    if not 0.0 < H < 1.0:
        raise ValueError(f"Hurst index must lie in (0, 1), got {H}")
    return _fgn_factor(grid.T, grid.n_steps, float(H))


def fbm_increments(grid: TimeGrid, H: float, normals: np.ndarray) -> np.ndarray:
    """Map standard normals of shape (..., n) to fBm increments with the exact law."""
    return normals @ fgn_factor(grid, H).T


def _levels(increments):
    out = np.zeros(increments.shape[:-1] + (increments.shape[-1] + 1,))
    np.cumsum(increments, axis=-1, out=out[..., 1:])
    return out


def simulate_fbm(grid: TimeGrid, H: float, rng: np.random.Generator) -> SamplePath:
    return SamplePath(grid, _levels(fbm_increments(grid, H, rng.standard_normal(grid.n_steps))))


def simulate_bm(grid: TimeGrid, rng: np.random.Generator) -> SamplePath:
    return SamplePath(grid, _levels(math.sqrt(grid.dt) * rng.standard_normal(grid.n_steps)))


def simulate_mixed_fbm(grid: TimeGrid, H: float, rng: np.random.Generator) -> SamplePath:
    """``W + W^H`` with the two summands drawn from independent child streams."""
    bm_rng, fbm_rng = rng.spawn(2)
    w = math.sqrt(grid.dt) * bm_rng.standard_normal(grid.n_steps)
    wh = fbm_increments(grid, H, fbm_rng.standard_normal(grid.n_steps))
    return SamplePath(grid, _levels(w + wh))


def mixed_driver_increments(grid, H, seed, subjects, replicate=0, purpose=_rng.PANEL, split=False):
    """Mixed fBm increments for the given subjects from their own sub-streams.

    Returns an array of shape (len(subjects), n). With ``split=True`` the
    Brownian and fractional parts are returned separately.
    """
    n = grid.n_steps
    zb = _rng.subject_normals(seed, purpose, replicate, subjects, _rng.BROWNIAN, n)
    zf = _rng.subject_normals(seed, purpose, replicate, subjects, _rng.FRACTIONAL, n)
    w = math.sqrt(grid.dt) * zb
    wh = fbm_increments(grid, H, zf)
    if split:
        return w, wh
    return w + wh


# --------------------------------------------------------------------------------------
# Panels
# --------------------------------------------------------------------------------------
@dataclass
class SubjectPanel:
    """N observed paths on a shared grid, stored as an (N, n+1) array.

    ``driver`` holds the mixed fBm levels used to generate each path and is
    only kept when requested (it is needed for decomposition diagnostics).
    """

    grid: TimeGrid
    values: np.ndarray
    hurst: float
    effects: Optional[np.ndarray] = None
    driver: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != len(self.grid):
            raise ValueError("panel paths do not match the grid length")
        if not 0.5 <= self.hurst < 1.0:
            raise ValueError(f"panel Hurst index must lie in [1/2, 1), got {self.hurst}")
        if self.effects is not None:
            self.effects = np.asarray(self.effects, dtype=float)
            if self.effects.shape != (self.N,):
                raise ValueError("effects must have one entry per subject")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    def path(self, i: int) -> SamplePath:
        return SamplePath(self.grid, self.values[i])

    @property
    def paths(self) -> list[SamplePath]:
        return [self.path(i) for i in range(self.N)]


def euler(grid: TimeGrid, drift: DriftSpec, effects, x0, increments) -> np.ndarray:
    """Euler scheme ``X_{k+1} = X_k + S(X_k, phi) dt + dW_k`` for a batch of subjects.

    Raises EulerDivergenceError listing every subject whose state became
    non-finite.
    """
    increments = np.atleast_2d(increments)
    N, n = increments.shape
    effects = np.broadcast_to(np.asarray(effects, dtype=float), (N,))
    x = np.empty((N, n + 1))
    x[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (N,))
    dt = grid.dt
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            x[:, k + 1] = x[:, k] + drift(x[:, k], effects) * dt + increments[:, k]
    bad = ~np.isfinite(x)
    if bad.any():
        rows = np.flatnonzero(bad.any(axis=1))
        raise EulerDivergenceError({int(i): int(np.argmax(bad[i])) for i in rows})
    return x


def simulate_panel(
    grid: TimeGrid,
    H: float,
    drift: DriftSpec,
    dist: EffectDistribution,
    N: int,
    x0=0.0,
    seed: int = 0,
    replicate: int = 0,
    purpose: int = _rng.PANEL,
    subjects: Optional[Sequence[int]] = None,
    keep_driver: bool = False,
) -> SubjectPanel:
    """Simulate N subjects of the random-effects SDE.

    Subject ``i`` draws its effect and both drivers from the sub-streams
    keyed by ``(purpose, replicate, i)``; ``subjects`` selects a subset of
    subject indices (used for chunked generation of very large panels).
    """
    if not 0.5 <= H < 1.0:
        raise ValueError(f"Hurst index must lie in [1/2, 1) for SDE simulation, got {H}")
    if N < 1:
        raise ValueError("N must be at least 1")
    idx = np.arange(N) if subjects is None else np.asarray(subjects, dtype=int)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        if x0.shape != (N,):
            raise ValueError("per-subject x0 must have length N")
        x0 = x0[idx]
    effects = np.array(
        [sample_effects(dist, 1, _rng.substream(seed, purpose, replicate, int(i), _rng.EFFECT))[0] for i in idx]
    )
    dw = mixed_driver_increments(grid, H, seed, idx, replicate, purpose)
    values = euler(grid, drift, effects, x0, dw)
    return SubjectPanel(grid, values, H, effects, _levels(dw) if keep_driver else None)
