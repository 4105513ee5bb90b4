"""Sufficient statistics and mixed likelihoods for the linear-multiplier model.

For drift ``psi * S(x)`` the conditional log-likelihood of one subject is
``psi U - psi^2 V / 2`` with

    U = sum_k b_k (Z_k - Z_{k-1}),     V = sum_k b_k^2 (w_k - w_{k-1}),

where ``b`` is the psi-free drift rate of ``S(X)``. Integrating the effect out
gives ``log lambda(u, v; theta)``; everything here stays in the log domain.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DataError, NumericalError
from .kernel import KernelTable
from .sim import (
    DegenerateEffect,
    DriftSpec,
    EffectDistribution,
    GaussianEffect,
    LinearMultiplier,
    SubjectPanel,
    TabulatedDensity,
    format_float,
)
from .transform import compute_q, rate_from_drift, transform_path


@dataclass
class SufficientStats:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.atleast_1d(np.asarray(self.u, dtype=float))
        self.v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if self.u.shape != self.v.shape or self.u.ndim != 1:
            raise ValueError("u and v must be 1-d arrays of equal length")
        if np.any(self.v < 0):
            raise ValueError("V statistics must be nonnegative")

    @property
    def N(self) -> int:
        return self.u.size

    def subset(self, idx) -> "SufficientStats":
        return SufficientStats(self.u[idx], self.v[idx])

    def concat(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(np.concatenate([self.u, other.u]), np.concatenate([self.v, other.v]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["subject", "U", "V"])
            for i, (u, v) in enumerate(zip(self.u, self.v), start=1):
                out.writerow([i, format_float(u), format_float(v)])

    @classmethod
    def read_csv(cls, path) -> "SufficientStats":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["subject", "U", "V"]:
            raise DataError(f"{path}: expected header subject,U,V")
        body = rows[1:]
        if [int(r[0]) for r in body] != list(range(1, len(body) + 1)):
            raise DataError(f"{path}: subjects must be numbered 1..N in order")
        return cls([float(r[1]) for r in body], [float(r[2]) for r in body])


def compute_stats(panel, table: KernelTable, drift: LinearMultiplier) -> SufficientStats:
    """(U_i, V_i) for every path of ``panel`` (a SubjectPanel or an (N, n+1) array)."""
    if not isinstance(drift, LinearMultiplier):
        raise TypeError("sufficient statistics need a linear-multiplier drift")
    values = panel.values if isinstance(panel, SubjectPanel) else np.atleast_2d(np.asarray(panel, dtype=float))
    if isinstance(panel, SubjectPanel) and panel.grid != table.grid:
        raise DataError("panel grid does not match the kernel table grid")
    z = transform_path(values, table)
    b = rate_from_drift(drift.base(values), table)
    u = np.sum(b * np.diff(z, axis=-1), axis=-1)
    v = np.sum(b * b * table.dw, axis=-1)
    bad = ~(np.isfinite(u) & np.isfinite(v))
    if bad.any():
        raise NumericalError(f"non-finite statistics for subjects {np.flatnonzero(bad).tolist()}")
    return SufficientStats(u, v)


def loglik_ratio_fixed_effect(u, v, psi):
    """``psi u - psi^2 v / 2``: log-likelihood ratio against the zero-drift law."""
    return psi * np.asarray(u) - 0.5 * psi * psi * np.asarray(v)


def log_lambda(u, v, dist: EffectDistribution):
    """``log int exp(psi u - psi^2 v / 2) g(psi) dnu(psi)``, vectorized over (u, v).

    The Gaussian case uses the completed-square form

        -log(1 + s2 v)/2 + (s2 u^2 + 2 mu u - mu^2 v) / (2 (1 + s2 v)),

    which stays finite as ``s2 -> 0`` and for very large ``v``.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if isinstance(dist, DegenerateEffect):
        return loglik_ratio_fixed_effect(u, v, float(dist.value))
    if isinstance(dist, GaussianEffect):
        mu, s2 = float(dist.mean), float(dist.variance)
        a = 1.0 + s2 * v
        return -0.5 * np.log1p(s2 * v) + (s2 * u * u + 2.0 * mu * u - mu * mu * v) / (2.0 * a)
    if isinstance(dist, TabulatedDensity):
        nodes = np.asarray(dist.nodes)
        with np.errstate(divide="ignore"):
            logw = np.log(np.asarray(dist.weights))
        terms = logw + nodes * u[..., None] - 0.5 * nodes**2 * v[..., None]
        return logsumexp(terms, axis=-1)
    raise TypeError(f"unknown effect distribution {dist!r}")


def panel_loglik(stats: SufficientStats, dist: EffectDistribution) -> float:
    """``log L_N = sum_i log lambda(X^i, theta)``."""
    out = float(np.sum(log_lambda(stats.u, stats.v, dist)))
    if not math.isfinite(out):
        raise NumericalError("panel log-likelihood is not finite")
    return out


# --------------------------------------------------------------------------------------
# General drifts: no sufficient statistics, the effect is integrated numerically
# --------------------------------------------------------------------------------------
def loglik_general(path, table: KernelTable, drift: DriftSpec, psi: float):
    """Discretized ``int Q dZ - (1/2) int Q^2 dw`` for drift ``S(x, psi)``."""
    z = transform_path(path, table)
    q = compute_q(path, table, drift, psi)
    return np.sum(q * np.diff(z, axis=-1), axis=-1) - 0.5 * np.sum(q * q * table.dw, axis=-1)


def log_lambda_general(path, table: KernelTable, drift: DriftSpec, dist: TabulatedDensity):
    """Mixed log-likelihood of a general drift against a tabulated effect density."""
    ell = np.stack([loglik_general(path, table, drift, psi) for psi in dist.nodes], axis=-1)
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(dist.weights))
    return logsumexp(ell + logw, axis=-1)


# --------------------------------------------------------------------------------------
# Parametric families theta -> effect distribution
# --------------------------------------------------------------------------------------
@dataclass(frozen=True)
class EffectFamily:
    """A parametric effect family: parameter names, box bounds and a builder."""

    name: str
    params: tuple
    bounds: tuple
    build: Callable[[Sequence[float]], EffectDistribution]

    def __call__(self, theta) -> EffectDistribution:
        return self.build(np.atleast_1d(np.asarray(theta, dtype=float)))

    @property
    def k(self) -> int:
        return len(self.params)


def gaussian_family(sigma2_max: float = 100.0, mu_bound: float = 1e3) -> EffectFamily:
    return EffectFamily(
        "gaussian",
        ("mu", "sigma2"),
        ((-mu_bound, mu_bound), (0.0, sigma2_max)),
        lambda th: GaussianEffect(float(th[0]), float(th[1])),
    )


def gaussian_known_variance_family(sigma2: float, mu_bound: float = 1e3) -> EffectFamily:
    return EffectFamily(
        "gaussian_known_variance",
        ("mu",),
        ((-mu_bound, mu_bound),),
        lambda th: GaussianEffect(float(th[0]), sigma2),
    )


def two_point_family(a: float, b: float) -> EffectFamily:
    """Effect equal to ``a`` with probability ``p`` and ``b`` otherwise; theta = (p,)."""
    return EffectFamily(
        "two_point",
        ("p",),
        ((0.0, 1.0),),
        lambda th: TabulatedDensity((a, b), (float(th[0]), 1.0 - float(th[0]))),
    )


def shifted_family(base: TabulatedDensity, loc_bound: float = 1e3) -> EffectFamily:
    """Location family ``psi = loc + base``; theta = (loc,)."""
    nodes = np.asarray(base.nodes)
    return EffectFamily(
        "shifted_tabulated",
        ("loc",),
        ((-loc_bound, loc_bound),),
        lambda th: TabulatedDensity(tuple(nodes + float(th[0])), base.weights),
    )
