"""Maximum likelihood estimation of the effect-distribution parameters."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq, minimize

from .errors import NoInformationError, NumericalError
from .likelihood import (
    EffectFamily,
    SufficientStats,
    gaussian_family,
    log_lambda,
    panel_loglik,
)
from .sim import GaussianEffect

CLOSED_FORM = "closed_form"
JOINT_SYSTEM = "joint_system"
DIRECT_MAX = "direct_max"

TIE_TOLERANCE = 1e-12


@dataclass
class EstimationResult:
    theta_hat: np.ndarray
    params: tuple
    loglik_at_max: float
    method: str
    iterations: int
    converged: bool
    fisher: Optional[np.ndarray] = None
    std_err: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        def arr(x):
            return None if x is None else np.asarray(x, dtype=float).tolist()

        return {
            "method": self.method,
            "params": list(self.params),
            "theta_hat": arr(self.theta_hat),
            "std_err": arr(self.std_err),
            "fisher": arr(self.fisher),
            "loglik_at_max": float(self.loglik_at_max),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self, **extra) -> str:
        out = self.as_dict()
        out.update(extra)
        return json.dumps(out, indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# --------------------------------------------------------------------------------------
# Known variance: closed form
# --------------------------------------------------------------------------------------
def _weighted_sums(stats: SufficientStats, sigma2: float):
    a = 1.0 + sigma2 * stats.v
    return float(np.sum(stats.u / a)), float(np.sum(stats.v / a))


def mle_mu_known_var(stats: SufficientStats, sigma2: float) -> float:
    """``mu_hat = sum(U/(1+s2 V)) / sum(V/(1+s2 V))``."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    su, sv = _weighted_sums(stats, sigma2)
    if not sv > 0:
        raise NoInformationError("all V statistics vanish; the mean effect is not identifiable")
    return su / sv


def fit_mu_known_var(stats: SufficientStats, sigma2: float) -> EstimationResult:
    """Closed-form estimate with the observed-information standard error ``1/sqrt(sum V/(1+s2 V))``."""
    mu = mle_mu_known_var(stats, sigma2)
    _, sv = _weighted_sums(stats, sigma2)
    info = sv / stats.N
    return EstimationResult(
        theta_hat=np.array([mu]),
        params=("mu",),
        loglik_at_max=panel_loglik(stats, GaussianEffect(mu, sigma2)),
        method=CLOSED_FORM,
        iterations=0,
        converged=True,
        fisher=np.array([[info]]),
        std_err=np.array([1.0 / math.sqrt(stats.N * info)]),
        diagnostics={"sigma2_known": sigma2},
    )


# --------------------------------------------------------------------------------------
# Joint (mu, sigma2)
# --------------------------------------------------------------------------------------
def sigma2_score(stats: SufficientStats, mu: float, sigma2: float) -> float:
    """``sum (U - mu V)^2 / a^2 - sum V / a`` with ``a = 1 + s2 V`` (twice the sigma2-score)."""
    a = 1.0 + sigma2 * stats.v
    r = stats.u - mu * stats.v
    return float(np.sum(r * r / (a * a)) - np.sum(stats.v / a))


def joint_residuals(stats: SufficientStats, mu: float, sigma2: float) -> tuple[float, float]:
    """Relative residuals of the two likelihood equations at ``(mu, sigma2)``.

    Each is ``|lhs - rhs| / max(1, |rhs|)`` for the mean equation and the
    variance equation respectively.
    """
    su, sv = _weighted_sums(stats, sigma2)
    rhs_mu = su / sv
    a = 1.0 + sigma2 * stats.v
    r = mu * stats.v - stats.u
    lhs_var = float(np.sum(r * r / (a * a)))
    return abs(mu - rhs_mu) / max(1.0, abs(rhs_mu)), abs(lhs_var - sv) / max(1.0, sv)


def moment_start(stats: SufficientStats, eps: float = 1e-12) -> tuple[float, float]:
    """Method-of-moments start: ``sum U / sum V`` and ``var(U/V) - mean(1/V)`` floored at 0."""
    mu0 = mle_mu_known_var(stats, 0.0)
    keep = stats.v > eps
    if keep.sum() < 2:
        return mu0, 0.0
    ratio = stats.u[keep] / stats.v[keep]
    s20 = float(np.var(ratio, ddof=1) - np.mean(1.0 / stats.v[keep]))
    return mu0, max(s20, 0.0)


def _sigma2_update(stats, mu, sigma2_max, n_scan=200):
    """Maximize the log-likelihood over sigma2 in [0, sigma2_max] for fixed mu.

    Every sign change of the sigma2-score on a scan is refined by Brent's
    bracketing method; endpoints are candidates too. Returns (sigma2, on_boundary).
    """
    grid = np.concatenate([[0.0], np.geomspace(sigma2_max * 1e-8, sigma2_max, n_scan)])
    f = np.array([sigma2_score(stats, mu, s) for s in grid])
    candidates = []
    if f[0] <= 0:
        candidates.append((0.0, True))
    if f[-1] >= 0:
        candidates.append((sigma2_max, True))
    for lo, hi, flo, fhi in zip(grid[:-1], grid[1:], f[:-1], f[1:]):
        if flo > 0 and fhi < 0:
            root = brentq(lambda s: sigma2_score(stats, mu, s), lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
            candidates.append((root, False))
    if not candidates:
        # score positive at 0 and negative at the top but no scan sign change: cannot happen
        raise NumericalError("sigma2 update found no candidate")
    best = None
    for s2, boundary in sorted(candidates):
        ll = panel_loglik(stats, GaussianEffect(mu, s2))
        if best is None or ll > best[0] + TIE_TOLERANCE:
            best = (ll, s2, boundary)
    return best[1], best[2]


def mle_joint(
    stats: SufficientStats,
    init: Optional[tuple[float, float]] = None,
    sigma2_max: float = 100.0,
    tol: float = 1e-8,
    max_iter: int = 500,
    cv_threshold: float = 1e-6,
) -> EstimationResult:
    """Solve the joint likelihood equations for ``(mu, sigma2)``.

    Alternates the closed-form mean update with a bracketed root search for
    the variance equation. Falls back to a bounded Nelder-Mead maximization
    of the panel log-likelihood if the alternation does not converge.
    """
    if stats.N < 2:
        raise ValueError("joint estimation needs at least two subjects")
    if not np.any(stats.v > 0):
        raise NoInformationError("all V statistics vanish; the mean effect is not identifiable")
    mu, s2 = moment_start(stats) if init is None else (float(init[0]), float(init[1]))
    s2 = min(max(s2, 0.0), sigma2_max)
    boundary = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu_prev, s2_prev = mu, s2
        mu = mle_mu_known_var(stats, s2)
        s2, boundary = _sigma2_update(stats, mu, sigma2_max)
        mu = mle_mu_known_var(stats, s2)
        r_mu, r_var = joint_residuals(stats, mu, s2)
        small_step = abs(mu - mu_prev) <= tol * (1 + abs(mu)) and abs(s2 - s2_prev) <= tol * (1 + s2)
        if boundary:
            if small_step:
                converged = True
                break
        elif r_var <= tol and r_mu <= tol:
            converged = True
            break

    diagnostics = {"fallback": False}
    if not converged:
        family = gaussian_family(sigma2_max)
        direct = mle_direct(stats, family, init=(mu, s2), max_iter=20000)
        mu, s2 = (float(x) for x in direct.theta_hat)
        boundary = s2 <= 0.0 or s2 >= sigma2_max
        converged = direct.converged
        it += direct.iterations
        diagnostics["fallback"] = True

    r_mu, r_var = joint_residuals(stats, mu, s2)
    mean_v = float(np.mean(stats.v))
    cv = float(np.std(stats.v) / mean_v) if mean_v > 0 else 0.0
    diagnostics.update(
        {
            "residual_mean_equation": r_mu,
            "residual_variance_equation": r_var,
            "boundary": bool(boundary),
            "boundary_side": None if not boundary else ("lower" if s2 <= 0.0 else "upper"),
            "sigma2_identifiable": cv >= cv_threshold,
            "v_coefficient_of_variation": cv,
            "gradient": numeric_gradient(stats, gaussian_family(sigma2_max), (mu, s2)).tolist()
            if s2 > 1e-4
            else None,
        }
    )
    theta = np.array([mu, s2])
    fisher = observed_information(stats, mu, s2)
    std_err = None
    try:
        cov = np.linalg.inv(stats.N * fisher)
        if np.all(np.diag(cov) > 0):
            std_err = np.sqrt(np.diag(cov))
    except np.linalg.LinAlgError:
        pass
    return EstimationResult(
        theta_hat=theta,
        params=("mu", "sigma2"),
        loglik_at_max=panel_loglik(stats, GaussianEffect(mu, s2)),
        method=JOINT_SYSTEM if not diagnostics["fallback"] else DIRECT_MAX,
        iterations=it,
        converged=converged,
        fisher=fisher,
        std_err=std_err,
        diagnostics=diagnostics,
    )


def observed_information(stats: SufficientStats, mu: float, sigma2: float) -> np.ndarray:
    """Per-subject observed information (negative mean Hessian) of the Gaussian-mixing model."""
    u, v = stats.u, stats.v
    a = 1.0 + sigma2 * v
    r = u - mu * v
    i_mm = np.mean(v / a)
    i_ms = np.mean(r * v / (a * a))
    i_ss = np.mean(r * r * v / a**3 - 0.5 * v * v / (a * a))
    return np.array([[i_mm, i_ms], [i_ms, i_ss]])


# --------------------------------------------------------------------------------------
# Direct maximization
# --------------------------------------------------------------------------------------
def mle_direct(
    stats: SufficientStats,
    family: EffectFamily,
    init,
    bounds=None,
    xatol: float = 1e-10,
    fatol: float = 1e-12,
    max_iter: int = 5000,
) -> EstimationResult:
    """Derivative-free (Nelder-Mead) maximization of the panel log-likelihood in a box."""
    bounds = family.bounds if bounds is None else bounds
    x0 = np.clip(np.atleast_1d(np.asarray(init, dtype=float)), [b[0] for b in bounds], [b[1] for b in bounds])

    def negll(theta):
        try:
            return -panel_loglik(stats, family(theta))
        except (ValueError, NumericalError):
            return np.inf

    ll_init = -negll(x0)
    res = minimize(
        negll,
        x0,
        method="Nelder-Mead",
        bounds=bounds,
        options={"xatol": xatol, "fatol": fatol, "maxiter": max_iter, "maxfev": 4 * max_iter},
    )
    # tie-break among final simplex vertices: prefer the smaller last parameter
    simplex, fvals = res.final_simplex
    best = float(np.min(fvals))
    tied = [x for x, f in zip(simplex, fvals) if f <= best + TIE_TOLERANCE]
    theta = min(tied, key=lambda x: x[-1]) if "sigma2" in family.params else simplex[int(np.argmin(fvals))]
    theta = np.asarray(theta, dtype=float)
    return EstimationResult(
        theta_hat=theta,
        params=family.params,
        loglik_at_max=-negll(theta),
        method=DIRECT_MAX,
        iterations=int(res.nit),
        converged=bool(res.success),
        diagnostics={"loglik_at_init": ll_init, "message": str(res.message), "nfev": int(res.nfev)},
    )


def numeric_gradient(stats: SufficientStats, family: EffectFamily, theta, step: float = 1e-5) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    grad = np.empty_like(theta)
    for j in range(theta.size):
        h = step * max(1.0, abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        grad[j] = (panel_loglik(stats, family(up)) - panel_loglik(stats, family(dn))) / (2 * h)
    return grad


# --------------------------------------------------------------------------------------
# Fisher information
# --------------------------------------------------------------------------------------
def subject_scores(stats: SufficientStats, family: EffectFamily, theta, rel_step: float = 1e-5) -> np.ndarray:
    """Central finite-difference scores ``d log lambda / d theta_j``, shape (N, k)."""
    theta = np.asarray(theta, dtype=float)
    out = np.empty((stats.N, theta.size))
    for j in range(theta.size):
        h = rel_step * max(abs(theta[j]), 1.0)
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        out[:, j] = (log_lambda(stats.u, stats.v, family(up)) - log_lambda(stats.u, stats.v, family(dn))) / (2 * h)
    return out


@dataclass
class FisherEstimate:
    matrix: np.ndarray
    n_subjects: int
    min_eigenvalue: float
    psd: bool

    def std_err(self, N: int) -> np.ndarray:
        return np.sqrt(np.diag(np.linalg.inv(N * self.matrix)))


def fisher_information(
    family: EffectFamily,
    theta,
    sampler: Callable[[int], SufficientStats],
    M: int,
    rel_step: float = 1e-5,
    psd_tol: float = 1e-10,
) -> FisherEstimate:
    """Monte Carlo ``E[score score^T]`` over ``M`` fresh subjects drawn by ``sampler``."""
    stats = sampler(M)
    s = subject_scores(stats, family, theta, rel_step)
    mat = s.T @ s / stats.N
    mat = 0.5 * (mat + mat.T)
    lam = float(np.min(np.linalg.eigvalsh(mat)))
    return FisherEstimate(mat, stats.N, lam, lam >= -psd_tol * max(1.0, float(np.max(np.abs(mat)))))
