"""Monte Carlo studies of the estimators and of their large-sample limits.

A study simulates ``R`` independent panels of ``N`` subjects, estimates the
mean effect on each, and compares the replicate distribution with Monte Carlo
estimates of

    gamma0 = E[U/(1+s2 V)] / E[V/(1+s2 V)]     (almost-sure limit of mu_hat)
    beta0  = E[V/(1+s2 V)]
    var    = Var[U/(1+s2 V)]                    (CLT variance is var / beta0^2)

computed from a separate large run. Replicate rows are appended to
``replicates.csv`` as they finish, so an interrupted study can be resumed.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats as sps
from scipy.special import kolmogorov

from . import io as panel_io
from . import rng as _rng
from .errors import DataError, MixfbmError, StudyFailure
from .estimate import (
    fisher_information,
    fit_mu_known_var,
    mle_direct,
    mle_joint,
)
from .kernel import DEFAULT_METHOD, DEFAULT_TOLERANCE, KernelTable, solve_kernel
from .likelihood import (
    SufficientStats,
    compute_stats,
    gaussian_family,
    gaussian_known_variance_family,
)
from .sim import (
    DegenerateEffect,
    EffectDistribution,
    GaussianEffect,
    LinearMultiplier,
    TimeGrid,
    format_float,
    simulate_panel,
)

ESTIMATORS = ("known_var", "joint", "direct")
MAX_FAILURE_RATE = 0.05
CHUNK = 2000
Z975 = 1.959963984540054

REPLICATE_COLUMNS = [
    "replicate",
    "mu_hat",
    "sigma2_hat",
    "converged",
    "se_mu",
    "loglik",
    "iterations",
    "boundary",
    "error",
]


@dataclass
class StudyConfig:
    H: float
    T: float
    n_steps: int
    drift: LinearMultiplier
    effect: EffectDistribution
    N: int
    R: int
    seed: int
    estimator: str = "known_var"
    sigma2_known: Optional[float] = None
    x0: float = 0.0
    limit_subjects: int = 20000
    fisher_subjects: int = 0
    kernel_method: str = DEFAULT_METHOD
    kernel_tolerance: float = DEFAULT_TOLERANCE
    sigma2_max: float = 100.0
    output_dir: Optional[Path] = None

    def __post_init__(self):
        if self.R < 2:
            raise ValueError("a study needs at least two replicates")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if not 0.5 <= self.H < 1.0:
            raise ValueError(f"H must lie in [1/2, 1), got {self.H}")
        if self.estimator == "joint" and self.N < 2:
            raise ValueError("joint estimation needs N >= 2")
        self.grid  # validates T and n_steps

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.n_steps)

    @property
    def true_mu(self) -> float:
        if isinstance(self.effect, GaussianEffect):
            return float(self.effect.mean)
        if isinstance(self.effect, DegenerateEffect):
            return float(self.effect.value)
        return float(np.dot(self.effect.nodes, self.effect.weights))

    @property
    def weight_sigma2(self) -> float:
        """Variance used in the ``1 + s2 V`` weights of the limit quantities."""
        if self.sigma2_known is not None:
            return float(self.sigma2_known)
        if isinstance(self.effect, GaussianEffect):
            return float(self.effect.variance)
        if isinstance(self.effect, DegenerateEffect):
            return 0.0
        nodes = np.asarray(self.effect.nodes)
        w = np.asarray(self.effect.weights)
        return float(np.dot(w, (nodes - nodes @ w) ** 2))

    def describe(self) -> dict:
        d = asdict(self)
        d["drift"] = self.drift.describe()
        d["effect"] = describe_effect(self.effect)
        d["output_dir"] = None if self.output_dir is None else str(self.output_dir)
        return d


def describe_effect(dist: EffectDistribution) -> dict:
    if isinstance(dist, GaussianEffect):
        return {"family": "gaussian", "mean": dist.mean, "variance": dist.variance}
    if isinstance(dist, DegenerateEffect):
        return {"family": "degenerate", "value": dist.value}
    return {"family": "tabulated", "nodes": list(dist.nodes), "weights": list(dist.weights)}


# --------------------------------------------------------------------------------------
# Workers (module-level so process pools can pickle them)
# --------------------------------------------------------------------------------------
_STATE: dict = {}


def _init_worker(cfg: StudyConfig, table: KernelTable):
    _STATE["cfg"] = cfg
    _STATE["table"] = table


def panel_stats(cfg: StudyConfig, table: KernelTable, N: int, replicate: int, purpose: int, subjects=None) -> SufficientStats:
    panel = simulate_panel(
        cfg.grid, cfg.H, cfg.drift, cfg.effect, N, cfg.x0, cfg.seed, replicate, purpose, subjects=subjects
    )
    return compute_stats(panel, table, cfg.drift)


def run_replicate(cfg: StudyConfig, table: KernelTable, r: int) -> dict:
    row = {c: "" for c in REPLICATE_COLUMNS}
    row["replicate"] = r
    try:
        st = panel_stats(cfg, table, cfg.N, r, _rng.PANEL)
        if cfg.estimator == "known_var":
            s2 = cfg.weight_sigma2
            res = fit_mu_known_var(st, s2)
            row.update(mu_hat=res.theta_hat[0], sigma2_hat=s2, se_mu=res.std_err[0], boundary=False)
        elif cfg.estimator == "joint":
            res = mle_joint(st, sigma2_max=cfg.sigma2_max)
            se = res.std_err[0] if res.std_err is not None else float("nan")
            row.update(
                mu_hat=res.theta_hat[0], sigma2_hat=res.theta_hat[1], se_mu=se, boundary=res.diagnostics["boundary"]
            )
        else:
            fam = gaussian_family(cfg.sigma2_max)
            start = (float(np.sum(st.u) / np.sum(st.v)), cfg.weight_sigma2)
            res = mle_direct(st, fam, start)
            row.update(mu_hat=res.theta_hat[0], sigma2_hat=res.theta_hat[1], se_mu=float("nan"), boundary=False)
        row.update(converged=res.converged, loglik=res.loglik_at_max, iterations=res.iterations)
    except (MixfbmError, ValueError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _replicate_task(r):
    return run_replicate(_STATE["cfg"], _STATE["table"], r)


def _limit_task(args):
    start, stop = args
    cfg, table = _STATE["cfg"], _STATE["table"]
    return panel_stats(cfg, table, stop, 0, _rng.LIMITS, subjects=range(start, stop))


def _fisher_task(args):
    start, stop = args
    cfg, table = _STATE["cfg"], _STATE["table"]
    return panel_stats(cfg, table, stop, 0, _rng.FISHER, subjects=range(start, stop))


class _Runner:
    """Serial or process-pool map that always returns results in task order."""

    def __init__(self, cfg, table, threads: int = 1):
        self.threads = max(1, int(threads))
        self.pool = None
        if self.threads > 1:
            self.pool = ProcessPoolExecutor(self.threads, initializer=_init_worker, initargs=(cfg, table))
        else:
            _init_worker(cfg, table)

    def map(self, fn, tasks):
        if self.pool is None:
            return map(fn, tasks)
        return self.pool.map(fn, tasks)

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _chunks(M):
    return [(a, min(a + CHUNK, M)) for a in range(0, M, CHUNK)]


def _gather(runner, task, M) -> SufficientStats:
    parts = list(runner.map(task, _chunks(M)))
    return SufficientStats(np.concatenate([p.u for p in parts]), np.concatenate([p.v for p in parts]))


# --------------------------------------------------------------------------------------
# Limits
# --------------------------------------------------------------------------------------
@dataclass
class LimitEstimates:
    M: int
    sigma2: float
    gamma0: float
    beta0: float
    var_hat: float
    delta_var: float
    se_gamma0: float
    se_beta0: float
    se_var_hat: float

    @property
    def clt_variance(self) -> float:
        """``Var[U/(1+s2 V)] / beta0^2``."""
        return self.var_hat / self.beta0**2

    @property
    def delta_variance(self) -> float:
        """Delta-method variance of the ratio estimator, ``Var[A - gamma0 B] / beta0^2``."""
        return self.delta_var / self.beta0**2

    def as_dict(self) -> dict:
        d = asdict(self)
        d["clt_variance"] = self.clt_variance
        d["delta_variance"] = self.delta_variance
        return d


def jackknife_se(loo: np.ndarray) -> float:
    """Delete-one jackknife standard error from the leave-one-out replicates."""
    m = loo.size
    return float(math.sqrt((m - 1) / m * np.sum((loo - loo.mean()) ** 2)))


def limits_from_stats(st: SufficientStats, sigma2: float) -> LimitEstimates:
    a = 1.0 + sigma2 * st.v
    A = st.u / a
    B = st.v / a
    M = A.size
    SA, SB = A.sum(), B.sum()
    gamma0 = SA / SB
    beta0 = SB / M
    Ac = A - A.mean()
    var_hat = float(np.sum(Ac * Ac) / (M - 1))
    D = A - gamma0 * B
    delta_var = float(np.var(D, ddof=1))

    loo_gamma = (SA - A) / (SB - B)
    loo_beta = (SB - B) / (M - 1)
    S1, S2 = Ac.sum(), np.sum(Ac * Ac)
    loo_mean = (S1 - Ac) / (M - 1)
    loo_var = (S2 - Ac * Ac - (M - 1) * loo_mean**2) / (M - 2)
    return LimitEstimates(
        M=M,
        sigma2=sigma2,
        gamma0=float(gamma0),
        beta0=float(beta0),
        var_hat=var_hat,
        delta_var=delta_var,
        se_gamma0=jackknife_se(loo_gamma),
        se_beta0=jackknife_se(loo_beta),
        se_var_hat=jackknife_se(loo_var),
    )


def estimate_limits(cfg: StudyConfig, M: int, table: Optional[KernelTable] = None, threads: int = 1) -> LimitEstimates:
    """Sample versions of the limit quantities from ``M`` independent subjects."""
    if M < 3:
        raise ValueError("need at least three subjects for jackknife errors")
    table = table if table is not None else solve_kernel(cfg.grid, cfg.H, cfg.kernel_tolerance, method=cfg.kernel_method)
    with _Runner(cfg, table, threads) as runner:
        st = _gather(runner, _limit_task, M)
    return limits_from_stats(st, cfg.weight_sigma2)


# --------------------------------------------------------------------------------------
# Normality
# --------------------------------------------------------------------------------------
@dataclass
class NormalityResult:
    statistic: float
    p_value: float
    n: int


def normality_test(samples, studentize: bool = True) -> NormalityResult:
    """One-sample Kolmogorov-Smirnov test against N(0, 1).

    With ``studentize`` the samples are first centred and scaled by their
    sample mean and standard deviation. The p-value is the limiting
    Kolmogorov distribution evaluated at ``sqrt(n) D``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < 100:
        raise ValueError(f"normality test needs at least 100 samples, got {n}")
    if studentize:
        sd = float(np.std(x, ddof=1))
        if not sd > 0:
            raise ValueError("samples are degenerate (zero variance)")
        x = (x - x.mean()) / sd
    x = np.sort(x)
    cdf = sps.norm.cdf(x)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    return NormalityResult(d, float(kolmogorov(math.sqrt(n) * d)), n)


# --------------------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------------------
def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format_float(x)
    return str(x)


def _parse_row(rec: dict) -> dict:
    out = dict(rec)
    out["replicate"] = int(rec["replicate"])
    for k in ("mu_hat", "sigma2_hat", "se_mu", "loglik"):
        out[k] = float(rec[k]) if rec[k] != "" else ""
    out["iterations"] = int(rec["iterations"]) if rec["iterations"] != "" else ""
    for k in ("converged", "boundary"):
        out[k] = (rec[k] == "1") if rec[k] != "" else ""
    return out


def read_replicates(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPLICATE_COLUMNS:
            raise DataError(f"{path}: unexpected replicate columns {reader.fieldnames}")
        return [_parse_row(r) for r in reader]


def _moments(x):
    m = x.mean()
    c = x - m
    s2 = np.mean(c * c)
    if s2 == 0:
        return 0.0, 0.0
    return float(np.mean(c**3) / s2**1.5), float(np.mean(c**4) / s2**2 - 3.0)


def summarize(rows: list[dict], N: int, true_mu: float, limits: Optional[LimitEstimates], fisher_info: Optional[float]) -> dict:
    """Summary statistics of the replicate table; a pure function of its inputs."""
    rows = sorted(rows, key=lambda r: r["replicate"])
    ok = [r for r in rows if r["error"] == ""]
    R = len(rows)
    out = {
        "replicates": R,
        "failed": R - len(ok),
        "failure_rate": (R - len(ok)) / R if R else 0.0,
    }
    if len(ok) < 2:
        return out
    mu = np.array([r["mu_hat"] for r in ok])
    mean = float(mu.mean())
    var = float(mu.var(ddof=1))
    skew, kurt = _moments(mu)
    se_mean = math.sqrt(var / mu.size)
    out.update(
        mean_mu_hat=mean,
        var_mu_hat=var,
        sd_mu_hat=math.sqrt(var),
        se_mean_mu_hat=se_mean,
        skewness=skew,
        excess_kurtosis=kurt,
        bias_vs_true=mean - true_mu,
        converged_fraction=float(np.mean([bool(r["converged"]) for r in ok])),
    )
    s2 = np.array([r["sigma2_hat"] for r in ok], dtype=float)
    out.update(mean_sigma2_hat=float(s2.mean()), var_sigma2_hat=float(s2.var(ddof=1)))
    standardized = math.sqrt(N) * (mu - mean)
    var_std = float(standardized.var(ddof=1))
    out["var_standardized"] = var_std
    if mu.size >= 100 and var_std > 0:
        nt = normality_test(standardized)
        out.update(ks_statistic=nt.statistic, ks_p_value=nt.p_value)
    if limits is not None:
        combined = math.sqrt(se_mean**2 + limits.se_gamma0**2)
        out.update(
            bias_vs_gamma0=mean - limits.gamma0,
            gap_gamma0=abs(mean - limits.gamma0),
            combined_se=combined,
            clt_variance=limits.clt_variance,
            clt_variance_ratio=var_std / limits.clt_variance,
            delta_variance=limits.delta_variance,
            delta_variance_ratio=var_std / limits.delta_variance,
        )
        se_obs = np.array([r["se_mu"] for r in ok], dtype=float)
        if np.all(np.isfinite(se_obs)):
            out["coverage_observed_info"] = float(np.mean(np.abs(mu - limits.gamma0) <= Z975 * se_obs))
        if fisher_info is not None:
            half = Z975 / math.sqrt(N * fisher_info)
            out["fisher_half_width"] = half
            out["coverage_fisher"] = float(np.mean(np.abs(mu - limits.gamma0) <= half))
    return out


@dataclass
class McReport:
    config: dict
    rows: list
    summary: dict
    limits: Optional[LimitEstimates] = None
    fisher: Optional[list] = None
    runtime: dict = field(default_factory=dict)

    @property
    def mu_hat(self) -> np.ndarray:
        return np.array([r["mu_hat"] for r in self.rows if r["error"] == ""], dtype=float)

    def summary_document(self) -> dict:
        return {
            "config": self.config,
            "limits": None if self.limits is None else self.limits.as_dict(),
            "fisher": self.fisher,
            "summary": self.summary,
            "versions": versions(),
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(_clean(self.summary_document()), indent=2, sort_keys=True) + "\n")
        (out / "runtime.json").write_text(json.dumps(self.runtime, indent=2, sort_keys=True) + "\n")
        mu = self.mu_hat
        if mu.size >= 2 and "mean_mu_hat" in self.summary:
            N = int(self.config["N"])
            z = math.sqrt(N) * (mu - self.summary["mean_mu_hat"])
            z = np.sort(z / z.std(ddof=1))
            probs = (np.arange(1, z.size + 1) - 0.5) / z.size
            with open(out / "qq.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["normal_quantile", "standardized_estimate"])
                for qn, zz in zip(sps.norm.ppf(probs), z):
                    w.writerow([format_float(qn), format_float(zz)])
            counts, edges = np.histogram(z, bins=min(30, max(5, z.size // 10)))
            with open(out / "histogram.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["left", "right", "count"])
                for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                    w.writerow([format_float(lo), format_float(hi), int(c)])

    @classmethod
    def load(cls, out_dir) -> "McReport":
        """Read a written report and check the summary against the replicate table."""
        out = Path(out_dir)
        doc = json.loads((out / "summary.json").read_text())
        rows = read_replicates(out / "replicates.csv")
        limits = None if doc["limits"] is None else LimitEstimates(
            **{k: v for k, v in doc["limits"].items() if k not in ("clt_variance", "delta_variance")}
        )
        fisher = doc.get("fisher")
        fisher_mu = None if not fisher else fisher[0][0]
        again = _clean(summarize(rows, int(doc["config"]["N"]), _true_mu_from(doc["config"]), limits, fisher_mu))
        if again != doc["summary"]:
            raise DataError(f"{out}: summary.json does not match replicates.csv")
        return cls(doc["config"], rows, doc["summary"], limits, fisher)


def _true_mu_from(config: dict) -> float:
    eff = config["effect"]
    if eff["family"] == "gaussian":
        return float(eff["mean"])
    if eff["family"] == "degenerate":
        return float(eff["value"])
    return float(np.dot(eff["nodes"], eff["weights"]))


def _clean(obj):
    # round-trip through JSON so that comparisons see what is on disk
    return json.loads(json.dumps(obj, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def versions() -> dict:
    v = panel_io.versions()
    v["report_format"] = 1
    return v


# --------------------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------------------
def _fisher_family(cfg):
    if cfg.estimator == "known_var":
        return gaussian_known_variance_family(cfg.weight_sigma2), (cfg.true_mu,)
    return gaussian_family(cfg.sigma2_max), (cfg.true_mu, cfg.weight_sigma2)


def run_study(
    cfg: StudyConfig,
    out_dir=None,
    resume: bool = False,
    threads: int = 1,
    table: Optional[KernelTable] = None,
    stop_after: Optional[int] = None,
) -> Optional[McReport]:
    """Run the replicates, the limit run and (optionally) the Fisher run.

    Rows are appended to ``out_dir/replicates.csv`` one replicate at a time.
    ``resume`` keeps the rows already on disk; ``stop_after`` ends the run
    after that many replicates are on disk and returns None (an interrupted
    run). Raises StudyFailure, carrying the report, when more than 5% of the
    replicates fail.
    """
    t0 = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else (Path(cfg.output_dir) if cfg.output_dir else None)
    if table is None:
        table = solve_kernel(cfg.grid, cfg.H, cfg.kernel_tolerance, method=cfg.kernel_method)
    rows: list[dict] = []
    csv_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "replicates.csv"
        cfg_path = out_dir / "study_config.json"
        described = _clean(cfg.describe())
        described.pop("output_dir", None)
        if resume and csv_path.exists():
            if cfg_path.exists() and json.loads(cfg_path.read_text()) != described:
                raise DataError("cannot resume: study configuration differs from the one on disk")
            rows = read_replicates(csv_path)
            if [r["replicate"] for r in rows] != list(range(len(rows))):
                raise DataError(f"{csv_path}: replicate rows are not contiguous from 0")
        else:
            with open(csv_path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(REPLICATE_COLUMNS)
        cfg_path.write_text(json.dumps(described, indent=2, sort_keys=True) + "\n")

    todo = list(range(len(rows), cfg.R))
    if stop_after is not None:
        todo = [r for r in todo if r < stop_after]
    with _Runner(cfg, table, threads) as runner:
        fh = open(csv_path, "a", newline="") if csv_path is not None else None
        try:
            writer = csv.writer(fh, lineterminator="\n") if fh is not None else None
            for row in runner.map(_replicate_task, todo):
                rows.append(row)
                if writer is not None:
                    writer.writerow([_fmt(row[c]) for c in REPLICATE_COLUMNS])
                    fh.flush()
        finally:
            if fh is not None:
                fh.close()
        if stop_after is not None and len(rows) < cfg.R:
            return None
        if csv_path is not None:
            # rows as they will be reloaded, so in-memory and on-disk summaries agree
            rows = read_replicates(csv_path)
        else:
            rows = [_parse_row({c: _fmt(r[c]) for c in REPLICATE_COLUMNS}) for r in rows]
        t1 = time.perf_counter()

        limits = None
        if cfg.limit_subjects >= 3 and cfg.weight_sigma2 >= 0:
            st = _gather(runner, _limit_task, cfg.limit_subjects)
            if np.sum(st.v) > 0:
                limits = limits_from_stats(st, cfg.weight_sigma2)
        fisher = None
        if cfg.fisher_subjects > 0:
            family, theta = _fisher_family(cfg)
            fe = fisher_information(family, theta, lambda M: _gather(runner, _fisher_task, M), cfg.fisher_subjects)
            fisher = fe.matrix.tolist()
    t2 = time.perf_counter()

    fisher_mu = None if fisher is None else fisher[0][0]
    summary = summarize(rows, cfg.N, cfg.true_mu, limits, fisher_mu)
    report = McReport(
        _clean(cfg.describe()),
        rows,
        _clean(summary),
        limits,
        fisher,
        runtime={
            "replicates_seconds": t1 - t0,
            "limits_seconds": t2 - t1,
            "total_seconds": t2 - t0,
            "threads": threads,
            "pid": os.getpid(),
        },
    )
    report.config.pop("output_dir", None)
    if out_dir is not None:
        report.write(out_dir)
    if summary["failure_rate"] > MAX_FAILURE_RATE:
        raise StudyFailure(
            f"{summary['failed']} of {summary['replicates']} replicates failed "
            f"(more than {MAX_FAILURE_RATE:.0%})",
            report,
        )
    return report
