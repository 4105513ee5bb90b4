"""Command-line entry point: ``mixfbm {simulate, estimate, study, kernel-cache}``.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numerical failure, 5 study failed (too many replicates failed).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import config as _config
from .errors import ConfigError, DataError, MixfbmError, NumericalError, StudyFailure
from .estimate import fit_mu_known_var, mle_direct, mle_joint, moment_start
from .io import read_panel, versions, write_panel
from .kernel import cache_filename, solve_kernel
from .likelihood import compute_stats, gaussian_family
from .mcstudy import run_study
from .sim import format_float, simulate_panel

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_STUDY = 5

KERNEL_CACHE_DIR = "kernel_cache"


def _version_text() -> str:
    v = versions()
    return (
        f"mixfbm {__version__} (solver {v['solver']}, kernel cache format {v['kernel_cache_format']}, "
        f"panel format {v['panel_format']})"
    )


def _load(args) -> _config.RunConfig:
    cfg = _config.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.output_dir = Path(args.out)
    if cfg.output_dir is None:
        raise ConfigError("missing required key output.dir (or pass --out)")
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {cfg.output_dir}: {exc}") from None
    return cfg


def _kernel(cfg: _config.RunConfig):
    return solve_kernel(
        cfg.grid, cfg.H, cfg.tolerance, cache_dir=cfg.output_dir / KERNEL_CACHE_DIR, method=cfg.kernel_method
    )


def _model_summary(cfg: _config.RunConfig) -> dict:
    return {
        "H": cfg.H,
        "T": cfg.grid.T,
        "n_steps": cfg.grid.n_steps,
        "drift": cfg.drift.describe(),
        "kernel_method": cfg.kernel_method,
    }


# --------------------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------------------
def cmd_simulate(args) -> int:
    cfg = _load(args)
    if cfg.N is None:
        raise ConfigError("missing required key data.N")
    panel = simulate_panel(cfg.grid, cfg.H, cfg.drift, cfg.effect, cfg.N, cfg.x0, cfg.seed)
    path = cfg.output_dir / "panel.csv"
    meta = {
        "seed": cfg.seed,
        "drift": cfg.drift.describe(),
        "effect_dist": cfg.raw["model"]["effect"],
        "x0": cfg.x0,
    }
    try:
        write_panel(panel, path, meta)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None
    print(
        f"simulated N={panel.N} subjects on T={format_float(cfg.grid.T)}, n_steps={cfg.grid.n_steps}, "
        f"H={cfg.H:g}, seed={cfg.seed} -> {path}"
    )
    return EXIT_OK


def _estimate(cfg: _config.RunConfig, stats):
    if cfg.estimator == "known_var":
        return fit_mu_known_var(stats, cfg.known_sigma2)
    if cfg.estimator == "joint":
        return mle_joint(stats, init=cfg.init, sigma2_max=cfg.sigma2_max)
    start = cfg.init if cfg.init is not None else moment_start(stats)
    return mle_direct(stats, gaussian_family(cfg.sigma2_max), start)


def cmd_estimate(args) -> int:
    cfg = _load(args)
    data = Path(args.data) if args.data is not None else cfg.data_path
    if data is None:
        raise ConfigError("missing required key data.path (or pass --data)")
    values = read_panel(data, cfg.grid)
    table = _kernel(cfg)
    stats = compute_stats(values, table, cfg.drift)
    result = _estimate(cfg, stats)
    out = cfg.output_dir
    try:
        stats.write_csv(out / "stats.csv")
        (out / "result.json").write_text(
            result.to_json(model=_model_summary(cfg), N=stats.N, data=data.name, versions=versions()) + "\n"
        )
    except OSError as exc:
        raise DataError(f"cannot write results to {out}: {exc}") from None
    summary = ", ".join(f"{p}={format_float(v)}" for p, v in zip(result.params, result.theta_hat))
    print(f"{result.method}: {summary} (N={stats.N}, converged={result.converged}) -> {out / 'result.json'}")
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _load(args)
    scfg = cfg.study_config()
    table = _kernel(cfg)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    try:
        report = run_study(scfg, cfg.output_dir, resume=args.resume, threads=threads, table=table)
    except StudyFailure as exc:
        print(f"study failed: {exc}", file=sys.stderr)
        return EXIT_STUDY
    s = report.summary
    line = f"study: R={s['replicates']}, failed={s['failed']}"
    if "mean_mu_hat" in s:
        line += f", mean mu_hat={format_float(s['mean_mu_hat'])}"
    if report.limits is not None:
        line += f", gamma0_hat={format_float(report.limits.gamma0)}"
    print(line + f" -> {cfg.output_dir / 'summary.json'}")
    return EXIT_OK


def cmd_kernel_cache(args) -> int:
    cfg = _load(args)
    table = _kernel(cfg)
    path = cfg.output_dir / KERNEL_CACHE_DIR / cache_filename(cfg.grid, cfg.H, cfg.kernel_method)
    print(
        f"kernel table H={cfg.H:g}, n_steps={cfg.grid.n_steps}, method={table.method}, "
        f"residual={table.residual_norm:.3e}, w[n]={format_float(table.w[-1])} -> {path}"
    )
    return EXIT_OK


# --------------------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixfbm", description="Mixed fBm random-effects drift estimation.")
    parser.add_argument("--version", action="version", version=_version_text())
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        if seed:
            p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        return p

    common(sub.add_parser("simulate", help="simulate a panel and write it as CSV")).set_defaults(func=cmd_simulate)
    p = common(sub.add_parser("estimate", help="estimate the effect distribution from a panel CSV"), seed=False)
    p.add_argument("--data", help="panel CSV (overrides data.path)")
    p.set_defaults(func=cmd_estimate)
    p = common(sub.add_parser("study", help="run a Monte Carlo study"))
    p.add_argument("--threads", type=int, help="worker processes (default: available cores)")
    p.add_argument("--resume", action="store_true", help="continue from an existing replicates.csv")
    p.set_defaults(func=cmd_study)
    common(sub.add_parser("kernel-cache", help="solve and cache the kernel table"), seed=False).set_defaults(
        func=cmd_kernel_cache
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MixfbmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
