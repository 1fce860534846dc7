"""Command-line front end: ``hybridgc analyze | simulate | calibrate``.

Exit codes: 0 success, 2 invalid data or configuration, 3 fit, calibration
or failure-threshold errors.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import as_effect, load_csv
from .errors import (
    CalibrationError,
    ConfigError,
    DataValidationError,
    DomainError,
    FitError,
    MissingCalibrationError,
)
from .estimators import ALL_METHODS, MethodKind, estimate
from .inference import DEFAULT_BOOT_REPS, analytic_inference, bootstrap, replicate_rng
from .simulation import (
    CalibrationResult,
    calibrate_gamma_B,
    calibrate_gamma_D,
    default_threads,
    gamma_target,
    make_scenario,
    run_mc,
    verify_gamma_B,
)

log = logging.getLogger("hybridgc")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FIT = 3

ANALYZE_COLUMNS = (
    "method", "effect", "se_method",
    "mu0", "mu1", "delta",
    "se_mu0", "se_mu1", "se_delta",
    "ci_mu0_lo", "ci_mu0_hi", "ci_mu1_lo", "ci_mu1_hi", "ci_delta_lo", "ci_delta_hi",
)


@dataclass
class AnalyzeConfig:
    data: Path
    outcome_kind: str
    effect: str = "difference"
    methods: tuple[MethodKind, ...] = ALL_METHODS
    se: str = "analytic"
    boot_reps: int = DEFAULT_BOOT_REPS
    alpha: float = 0.05
    seed: int = 0
    output: Path | None = None
    threads: int = 1


@dataclass
class SimulateConfig:
    scenario: str
    m: int
    n1: int
    n0: int
    reps: int
    seed: int
    methods: tuple[MethodKind, ...] = ALL_METHODS
    effect: str = "difference"
    output: Path | None = None
    calibration: Path | None = None
    threads: int | None = None
    alpha: float = 0.05


def _f4(v: float) -> str:
    if not math.isfinite(v):
        return "NA"
    out = f"{v:.4f}"
    return "0.0000" if out == "-0.0000" else out


def _parse_methods(text: str | None) -> tuple[MethodKind, ...]:
    if not text:
        return ALL_METHODS
    return tuple(MethodKind.parse(t) for t in text.split(",") if t.strip())


def default_calibration_path(scenario: str, m: int) -> Path:
    return Path(f"calibration_{scenario}_m{m}.json")


# ------------------------------------------------------------------ #
# Commands
# ------------------------------------------------------------------ #


def cmd_analyze(cfg: AnalyzeConfig) -> int:
    effect = as_effect(cfg.effect)
    if effect.kind == "log_odds_ratio" and cfg.outcome_kind != "binary":
        raise ConfigError("log_odds_ratio requires a binary outcome")
    if cfg.se not in ("analytic", "bootstrap", "both"):
        raise ConfigError(f"unknown se mode {cfg.se!r}")
    d = load_csv(cfg.data, cfg.outcome_kind)
    lines = [",".join(ANALYZE_COLUMNS)]
    human = [f"n = {d.n} (treated {d.n_trt}, internal controls {d.n_ic}, external controls {d.n_ec})"]
    for method in cfg.methods:
        est = estimate(d, method, effect, rng=replicate_rng(cfg.seed, 0))
        reports = []
        if cfg.se in ("analytic", "both"):
            reports.append(analytic_inference(d, est, cfg.alpha))
        if cfg.se in ("bootstrap", "both"):
            rep, _ = bootstrap(d, method, effect, B=cfg.boot_reps, seed=cfg.seed, alpha=cfg.alpha,
                               estimate_on_full=est, threads=cfg.threads)
            reports.append(rep)
        for rep in reports:
            vals = (est.mu0, est.mu1, est.delta, rep.se_mu0, rep.se_mu1, rep.se_delta,
                    *rep.ci_mu0, *rep.ci_mu1, *rep.ci_delta)
            lines.append(",".join([method.value, effect.kind, rep.se_method, *map(_f4, vals)]))
            human.append(
                f"{method.value:<10} {rep.se_method:<9} mu0 {est.mu0:.4f} ({rep.se_mu0:.4f})  "
                f"mu1 {est.mu1:.4f} ({rep.se_mu1:.4f})  delta {est.delta:.4f} ({rep.se_delta:.4f})"
            )
    text = "\n".join(lines) + "\n"
    if cfg.output is None:
        sys.stdout.write(text)
    else:
        Path(cfg.output).write_text(text, encoding="utf-8")
    print("\n".join(human), file=sys.stderr)
    return EXIT_OK


def _scenario_for(cfg: SimulateConfig):
    gamma = None
    if cfg.calibration is not None or cfg.scenario == "D":
        path = cfg.calibration or default_calibration_path(cfg.scenario, cfg.m)
        if not Path(path).exists():
            raise MissingCalibrationError(
                f"scenario {cfg.scenario} needs a calibration file; run "
                f"'hybridgc calibrate --scenario {cfg.scenario} --m {cfg.m} --seed S' first"
            )
        cal = CalibrationResult.load(path)
        if cal.scenario != cfg.scenario or cal.m != cfg.m:
            raise ConfigError(f"calibration file {path} is for scenario {cal.scenario}, m={cal.m}")
        gamma = cal.gamma
    return make_scenario(cfg.scenario, cfg.m, cfg.n1, cfg.n0, gamma=gamma)


def cmd_simulate(cfg: SimulateConfig) -> int:
    if cfg.scenario not in ("A", "B", "C", "D"):
        raise ConfigError(f"unknown scenario {cfg.scenario!r}; expected one of A, B, C, D")
    if not 0 <= cfg.m <= 4:
        raise ConfigError("m must be between 0 and 4")
    spec = _scenario_for(cfg)
    step = max(1, cfg.reps // 10)

    def progress(done, total):
        if done % step == 0 or done == total:
            print(f"replicates {done}/{total}", file=sys.stderr)

    try:
        summary = run_mc(spec, cfg.methods, cfg.effect, cfg.reps, cfg.seed,
                         threads=cfg.threads, alpha=cfg.alpha, progress=progress)
        status = EXIT_OK
    except FitError as exc:
        summary = getattr(exc, "summary", None)
        if summary is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_FIT
    for method, count in summary.failures.items():
        print(f"{method}: {count} failed replicates", file=sys.stderr)
    text = summary.to_csv()
    if cfg.output is None:
        sys.stdout.write(text)
    else:
        Path(cfg.output).write_text(text, encoding="utf-8")
    return status


def cmd_calibrate(scenario: str, m: int, seed: int, output: Path | None = None,
                  n_cal: int = 1_000_000, tol: float = 0.005) -> int:
    scenario = scenario.upper()
    if scenario in ("A", "C"):
        raise ConfigError(f"scenario {scenario}: no calibration needed")
    if scenario not in ("B", "D"):
        raise ConfigError(f"unknown scenario {scenario!r}")
    if scenario == "B":
        gamma = calibrate_gamma_B(m)
        star, se = verify_gamma_B(m, n_cal, seed)
        z = np.abs(star - gamma_target(m)) / se
        log.info("scenario B verification: recovered %s, max |z| = %.2f", np.round(star, 4), z.max())
        if z.max() > 4:
            raise CalibrationError(f"scenario B verification failed (max |z| = {z.max():.2f})")
        result = CalibrationResult("B", m, tuple(gamma.tolist()), tuple(star.tolist()), 0, True,
                                   n_cal, seed, tol, extra={"verification_se": se.tolist()})
    else:
        result = calibrate_gamma_D(m, n_cal=n_cal, seed=seed, tol=tol)
    path = output or default_calibration_path(scenario, m)
    result.save(path)
    print("gamma = " + " ".join(f"{g:.6f}" for g in result.gamma))
    print("gamma_star_hat = " + " ".join(f"{g:.6f}" for g in result.gamma_star_hat))
    print(f"written to {path}", file=sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------------ #
# Argument parsing
# ------------------------------------------------------------------ #


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridgc", description="G-computation for hybrid-control trials")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate arm means and the treatment effect from a CSV file")
    a.add_argument("data", type=Path)
    a.add_argument("--outcome-kind", choices=("continuous", "binary"), required=True)
    a.add_argument("--effect", default="difference",
                   choices=("difference", "log_ratio", "log_odds_ratio"))
    a.add_argument("--methods", default=None, help="comma-separated subset of the five methods")
    a.add_argument("--se", default="analytic", choices=("analytic", "bootstrap", "both"))
    a.add_argument("--boot-reps", type=int, default=DEFAULT_BOOT_REPS)
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--threads", type=int, default=None)
    a.add_argument("-o", "--output", type=Path, default=None)

    s = sub.add_parser("simulate", help="Monte Carlo study for one scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--n1", type=int, default=200)
    s.add_argument("--n0", type=int, default=200)
    s.add_argument("--reps", type=int, default=2000)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--methods", default=None)
    s.add_argument("--effect", default="difference",
                   choices=("difference", "log_ratio", "log_odds_ratio"))
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--calibration", type=Path, default=None)
    s.add_argument("--threads", type=int, default=None)
    s.add_argument("-o", "--output", type=Path, default=None)

    c = sub.add_parser("calibrate", help="calibrate generating interactions for scenario B or D")
    c.add_argument("--scenario", required=True)
    c.add_argument("--m", type=int, required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--n-cal", type=int, default=1_000_000)
    c.add_argument("--tol", type=float, default=0.005)
    c.add_argument("-o", "--output", type=Path, default=None)
    return p


def _dispatch(args) -> int:
    if args.command == "analyze":
        cfg = AnalyzeConfig(
            data=args.data, outcome_kind=args.outcome_kind, effect=args.effect,
            methods=_parse_methods(args.methods), se=args.se, boot_reps=args.boot_reps,
            alpha=args.alpha, seed=args.seed, output=args.output,
            threads=args.threads or default_threads(),
        )
        return cmd_analyze(cfg)
    if args.command == "simulate":
        cfg = SimulateConfig(
            scenario=args.scenario.upper(), m=args.m, n1=args.n1, n0=args.n0, reps=args.reps,
            seed=args.seed, methods=_parse_methods(args.methods), effect=args.effect,
            output=args.output, calibration=args.calibration, threads=args.threads,
            alpha=args.alpha,
        )
        return cmd_simulate(cfg)
    return cmd_calibrate(args.scenario, args.m, args.seed, args.output, args.n_cal, args.tol)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, DataValidationError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FitError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
