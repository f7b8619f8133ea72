"""
Command-line front end.

Four commands, each driven by one experiment file:
1. simulate: sample free or conditioned paths
2. gradient: Bismut estimate of grad log Q_T xi(m), or the integration-by-parts check
3. hitting: exit-time profile of a geodesic ball and conditioned exit times
4. verify: run acceptance suites

Usage:
  csde-lab simulate --config configs/bridge_flat.yaml
  csde-lab verify --config configs/verify_all.yaml --seed 3 --out outputs/verify
  csde-lab hitting --config configs/hitting.yaml --quiet

Output (in the config's output_dir, or --out):
  - paths.csv, endpoints.csv         (simulate)
  - gradient.json, reports.jsonl     (gradient)
  - profile.csv, exits.csv, reports.jsonl, hitting.json (hitting)
  - reports.jsonl                    (verify)
  - run_summary.json                 (every command)

Exit codes: 0 success, 1 statistical test failure, 2 configuration error,
3 numerical error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from csde_lab import utils
from csde_lab.batch_processor import BatchProcessor
from csde_lab.conditioning import (
    Atoms,
    ConditioningSpec,
    DensityRatio,
    Dirac,
    sample_csde,
    sample_enlarged,
)
from csde_lab.development import default_steps, sample_bm
from csde_lab.errors import ConfigError, CsdeLabError, UnsupportedError
from csde_lab.estimators import bismut_gradient, covariant_ibp_check, semigroup_gradient
from csde_lab.geometry import FramePoint, make_field, make_model
from csde_lab.hitting_time import (
    AREA_CATALOG,
    bump_target,
    constant_target,
    euclidean_ball3,
    euclidean_interval,
    exit_cdf,
    exit_density,
    interval_target,
    interval_target_cdf,
    mean_exit_time,
    phi_from_target,
    radial_grid,
    sample_conditioned_exit,
)
from csde_lab.observables import make_observable
from csde_lab.output_validator import ConfigValidator
from csde_lab.results_writer import ResultsWriter
from csde_lab.stats_harness import TestReport, all_passed, bound_report, ks_test, z_score_report
from csde_lab.verification import run_suite

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "verify", "gradient", "hitting")
EXIT_OK = 0
EXIT_TEST_FAILURE = 1
EXIT_CONFIG_ERROR = 2

Outcome = Tuple[int, Dict[str, Any]]


def parse_args(argv: Optional[List[str]] = None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        prog="csde-lab",
        description="Conditioned diffusions on Riemannian manifolds: simulation and verification",
    )
    parser.add_argument("command", choices=COMMANDS, help="What to run")
    parser.add_argument("--config", required=True, metavar="FILE", help="Experiment file (YAML or JSON)")
    parser.add_argument("--seed", type=int, default=None, help="Override the config seed")
    parser.add_argument("--out", default=None, metavar="DIR", help="Override the output directory")
    parser.add_argument("--quiet", action="store_true", help="No console report or progress bars")
    return parser.parse_args(argv)


def _status(reports: List[TestReport], quiet: bool):
    if quiet:
        return
    for report in reports:
        print(f"  {report.status_line()}")
    passed = sum(r.passed for r in reports)
    print(f"\n  {passed}/{len(reports)} checks passed")


def _reports_exit_code(reports: List[TestReport]) -> int:
    return EXIT_OK if all_passed(reports) else EXIT_TEST_FAILURE


# ==================== SIMULATE ====================


def build_target(config: Dict[str, Any], model, horizon: float):
    """Target law from the ``target`` section, or None for free paths."""
    target = config.get("target") or {"kind": "none"}
    kind = str(target.get("kind", "none")).lower()
    if kind == "none":
        return None
    if kind == "dirac":
        return Dirac(np.asarray(target["point"], dtype=float))
    if kind == "atoms":
        return Atoms(np.asarray(target["points"], dtype=float), np.asarray(target["weights"], dtype=float))
    return DensityRatio(make_observable(target.get("observable"), model, horizon), target.get("normalization"))


def run_simulate(config: Dict[str, Any], processor: BatchProcessor, writer: ResultsWriter,
                 quiet: bool) -> Outcome:
    """Sample paths and write paths.csv / endpoints.csv."""
    model = make_model(config["model"]["kind"], config["model"].get("dim"))
    m = np.asarray(config.get("start", model.origin()), dtype=float)
    V = make_field(config.get("drift"), model)
    horizon = float(config["horizon"])
    N = config.get("steps") or default_steps(horizon)
    n_paths = int(config["n_paths"])
    seed = int(config["seed"])
    store_frames = bool(config.get("store_frames", True))
    target = build_target(config, model, horizon)

    if not quiet:
        utils.print_section_header("SIMULATE")
        print(f"Model: {model!r}")
        print(f"Drift: {V.name}")
        print(f"Target: {target.kind if target is not None else 'none'}")
        print(f"Paths: {n_paths:,} x {N} steps, T = {horizon}")

    if target is None:
        batch = sample_bm(model, m, V, horizon, N, n_paths, seed, processor, store_frames)
        route = "free"
    else:
        spec = ConditioningSpec(model, m, V, horizon, target, N=N)
        route = str(config.get("route", "csde")).lower()
        sampler = sample_enlarged if route == "enlarged" else sample_csde
        batch = sampler(spec, n_paths, seed, processor, store_frames)

    if not quiet:
        utils.print_section_header("SAVE RESULTS")
    if config.get("write_paths", True):
        writer.write_paths(batch)
    writer.write_endpoints(batch)
    return EXIT_OK, {"route": route, "steps": int(N), "n_paths": n_paths,
                     "terminal_gap": batch.meta.get("terminal_gap", 0.0),
                     "normalization": batch.meta.get("normalization")}


# ==================== GRADIENT ====================


def run_gradient(config: Dict[str, Any], processor: BatchProcessor, writer: ResultsWriter,
                 quiet: bool) -> Outcome:
    """Gradient estimate at the start point, compared with the exact value when one exists."""
    model = make_model(config["model"]["kind"], config["model"].get("dim"))
    m = model.check_point(np.asarray(config.get("start", model.origin()), dtype=float), "start")
    V = make_field(config.get("drift"), model)
    horizon = float(config["horizon"])
    N = config.get("steps")
    n_paths = int(config["n_paths"])
    seed = int(config["seed"])
    gradient = config.get("gradient") or {}
    method = str(gradient.get("method", "bismut")).lower()
    convention = str(gradient.get("convention", "standard"))
    xi = make_observable(gradient.get("observable"), model, horizon)

    if not quiet:
        utils.print_section_header(f"GRADIENT ({method.upper()})")
        print(f"Model: {model!r}")
        print(f"Observable: {xi.name}")
        print(f"Paths: {n_paths:,}, T = {horizon}, convention = {convention}")

    reports: List[TestReport] = []
    if method == "ibp":
        lhs, rhs, report = covariant_ibp_check(model, m, V, xi, horizon, n_paths, seed, N,
                                               processor, convention)
        record = {"method": "ibp", "exact": lhs, **rhs.to_dict()}
        reports.append(report)
    else:
        estimate = bismut_gradient(model, m, xi, horizon, n_paths, seed, V, N, processor, convention)
        record = {"method": "bismut", **estimate.to_dict()}
        try:
            q, grad = semigroup_gradient(model, V, xi, horizon, m)
        except UnsupportedError:
            logger.info("No exact gradient for %s on %r; reporting the estimate only", xi.name, model)
        else:
            exact = FramePoint.at(model, m).coordinates(grad / q)
            record["exact"] = exact
            reports.append(z_score_report(f"bismut[{convention}]", estimate.value, estimate.std_error,
                                          exact, n_paths, seed))
    record["convention"] = convention

    if not quiet:
        print(f"\nEstimate: {np.round(record['value'], 6).tolist()}")
        print(f"Std error: {np.round(record['std_error'], 6).tolist()}")
        if "exact" in record:
            print(f"Exact:    {np.round(record['exact'], 6).tolist()}")
        utils.print_section_header("SAVE RESULTS")
    writer.write_estimate("gradient.json", record)
    writer.write_reports(reports)
    _status(reports, quiet)
    return _reports_exit_code(reports), {"method": method}


# ==================== HITTING ====================


def build_radial(hitting: Dict[str, Any]):
    radial = str(hitting.get("radial", "interval")).lower()
    radius = float(hitting.get("radius", 1.0))
    if radial == "interval":
        return euclidean_interval(radius)
    if radial == "ball3":
        return euclidean_ball3(radius)
    area = hitting.get("area", "flat1")
    return radial_grid(AREA_CATALOG[area], radius, area)


def build_time_target(profile, target: Dict[str, Any]):
    """Target density of the exit time and, when explicit, its CDF."""
    kind = str(target.get("kind", "constant")).lower()
    try:
        if kind == "constant":
            return constant_target(), exit_cdf(profile, 0.0)
        if kind == "bump":
            return bump_target(profile, float(target["tau0"]), float(target.get("width_fraction", 0.05))), None
        a, b = float(target["a"]), float(target["b"])
    except KeyError as exc:
        raise ConfigError(f"Hitting target '{kind}' is missing parameter {exc}") from exc
    return interval_target(profile, a, b), interval_target_cdf(profile, a, b)


def run_hitting(config: Dict[str, Any], processor: BatchProcessor, writer: ResultsWriter,
                quiet: bool) -> Outcome:
    """Exit-time profile, then conditioned exits when the ball can be simulated."""
    hitting = config.get("hitting") or {}
    spec = build_radial(hitting)
    seed = int(config["seed"])
    n_paths = int(config["n_paths"])

    if not quiet:
        utils.print_section_header("EXIT-TIME PROFILE")
        print(f"Radial model: {spec.label} (r = {spec.radius})")
    profile = exit_density(spec, hitting.get("tau_max"), int(hitting.get("n_s", 4000)),
                           int(hitting.get("n_rho", 200)))
    mean_time = mean_exit_time(profile, 0.0)
    mass = float(np.max(profile.mass_defect()))
    if not quiet:
        print(f"  E[T_r] from the centre: {mean_time:.6f}")
        print(f"  Mass defect: {mass:.2e}")

    reports: List[TestReport] = [bound_report("mass_conservation", mass, 1e-6)]
    record: Dict[str, Any] = {"radial": spec.label, "radius": spec.radius, "tau_max": profile.tau_max,
                              "mean_exit_time": mean_time}

    target_cfg = hitting.get("target") or {"kind": "constant"}
    g, target_cdf = build_time_target(profile, target_cfg)
    field = phi_from_target(profile, g)
    record["target"] = g.label
    record["phi_centre"] = float(field.phi[0, 0])

    samples = None
    if spec.kind in ("interval", "ball3"):
        if not quiet:
            utils.print_section_header("CONDITIONED EXITS")
            print(f"Target: {g.label}, {n_paths:,} paths, step {hitting.get('step', 1e-3)}")
        samples = sample_conditioned_exit(spec, field, n_paths, seed, float(hitting.get("step", 1e-3)),
                                          processor)
        record["censored"] = int(samples.censored.sum())
        if target_cdf is not None:
            reports.append(ks_test(samples.observed, target_cdf, name=f"exit_law[{g.label}]", seed=seed))
    else:
        logger.info("No exit sampler for radial model %s; writing the profile only", spec.label)

    if not quiet:
        utils.print_section_header("SAVE RESULTS")
    writer.write_profile(profile)
    if samples is not None:
        writer.write_exits(samples)
    writer.write_estimate("hitting.json", record)
    writer.write_reports(reports)
    _status(reports, quiet)
    return _reports_exit_code(reports), {"radial": spec.label}


# ==================== VERIFY ====================


def run_verify(config: Dict[str, Any], processor: BatchProcessor, writer: ResultsWriter,
               quiet: bool) -> Outcome:
    """Run one suite or all of them; the exit code is the conjunction of the reports."""
    verify = config.get("verify") or {}
    suite = str(verify.get("suite", "all"))
    scale = float(verify.get("scale", 1.0))
    seed = int(config["seed"])
    if not quiet:
        utils.print_section_header(f"VERIFY: {suite}")
        print(f"Seed: {seed}, scale: {scale}")
    reports = run_suite(suite, seed, scale, processor)
    if not quiet:
        utils.print_section_header("SAVE RESULTS")
    writer.write_reports(reports)
    _status(reports, quiet)
    return _reports_exit_code(reports), {"suite": suite, "scale": scale,
                                         "failed": [r.name for r in reports if not r.passed]}


RUNNERS = {
    "simulate": run_simulate,
    "gradient": run_gradient,
    "hitting": run_hitting,
    "verify": run_verify,
}


def run_config(config_path, command: Optional[str] = None, seed: Optional[int] = None,
               out: Optional[str] = None, quiet: bool = False) -> int:
    """
    Load, validate and run one experiment.

    Args:
        config_path: Experiment file
        command: Overrides the config's command
        seed: Overrides the config's seed
        out: Overrides the config's output_dir
        quiet: Suppress the console report and progress bars

    Returns:
        Exit code (0 success, 1 test failure, 2 config error, 3 numerical error)
    """
    try:
        config = utils.load_config(config_path)
    except CsdeLabError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code
    if command is not None:
        config["command"] = command
    if seed is not None:
        config["seed"] = seed
    if out is not None:
        config["output_dir"] = out

    validator = ConfigValidator()
    is_valid, errors = validator.validate(config)
    if not is_valid:
        validator.print_validation_report(errors)
        return EXIT_CONFIG_ERROR

    command = str(config["command"]).lower()
    writer = ResultsWriter(Path(config["output_dir"]), verbose=not quiet)
    processor = BatchProcessor(config, show_progress=not quiet)
    extra: Dict[str, Any] = {}
    try:
        exit_code, extra = RUNNERS[command](config, processor, writer, quiet)
    except CsdeLabError as exc:
        print(f"Error ({type(exc).__name__}): {exc}", file=sys.stderr)
        exit_code = exc.exit_code
        extra = {"error": f"{type(exc).__name__}: {exc}"}
    writer.write_summary(config, command, int(config["seed"]), exit_code, extra)

    if not quiet:
        mark = "✓" if exit_code == EXIT_OK else "✗"
        print(f"\n{mark} {command} finished with exit code {exit_code}")
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.ERROR if args.quiet else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return run_config(args.config, args.command, args.seed, args.out, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
