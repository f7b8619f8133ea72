"""
Acceptance suites.

Each suite runs one family of checks at pinned seeds and returns TestReports:

- flat_bridge: Euclidean bridge marginal and terminal approach
- development: radial law of spherical Brownian motion, flat reduction
- two_route: conditioned SDE against draw-then-bridge on Sphere2
- transport: closed-form damped transport and the midpoint order
- bismut: gradient recovery for tilts, a spherical eigenfunction and xi = 1
- omega_convention: integration by parts with the right and wrong Omega
- newton_martingale: mean constancy under Dirac and atom conditionings
- hitting: exit-time series, Crank-Nicolson, conditioned exits and the
  exit-time Newton martingale
- bridge_invariance: drifted and undrifted flat bridges coincide
- reproducibility: reruns give byte-identical artifacts

``scale`` multiplies every path count, so scale=0.1 gives a quick smoke run.
"""

import logging
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy import stats

from csde_lab import heat_kernel
from csde_lab.batch_processor import BatchProcessor
from csde_lab.conditioning import (
    Atoms,
    ConditioningSpec,
    Dirac,
    bridge_drift,
    sample_csde,
    sample_enlarged,
    space_time_harmonic_drift,
)
from csde_lab.curvature_transport import contraction_rate, transport_ode
from csde_lab.development import geodesic_path, sample_bm
from csde_lab.errors import ConfigError
from csde_lab.estimators import (
    bismut_gradient,
    covariant_ibp_check,
    hitting_newton_martingale,
    martingale_constancy,
    newton_martingale,
    weight_normalization,
)
from csde_lab.geometry import (
    ConstantField,
    FramePoint,
    LinearField,
    ManifoldModel,
    SphericalGradientField,
    ZeroField,
    make_model,
)
from csde_lab.hitting_time import (
    AREA_CATALOG,
    PHI_RESIDUAL_TOL,
    bump_target,
    constant_target,
    euclidean_interval,
    exact_survival,
    exit_cdf,
    exit_density,
    interval_target,
    interval_target_cdf,
    mean_exit_time,
    phi_from_target,
    phi_residual,
    radial_grid,
    sample_conditioned_exit,
    survival_at,
    target_expectation,
)
from csde_lab.observables import Constant, ExponentialTilt, ZonalHarmonic
from csde_lab.results_writer import endpoints_frame, exits_frame, frame_to_csv, paths_frame
from csde_lab.stats_harness import (
    TestReport,
    bound_report,
    chisq_atoms,
    energy_distance_test,
    geodesic_distance,
    ks_test,
    proportion_interval,
    z_score_report,
)

logger = logging.getLogger(__name__)

ENERGY_SUBSAMPLE = 1000
NEWTON_GRID = np.linspace(0.1, 0.8, 8)
HITTING_NEWTON_GRID = np.array([0.1, 0.2, 0.3, 0.4])
HITTING_NEWTON_MARGIN = 0.1
ATOM_WEIGHTS = np.array([0.3, 0.7])


def _n(base: int, scale: float, floor: int = 50) -> int:
    return max(floor, int(round(base * scale)))


def _interval_report(name: str, value: float, low: float, high: float, **details) -> TestReport:
    passed = bool(low <= value <= high)
    return TestReport(name=name, statistic=float(value), threshold=high, passed=passed,
                      n_samples=0, kind="interval", details={"low": low, "high": high, **details})


def sphere_atoms(model: ManifoldModel, m: np.ndarray) -> np.ndarray:
    """Two atoms at geodesic distances 1.0 and 0.8 from m in different directions."""
    u0 = FramePoint.at(model, m)
    first = model.exp(m, u0.vector(np.array([1.0, 0.0])))
    second = model.exp(m, u0.vector(np.array([-0.4, 0.4 * np.sqrt(3.0)])))
    return np.stack([first, second])


# ==================== SUITES ====================


def flat_bridge(seed: int = 0, scale: float = 1.0,
                processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """Euclidean d=1 bridge from 0 to 1 at T = 1."""
    model = make_model("euclidean", 1)
    spec = ConditioningSpec(model, [0.0], ZeroField(), 1.0, Dirac(np.array([1.0])), N=800)
    n = _n(10000, scale)
    batch = sample_csde(spec, n, seed, processor, store_frames=False)

    k = batch.time_index(0.5)
    marginal = batch.points[:, k, 0]
    reports = [ks_test(marginal, stats.norm(loc=0.5, scale=0.5).cdf, name="flat_bridge_marginal", seed=seed)]

    eps = spec.terminal_gap
    last_free = batch.free_points[:, -1, 0]
    mean_sq = float(np.mean((last_free - 1.0) ** 2))
    reports.append(bound_report("flat_bridge_terminal_approach", mean_sq, 2.0 * eps, n, seed, eps=eps))
    return reports


def development(seed: int = 0, scale: float = 1.0,
                processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """Radial chi-square on Sphere2 and the exact flat reduction."""
    model = make_model("sphere2")
    m = model.origin()
    t = 0.5
    n = _n(10000, scale, floor=200)
    batch = sample_bm(model, m, None, t, 500, n, seed, processor, store_frames=False)
    radii = model.distance(m, batch.endpoints)

    grid, cdf = heat_kernel.radial_cdf(model, t)
    n_bins = 20 if n >= 2000 else 5
    edges = np.interp(np.linspace(0.0, 1.0, n_bins + 1), cdf, grid)
    edges[0], edges[-1] = 0.0, np.pi
    probs = heat_kernel.radial_bin_probabilities(model, t, edges)
    probs = probs / probs.sum()
    counts, _ = np.histogram(radii, bins=edges)
    reports = [chisq_atoms(counts, probs, name="development_sphere_radial", seed=seed)]

    flat = make_model("euclidean", 2)
    m_flat = np.array([0.3, -0.2])
    paths = sample_bm(flat, m_flat, None, 1.0, 200, 20, seed, processor, store_frames=False)
    partial = m_flat + np.concatenate(
        [np.zeros((len(paths), 1, 2)), np.cumsum(paths.driver, axis=1)], axis=1
    )
    error = float(np.max(np.abs(paths.points - partial)))
    reports.append(bound_report("development_flat_reduction", error, 1e-12, len(paths), seed))
    return reports


def two_route(seed: int = 0, scale: float = 1.0,
              processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """
    Conditioned SDE against the enlarged-filtration route on Sphere2 with a
    two-atom target. The routes use seeds ``seed`` and ``seed + 1`` so the
    two samples are independent.
    """
    model = make_model("sphere2")
    m = model.origin()
    target = Atoms(sphere_atoms(model, m), ATOM_WEIGHTS)
    spec = ConditioningSpec(model, m, ZeroField(), 1.0, target, N=800)
    n = _n(4000, scale, floor=100)
    csde = sample_csde(spec, n, seed, processor, store_frames=False)
    enlarged = sample_enlarged(spec, n, seed + 1, processor, store_frames=False)

    reports = []
    distance = geodesic_distance(model)
    half = min(ENERGY_SUBSAMPLE, n)
    for t in (0.25, 0.5, 0.75):
        k = csde.time_index(t)
        reports.append(energy_distance_test(
            csde.points[:half, k], enlarged.points[:half, k], distance,
            seed=seed, name=f"two_route_energy_t{t:g}",
        ))
    counts = np.bincount(csde.target_index, minlength=2)
    reports.append(chisq_atoms(counts, ATOM_WEIGHTS, name="two_route_atoms", seed=seed))
    reports.append(proportion_interval("two_route_atom_frequency", int(counts[0]), int(counts.sum()),
                                       float(ATOM_WEIGHTS[0]), seed=seed))
    return reports


def _midpoint_order() -> TestReport:
    model = make_model("sphere2")
    m = np.array([1.0, 0.0, 1.0]) / np.sqrt(2.0)
    u0 = FramePoint.at(model, m)
    V = SphericalGradientField(1.0, [0.0, 0.0, 1.0])
    velocity = np.array([1.0, 0.3])

    def final(N):
        return transport_ode(geodesic_path(model, u0, velocity, 2.0, N), V).final

    reference = final(3200)
    coarse = np.max(np.abs(final(50) - reference))
    fine = np.max(np.abs(final(100) - reference))
    return _interval_report("transport_step_halving", coarse / fine, 3.5, 4.5,
                            coarse_error=coarse, fine_error=fine)


def transport(seed: int = 0, scale: float = 1.0,
              processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """Damped transport in closed form on the constant-curvature models."""
    reports = []
    sphere = make_model("sphere2")
    batch = sample_bm(sphere, sphere.origin(), None, 2.0, 1600, 4, seed, processor)
    lam = transport_ode(batch, ZeroField())
    error = np.max(np.abs(lam.final - np.exp(-1.0) * np.eye(2)))
    reports.append(bound_report("transport_sphere", error, 1e-6, len(batch), seed))

    rate = contraction_rate(sphere, ZeroField(), batch.points, batch.frames)
    norms = np.linalg.norm(lam.matrices, ord=2, axis=(-2, -1))
    excess = float(np.max(norms * np.exp(rate * lam.times) - 1.0))
    reports.append(bound_report("transport_contraction", excess, 1e-6, len(batch), seed, rate=rate))

    hyperbolic = make_model("hyperbolic3")
    batch = sample_bm(hyperbolic, hyperbolic.origin(), None, 1.0, 800, 4, seed, processor)
    error = np.max(np.abs(transport_ode(batch, ZeroField()).final - np.e * np.eye(3)))
    reports.append(bound_report("transport_hyperbolic", error, 1e-6, len(batch), seed))

    flat = make_model("euclidean", 2)
    batch = sample_bm(flat, np.zeros(2), None, 1.0, 200, 4, seed, processor)
    error = np.max(np.abs(transport_ode(batch, ZeroField()).matrices - np.eye(2)))
    reports.append(bound_report("transport_flat", error, 1e-12, len(batch), seed))

    reports.append(_midpoint_order())
    return reports


def bismut(seed: int = 0, scale: float = 1.0,
           processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """Bismut gradients against closed forms."""
    reports = []
    flat = make_model("euclidean", 1)
    n_flat = _n(100000, scale, floor=500)
    for a in (0.25, 0.5, 1.0):
        xi = ExponentialTilt([a], 1.0)
        estimate = bismut_gradient(flat, [0.0], xi, 1.0, n_flat, seed, N=200, processor=processor)
        reports.append(z_score_report(f"bismut_tilt_a{a:g}", estimate.value, estimate.std_error,
                                      [a], n_flat, seed))

    sphere = make_model("sphere2")
    m = np.array([1.0, 0.0, 0.0])
    xi = ZonalHarmonic([0.0, 0.0, 1.0], 0.5)
    expected = FramePoint.at(sphere, m).coordinates(xi.log_semigroup_gradient(sphere, 1.0, m[None])[0])
    n_sphere = _n(20000, scale, floor=500)
    estimate = bismut_gradient(sphere, m, xi, 1.0, n_sphere, seed, processor=processor)
    reports.append(z_score_report("bismut_sphere_eigenfunction", estimate.value, estimate.std_error,
                                  expected, n_sphere, seed))
    reports.append(weight_normalization(sphere, m, xi, 1.0, n_sphere, seed, processor=processor))

    plane = make_model("euclidean", 2)
    n_const = _n(20000, scale, floor=500)
    estimate = bismut_gradient(plane, np.zeros(2), Constant(), 1.0, n_const, seed, N=200, processor=processor)
    reports.append(z_score_report("bismut_constant", estimate.value, estimate.std_error,
                                  np.zeros(2), n_const, seed))
    return reports


def omega_convention(seed: int = 0, scale: float = 1.0,
                     processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """
    Integration by parts for a flat Ornstein-Uhlenbeck drift with a shear, so
    transposing nabla V matters. The standard Omega must pass; the transposed
    and sign-flipped variants must be rejected with |z| > 10.
    """
    model = make_model("euclidean", 2)
    V = LinearField(np.array([[-0.5, 0.8], [0.0, -0.5]]))
    xi = ExponentialTilt([1.0, 0.5], 1.0)
    n = _n(20000, scale, floor=500)
    _, _, report = covariant_ibp_check(model, np.zeros(2), V, xi, 1.0, n, seed,
                                       N=400, processor=processor, convention="standard")
    reports = [report]
    for convention in ("untransposed", "flipped_sign"):
        _, _, wrong = covariant_ibp_check(model, np.zeros(2), V, xi, 1.0, n, seed,
                                          N=400, processor=processor, convention=convention)
        z = abs(wrong.z_score)
        reports.append(TestReport(
            name=f"omega_negative_control[{convention}]", statistic=z, threshold=10.0,
            passed=bool(z > 10.0), n_samples=n, kind="z_score", z_score=wrong.z_score,
            seed=seed, details={"rejection_expected": True},
        ))
    return reports


def newton_martingale_suite(seed: int = 0, scale: float = 1.0,
                            processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """Mean constancy of the Newton martingale on flat and spherical bridges."""
    flat = make_model("euclidean", 1)
    sphere = make_model("sphere2")
    m_sphere = sphere.origin()
    atoms = sphere_atoms(sphere, m_sphere)
    cases = [
        ("flat_dirac", flat, np.zeros(1), Dirac(np.array([1.0]))),
        ("flat_atoms", flat, np.zeros(1), Atoms(np.array([[-1.0], [1.5]]), ATOM_WEIGHTS)),
        ("sphere_dirac", sphere, m_sphere, Dirac(atoms[0])),
        ("sphere_atoms", sphere, m_sphere, Atoms(atoms, ATOM_WEIGHTS)),
    ]
    n = _n(2000, scale, floor=100)
    reports = []
    for label, model, m, target in cases:
        spec = ConditioningSpec(model, m, ZeroField(), 1.0, target, N=800)
        batch = sample_csde(spec, n, seed, processor)
        lam = transport_ode(batch, spec.V)
        values = newton_martingale(batch, lam, spec=spec)
        reports.append(martingale_constancy(values, batch.free_times, NEWTON_GRID,
                                            name=f"newton_{label}", seed=seed))
    return reports


def _cn_series_error(s_min: float = 0.05) -> float:
    tau_max, n_s, n_rho = 5.0, 4000, 200
    grid = exit_density(radial_grid(AREA_CATALOG["flat1"], 1.0, "flat1"), tau_max, n_s, n_rho)
    exact = exact_survival(euclidean_interval(1.0), grid.s_grid[:, None], grid.rho_grid[None, :])
    rows = grid.s_grid >= s_min
    return float(np.max(np.abs(grid.survival[rows] - exact[rows])))


def _hitting_newton_reports(label: str, samples, spec, seed: int) -> List[TestReport]:
    """Constancy of N and of N . X_{t_1}; the mean of N itself vanishes by symmetry."""
    values, keep = hitting_newton_martingale(samples, spec, HITTING_NEWTON_MARGIN)
    first = samples.positions[keep, 0]
    projected = np.einsum("bkd,bd->bk", values, first)
    return [
        martingale_constancy(values, samples.record_times, HITTING_NEWTON_GRID,
                             name=f"hitting_newton_{label}", seed=seed),
        martingale_constancy(projected, samples.record_times, HITTING_NEWTON_GRID,
                             name=f"hitting_newton_{label}_projected", seed=seed),
    ]


def hitting(seed: int = 0, scale: float = 1.0,
            processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """Exit from (-1, 1): series, Crank-Nicolson, conditioned exit laws, Newton martingale."""
    spec = euclidean_interval(1.0)
    profile = exit_density(spec)
    reports = [
        bound_report("hitting_mean_exit_time", abs(mean_exit_time(profile, 0.0) - 1.0), 3e-3),
        bound_report("hitting_mass_conservation", float(np.max(profile.mass_defect())), 1e-6),
        bound_report("hitting_cn_vs_series", _cn_series_error(), 1e-4),
    ]
    u1 = float(survival_at(profile, 1.0, 0.0))
    reports.append(bound_report("hitting_survival_u1", abs(u1 - 0.3708), 1e-4, u1=u1))

    n = _n(10000, scale, floor=200)
    free = phi_from_target(profile, constant_target())
    unconditioned = sample_conditioned_exit(spec, free, n, seed, processor=processor,
                                            record_times=HITTING_NEWTON_GRID)
    observed = unconditioned.observed
    reports.append(ks_test(observed, exit_cdf(profile, 0.0), name="hitting_constant_target", seed=seed))
    survivors = int(np.sum(unconditioned.exit_times > 1.0))
    reports.append(proportion_interval("hitting_survival_mc", survivors, len(unconditioned.exit_times),
                                       u1, seed=seed))

    a, b = 0.2, 0.6
    g = interval_target(profile, a, b)
    field = phi_from_target(profile, g)
    reports.append(bound_report("hitting_phi_normalization", abs(field.phi[0, 0] - 1.0), 1e-6))
    mean_g, se_g = target_expectation(unconditioned, g)
    reports.append(z_score_report("hitting_h_transform_consistency", mean_g, se_g, 1.0, len(observed), seed))

    smooth = phi_from_target(profile, bump_target(profile, 1.0, width_fraction=0.3), t_stride=1)
    reports.append(bound_report("hitting_phi_residual", phi_residual(smooth), PHI_RESIDUAL_TOL))

    conditioned = sample_conditioned_exit(spec, field, n, seed + 1, processor=processor)
    reports.append(ks_test(conditioned.observed, interval_target_cdf(profile, a, b),
                           name="hitting_interval_target", seed=seed + 1))

    reports.extend(_hitting_newton_reports("constant_target", unconditioned, spec, seed))
    late = phi_from_target(profile, interval_target(profile, 0.6, 1.2))
    drifted = sample_conditioned_exit(spec, late, n, seed + 2, processor=processor,
                                      record_times=HITTING_NEWTON_GRID)
    reports.extend(_hitting_newton_reports("interval_target", drifted, spec, seed + 2))
    return reports


def bridge_invariance(seed: int = 0, scale: float = 1.0,
                      processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """Pinned drifts of flat BM, BM with constant drift and the exponential h-transform."""
    model = make_model("euclidean", 1)
    T, y = 1.0, np.array([1.0])
    a = np.array([0.7])
    times = np.linspace(0.0, 0.9, 10)
    x = np.linspace(-2.0, 2.0, 21)[:, None]
    worst_constant = 0.0
    worst_harmonic = 0.0
    harmonic = space_time_harmonic_drift(a)
    for t in times:
        plain = bridge_drift(model, ZeroField(), T - t, x, y)
        drifted = bridge_drift(model, ConstantField(a), T - t, x, y)
        worst_constant = max(worst_constant, float(np.max(np.abs(plain - drifted))))
        # h-transformed BM has drift grad log phi; its pinned drift adds the score of its own kernel
        tilted = harmonic(t, x) + (y - x - a * (T - t)) / (T - t)
        worst_harmonic = max(worst_harmonic, float(np.max(np.abs(plain - tilted))))
    return [
        bound_report("bridge_invariance_constant_drift", worst_constant, 1e-12),
        bound_report("bridge_invariance_space_time_harmonic", worst_harmonic, 1e-12),
    ]


def reproducibility(seed: int = 0, scale: float = 1.0,
                    processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """Same seed, different chunking: identical CSV bytes."""
    small = BatchProcessor({"batch": {"chunk_size": 7, "threads": 1}})
    processor = processor or BatchProcessor()
    flat = make_model("euclidean", 1)
    spec = ConditioningSpec(flat, [0.0], ZeroField(), 1.0, Dirac(np.array([1.0])), N=100)

    def flat_run(proc):
        return frame_to_csv(paths_frame(sample_csde(spec, 40, seed, proc)))

    sphere = make_model("sphere2")
    m = sphere.origin()
    atoms = ConditioningSpec(sphere, m, ZeroField(), 1.0, Atoms(sphere_atoms(sphere, m), ATOM_WEIGHTS), N=100)

    def atoms_run(proc):
        return frame_to_csv(endpoints_frame(sample_csde(atoms, 40, seed, proc)))

    profile = exit_density(euclidean_interval(1.0), n_s=1000, n_rho=50)
    free = phi_from_target(profile, constant_target())

    def exits_run(proc):
        return frame_to_csv(exits_frame(sample_conditioned_exit(euclidean_interval(1.0), free, 40, seed,
                                                                processor=proc)))

    reports = []
    for name, run in (("paths", flat_run), ("atom_endpoints", atoms_run), ("exits", exits_run)):
        first, second, rechunked = run(processor), run(processor), run(small)
        mismatch = float((first != second) + (first != rechunked))
        reports.append(bound_report(f"reproducibility_{name}", mismatch, 0.0, 40, seed))
    return reports


SUITES: Dict[str, Callable[..., List[TestReport]]] = {
    "flat_bridge": flat_bridge,
    "development": development,
    "two_route": two_route,
    "transport": transport,
    "bismut": bismut,
    "omega_convention": omega_convention,
    "newton_martingale": newton_martingale_suite,
    "hitting": hitting,
    "bridge_invariance": bridge_invariance,
    "reproducibility": reproducibility,
}


def run_suite(name: str, seed: int = 0, scale: float = 1.0,
              processor: Optional[BatchProcessor] = None) -> List[TestReport]:
    """
    Run one suite by name, or every suite for "all".

    Raises:
        ConfigError: If the suite name is unknown
    """
    if name == "all":
        reports = []
        for suite_name, suite in SUITES.items():
            logger.info("Running suite %s", suite_name)
            reports.extend(suite(seed, scale, processor))
        return reports
    if name not in SUITES:
        raise ConfigError(f"Unknown suite '{name}'. Valid suites: all, {', '.join(SUITES)}")
    return SUITES[name](seed, scale, processor)
