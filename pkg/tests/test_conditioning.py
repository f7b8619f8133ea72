import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from csde_lab.conditioning import (
    Atoms,
    ConditioningSpec,
    DensityRatio,
    Dirac,
    GaussianTransition,
    TimeDensity,
    bridge_drift,
    check_normalization,
    endpoint_drift,
    estimate_normalization,
    eta_density,
    posterior_weights,
    sample_csde,
    sample_enlarged,
    space_time_harmonic_drift,
)
from csde_lab.development import sample_bm
from csde_lab.errors import InvalidInputError, OutOfRangeError, UnsupportedError
from csde_lab.geometry import ConstantField, LinearField, SphericalGradientField
from csde_lab.observables import Constant, ExponentialTilt, ZonalHarmonic
from csde_lab.stats_harness import ks_test, proportion_interval


def flat_dirac(flat1, y=1.0, N=None, V=None):
    return ConditioningSpec(flat1, [0.0], V, 1.0, Dirac([y]), N)


def symmetric_atoms(flat1, N=None):
    return ConditioningSpec(flat1, [0.0], None, 1.0, Atoms([[1.0], [-1.0]], [0.5, 0.5]), N)


def mixture_cdf(x):
    return 0.5 * stats.norm.cdf(x, 0.5, 0.5) + 0.5 * stats.norm.cdf(x, -0.5, 0.5)


# ==================== DENSITIES AND DRIFTS ====================


def test_eta_is_one_at_time_zero(flat1, sphere):
    assert eta_density(flat_dirac(flat1), 0.0, [0.0], [1.7]) == pytest.approx(1.0)
    spec = ConditioningSpec(sphere, sphere.origin(), None, 1.0, Dirac([0.6, 0.0, 0.8]))
    assert eta_density(spec, 0.0, sphere.origin(), [0.0, 0.6, 0.8]) == pytest.approx(1.0)


def test_eta_gaussian_arithmetic(flat1):
    # q_{0.5}(0.2, 1) / q_1(0, 1) = sqrt(2) exp(-0.64 + 0.5)
    value = eta_density(flat_dirac(flat1), 0.5, [0.2], [1.0])
    assert value == pytest.approx(np.sqrt(2.0) * np.exp(-0.14), rel=1e-12)


def test_eta_has_mean_one_under_the_prior(flat1, processor):
    spec = flat_dirac(flat1)
    batch = sample_bm(flat1, [0.0], None, 1.0, 100, 4000, seed=8, processor=processor, store_frames=False)
    values = eta_density(spec, 0.5, batch.points[:, 50], [1.0])
    se = values.std(ddof=1) / np.sqrt(len(values))
    assert abs(values.mean() - 1.0) < 4.0 * se


def test_eta_beyond_the_terminal_gap_is_rejected(flat1):
    spec = flat_dirac(flat1, N=100)
    with pytest.raises(OutOfRangeError):
        eta_density(spec, 0.999, [0.0], [1.0])
    with pytest.raises(OutOfRangeError):
        eta_density(spec, 1.0 - spec.terminal_gap, [0.0], [1.0])
    assert np.isfinite(eta_density(spec, 0.98, [0.0], [1.0]))


def test_dirac_drift(flat1):
    assert_allclose(endpoint_drift(flat_dirac(flat1), 0.5, [0.0]), [2.0])


def test_symmetric_atoms_cancel_at_the_origin(flat1):
    spec = symmetric_atoms(flat1)
    for t in (0.0, 0.3, 0.9):
        assert_allclose(endpoint_drift(spec, t, [0.0]), [0.0], atol=1e-14)


def test_single_atom_equals_dirac(flat1, sphere):
    x = np.array([[0.3], [-0.4], [1.2]])
    atom = ConditioningSpec(flat1, [0.0], None, 1.0, Atoms([[0.8]], [1.0]))
    assert np.max(np.abs(endpoint_drift(atom, 0.4, x) - endpoint_drift(flat_dirac(flat1, 0.8), 0.4, x))) < 1e-14

    y = np.array([0.0, 0.6, 0.8])
    xs = np.array([[0.6, 0.0, 0.8], [0.0, 0.0, 1.0]])
    atom = ConditioningSpec(sphere, sphere.origin(), None, 1.0, Atoms([y], [1.0]))
    dirac = ConditioningSpec(sphere, sphere.origin(), None, 1.0, Dirac(y))
    assert np.max(np.abs(endpoint_drift(atom, 0.5, xs) - endpoint_drift(dirac, 0.5, xs))) < 1e-14


def test_posterior_weights_sum_to_one(flat1):
    spec = ConditioningSpec(flat1, [0.0], None, 1.0, Atoms([[2.0], [-1.0], [30.0]], [0.2, 0.5, 0.3]))
    x = np.linspace(-3.0, 3.0, 13)[:, None]
    weights = posterior_weights(spec, 0.6, x)
    assert weights.shape == (13, 3)
    assert np.max(np.abs(weights.sum(axis=1) - 1.0)) < 1e-14
    assert np.all(np.isfinite(weights))


def test_true_law_adds_no_drift(flat1):
    spec = ConditioningSpec(flat1, [0.0], None, 1.0, DensityRatio(Constant()))
    assert np.max(np.abs(endpoint_drift(spec, 0.4, np.linspace(-2, 2, 9)[:, None]))) < 1e-12


def test_exponential_tilt_ratio_gives_constant_drift(flat2):
    a = [0.5, -0.3]
    spec = ConditioningSpec(flat2, [0.0, 0.0], None, 1.0, DensityRatio(ExponentialTilt(a, 1.0)))
    assert_allclose(endpoint_drift(spec, 0.25, [[1.0, 2.0], [-3.0, 0.0]]), [a, a])
    assert_allclose(space_time_harmonic_drift(a)(0.25, np.zeros((2, 2))), [a, a])


def test_zonal_ratio_drift_on_the_sphere(sphere):
    xi = ZonalHarmonic([0.0, 0.0, 1.0], 0.5)
    spec = ConditioningSpec(sphere, sphere.origin(), None, 1.0, DensityRatio(xi))
    x = np.array([[0.6, 0.0, 0.8]])
    s = 0.6
    q = 1.0 + 0.5 * np.exp(-s) * 0.8
    expected = 0.5 * np.exp(-s) * (np.array([0.0, 0.0, 1.0]) - 0.8 * x[0]) / q
    assert_allclose(endpoint_drift(spec, 1.0 - s, x)[0], expected, atol=1e-12)


# ==================== CONDITIONING VALIDATION ====================


def test_terminal_gap_on_closed_forms_is_one_step(flat1):
    spec = flat_dirac(flat1, N=100)
    assert spec.terminal_gap == pytest.approx(0.01)
    assert spec.free_steps == 99


def test_terminal_gap_on_series_kernels_respects_t_min(sphere):
    spec = ConditioningSpec(sphere, sphere.origin(), None, 1.0, Dirac([0.0, 0.6, 0.8]), 800)
    assert spec.terminal_gap == pytest.approx(0.01)
    assert spec.free_steps == 792
    coarse = ConditioningSpec(sphere, sphere.origin(), None, 1.0, Dirac([0.0, 0.6, 0.8]), 50)
    assert coarse.terminal_gap == pytest.approx(0.02)


def test_drifted_conditioning_off_flat_space_is_unsupported(sphere):
    with pytest.raises(UnsupportedError):
        ConditioningSpec(sphere, sphere.origin(), SphericalGradientField(1.0, [0, 0, 1]), 1.0,
                         Dirac([0.0, 0.6, 0.8]))


def test_time_density_targets_are_rejected(flat1):
    g = TimeDensity(lambda s: np.ones_like(s), "constant", True)
    with pytest.raises(UnsupportedError):
        ConditioningSpec(flat1, [0.0], None, 1.0, g)


@pytest.mark.parametrize("weights", [[0.5, 0.6], [1.2, -0.2], [1.0]])
def test_bad_atom_weights(weights):
    with pytest.raises(InvalidInputError):
        Atoms([[1.0], [-1.0]], weights)


def test_target_must_lie_on_the_model(sphere):
    with pytest.raises(InvalidInputError):
        ConditioningSpec(sphere, sphere.origin(), None, 1.0, Dirac([0.0, 0.0, 2.0]))


def test_non_positive_horizon(flat1):
    with pytest.raises(InvalidInputError):
        ConditioningSpec(flat1, [0.0], None, 0.0, Dirac([1.0]))


# ==================== FLAT DRIFTED TRANSITIONS ====================


def test_ou_moments():
    from csde_lab.geometry import make_model

    M, b, S = GaussianTransition(make_model("euclidean", 1), LinearField([[-0.5]])).moments(1.0)
    assert M[0, 0] == pytest.approx(np.exp(-0.5))
    assert_allclose(b, [0.0])
    assert S[0, 0] == pytest.approx(1.0 - np.exp(-1.0))


def test_sheared_ou_covariance_solves_the_lyapunov_equation(flat2):
    A = np.array([[-0.5, 0.8], [0.0, -0.2]])
    transition = GaussianTransition(flat2, LinearField(A))
    s, ds = 0.7, 1e-5
    _, _, S = transition.moments(s)
    _, _, S_plus = transition.moments(s + ds)
    _, _, S_minus = transition.moments(s - ds)
    derivative = (S_plus - S_minus) / (2.0 * ds)
    assert_allclose(derivative, A @ S + S @ A.T + np.eye(2), atol=1e-7)


def test_constant_drift_moments(flat2):
    M, b, S = GaussianTransition(flat2, ConstantField([0.3, -1.0])).moments(2.0)
    assert_allclose(M, np.eye(2))
    assert_allclose(b, [0.6, -2.0])
    assert_allclose(S, 2.0 * np.eye(2))


def test_bridges_do_not_see_a_constant_drift(flat1):
    V = ConstantField([0.7])
    x = np.linspace(-2.0, 2.0, 9)[:, None]
    assert np.max(np.abs(bridge_drift(flat1, V, 0.4, x, [1.0]) - (1.0 - x) / 0.4)) < 1e-12
    spec = flat_dirac(flat1, V=V)
    total = V.value(flat1, x) + endpoint_drift(spec, 0.6, x)
    assert np.max(np.abs(total - (1.0 - x) / 0.4)) < 1e-12


def test_exact_normalization_of_the_tilt(flat1):
    spec = ConditioningSpec(flat1, [0.0], None, 2.0, DensityRatio(ExponentialTilt([0.8], 2.0)))
    c, se = estimate_normalization(spec)
    assert c == pytest.approx(1.0)
    assert se == 0.0


class SampledTilt(ExponentialTilt):
    """The exponential tilt with its closed form hidden, so c is estimated by Monte Carlo."""

    def has_closed_form(self, model):
        return False


def test_declared_normalization_is_checked(flat1, processor):
    xi = ExponentialTilt([0.8], 1.0)
    good = ConditioningSpec(flat1, [0.0], None, 1.0, DensityRatio(xi, 1.0), 50)
    batch = sample_csde(good, 10, seed=0, processor=processor, store_frames=False)
    assert batch.meta["normalization"] == 1.0
    wrong = ConditioningSpec(flat1, [0.0], None, 1.0, DensityRatio(xi, 2.0), 50)
    with pytest.raises(InvalidInputError, match="expected 1"):
        sample_csde(wrong, 10, seed=0, processor=processor)


def test_sampled_normalization(flat1, processor):
    undeclared = ConditioningSpec(flat1, [0.0], None, 1.0, DensityRatio(SampledTilt([0.5], 1.0)), 50)
    assert check_normalization(undeclared, seed=1, processor=processor, n_paths=2000) == pytest.approx(1.0, abs=0.1)
    wrong = ConditioningSpec(flat1, [0.0], None, 1.0, DensityRatio(SampledTilt([0.5], 1.0), 3.0), 50)
    with pytest.raises(InvalidInputError):
        check_normalization(wrong, seed=1, processor=processor, n_paths=2000)


def test_normalization_must_be_positive():
    with pytest.raises(InvalidInputError):
        DensityRatio(Constant(), 0.0)


# ==================== SAMPLERS ====================


def test_dirac_paths_end_on_the_target(flat1, processor):
    spec = flat_dirac(flat1, N=100)
    batch = sample_csde(spec, 20, seed=0, processor=processor)
    assert batch.attached
    assert batch.points.shape == (20, spec.free_steps + 2, 1)
    assert_allclose(batch.endpoints, 1.0)
    assert batch.times[-1] == 1.0
    assert np.all(np.isnan(batch.driver[:, -1]))
    assert batch.free_points.shape[1] == spec.free_steps + 1
    assert batch.free_times[-1] == pytest.approx(1.0 - spec.terminal_gap)


def test_bridge_marginal_matches_the_gaussian_bridge(flat1, processor):
    spec = flat_dirac(flat1, N=200)
    batch = sample_csde(spec, 2000, seed=1, processor=processor, store_frames=False)
    k = batch.time_index(0.5)
    report = ks_test(batch.points[:, k, 0], stats.norm(0.5, 0.5).cdf)
    assert report.passed, report.status_line()


@pytest.mark.parametrize("N", [200, 400])
def test_bridge_closes_in_on_the_target(flat1, processor, N):
    spec = flat_dirac(flat1, N=N)
    batch = sample_csde(spec, 2000, seed=2, processor=processor, store_frames=False)
    last_free = batch.free_points[:, -1, 0]
    assert np.mean((last_free - 1.0) ** 2) <= 2.0 * spec.terminal_gap


def test_dirac_routes_are_bitwise_identical(sphere, processor):
    spec = ConditioningSpec(sphere, sphere.origin(), None, 0.5, Dirac([0.0, 0.6, 0.8]), 100)
    a = sample_csde(spec, 12, seed=3, processor=processor)
    b = sample_enlarged(spec, 12, seed=3, processor=processor)
    assert_array_equal(a.points, b.points)
    assert_array_equal(a.frames, b.frames)
    assert b.meta["route"] == "enlarged"


@pytest.mark.parametrize("sampler", [sample_csde, sample_enlarged])
def test_symmetric_atoms_give_the_bridge_mixture(flat1, processor, sampler):
    spec = symmetric_atoms(flat1, N=200)
    batch = sampler(spec, 2000, seed=4, processor=processor, store_frames=False)
    k = batch.time_index(0.5)
    report = ks_test(batch.points[:, k, 0], mixture_cdf)
    assert report.passed, report.status_line()
    assert set(np.unique(batch.endpoints[:, 0])) <= {1.0, -1.0}


def test_enlarged_route_records_the_drawn_atom(flat1, processor):
    spec = symmetric_atoms(flat1, N=50)
    batch = sample_enlarged(spec, 50, seed=5, processor=processor)
    assert_array_equal(batch.endpoints[:, 0], np.where(batch.target_index == 0, 1.0, -1.0))


def test_density_ratio_paths_run_to_the_horizon(flat1, processor):
    spec = ConditioningSpec(flat1, [0.0], None, 1.0, DensityRatio(ExponentialTilt([0.8], 1.0)), 100)
    batch = sample_csde(spec, 2000, seed=6, processor=processor, store_frames=False)
    assert not batch.attached
    assert batch.times[-1] == pytest.approx(1.0)
    ends = batch.endpoints[:, 0]
    assert abs(ends.mean() - 0.8) < 4.0 * ends.std(ddof=1) / np.sqrt(len(ends))


def test_enlarged_route_needs_atoms(flat1):
    spec = ConditioningSpec(flat1, [0.0], None, 1.0, DensityRatio(Constant()))
    with pytest.raises(UnsupportedError):
        sample_enlarged(spec, 10, seed=0)


@pytest.mark.slow
def test_sphere_atom_frequencies(sphere, processor):
    atoms = np.array([[np.sin(1.0), 0.0, np.cos(1.0)], [0.0, np.sin(0.8), np.cos(0.8)]])
    spec = ConditioningSpec(sphere, sphere.origin(), None, 1.0, Atoms(atoms, [0.3, 0.7]), 200)
    n = 4000
    batch = sample_csde(spec, n, seed=7, processor=processor, store_frames=False)
    count = int(np.sum(batch.target_index == 0))
    report = proportion_interval("atom_frequency", count, n, 0.3)
    assert report.passed, report.details
