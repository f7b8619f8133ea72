import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, stats

from csde_lab.errors import InvalidInputError, OutOfRangeError
from csde_lab.heat_kernel import (
    T_MIN,
    circle_fourier_kernel,
    circle_wrapped_kernel,
    evaluate_kernel,
    grad_log_heat_kernel,
    heat_kernel,
    log_heat_kernel,
    radial_cdf,
    radial_density,
    radial_range,
    sample_heat_kernel,
    semigroup_apply,
    semigroup_log_gradient,
)
from csde_lab.geometry import make_model

NORTH = np.array([0.0, 0.0, 1.0])


# ==================== POINT VALUES ====================


def test_euclidean_kernel_on_the_diagonal(flat1, flat2):
    assert heat_kernel(flat1, 1.0, [0.0], [0.0]) == pytest.approx(1.0 / np.sqrt(2.0 * np.pi))
    assert heat_kernel(flat2, 1.0, [0.0, 0.0], [0.0, 0.0]) == pytest.approx(0.159155, abs=1e-6)


def test_sphere_kernel_flattens_at_large_time(sphere):
    y = np.array([0.48, -0.6, 0.64])
    assert heat_kernel(sphere, 50.0, NORTH, y) == pytest.approx(1.0 / (4.0 * np.pi), rel=1e-12)


def test_hyperbolic_kernel_closed_form(hyperbolic):
    y = np.array([np.cosh(1.0), np.sinh(1.0), 0.0, 0.0])
    assert heat_kernel(hyperbolic, 1.0, hyperbolic.origin(), y) == pytest.approx(0.01988, abs=1e-5)


def test_kernel_is_symmetric(sphere, sphere_points):
    x, y = sphere_points(20), sphere_points(20)
    assert_allclose(log_heat_kernel(sphere, 0.3, x, y), log_heat_kernel(sphere, 0.3, y, x), rtol=1e-12)


def test_series_kernels_reject_small_times(sphere, circle):
    with pytest.raises(OutOfRangeError):
        heat_kernel(sphere, 0.5 * T_MIN, NORTH, NORTH)
    with pytest.raises(OutOfRangeError):
        heat_kernel(circle, 0.5 * T_MIN, [0.0], [0.1])


def test_closed_forms_accept_small_times(flat1):
    assert np.isfinite(log_heat_kernel(flat1, 1e-4, [0.0], [0.01]))


def test_non_positive_time_is_rejected(flat1):
    with pytest.raises(OutOfRangeError):
        heat_kernel(flat1, 0.0, [0.0], [0.0])


def test_evaluation_reports_series_terms(sphere, flat1):
    assert evaluate_kernel(sphere, 0.1, NORTH, NORTH).truncation_terms > 5
    assert evaluate_kernel(flat1, 0.1, [0.0], [0.0]).truncation_terms == 1


def test_sphere_kernel_near_the_antipode_at_small_time(sphere):
    angle = np.pi - 0.05
    y = np.array([np.sin(angle), 0.0, np.cos(angle)])
    value = log_heat_kernel(sphere, T_MIN, NORTH, y)
    assert np.isfinite(value)
    assert value < log_heat_kernel(sphere, T_MIN, NORTH, [np.sin(1.0), 0.0, np.cos(1.0)])


# ==================== CIRCLE ====================


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0, 3.0])
def test_circle_fourier_and_wrapped_forms_agree(t):
    theta = np.linspace(-np.pi, np.pi, 41)
    assert_allclose(circle_fourier_kernel(t, theta), circle_wrapped_kernel(t, theta), atol=1e-10)


def test_circle_kernel_integrates_to_one(circle):
    mass, _ = integrate.quad(lambda y: float(heat_kernel(circle, 0.7, [0.3], [y])), 0.0, 2.0 * np.pi)
    assert mass == pytest.approx(1.0, abs=1e-10)


# ==================== GRADIENTS ====================


def test_euclidean_gradient(flat2):
    assert_allclose(grad_log_heat_kernel(flat2, 0.5, [0.0, 0.0], [1.0, -1.0]), [2.0, -2.0])


def test_sphere_gradient_matches_finite_difference(sphere):
    u_frame = sphere.default_frame(NORTH)
    y = np.array([np.sin(1.2) * np.cos(0.4), np.sin(1.2) * np.sin(0.4), np.cos(1.2)])
    t, step = 0.4, 1e-5
    grad = grad_log_heat_kernel(sphere, t, NORTH, y)
    for j in range(2):
        e = u_frame[:, j]
        plus = log_heat_kernel(sphere, t, sphere.exp(NORTH, step * e), y)
        minus = log_heat_kernel(sphere, t, sphere.exp(NORTH, -step * e), y)
        assert grad @ e == pytest.approx((plus - minus) / (2.0 * step), abs=1e-6)


def test_hyperbolic_gradient_points_towards_target(hyperbolic):
    y = np.array([np.cosh(1.0), np.sinh(1.0), 0.0, 0.0])
    grad = grad_log_heat_kernel(hyperbolic, 1.0, hyperbolic.origin(), y)
    assert grad[1] > 0.0
    assert_allclose(grad[[0, 2, 3]], 0.0, atol=1e-14)


def test_circle_gradient_matches_finite_difference(circle):
    step = 1e-6
    grad = grad_log_heat_kernel(circle, 0.5, [0.2], [0.9])[0]
    numeric = (log_heat_kernel(circle, 0.5, [0.2 + step], [0.9])
               - log_heat_kernel(circle, 0.5, [0.2 - step], [0.9])) / (2.0 * step)
    assert grad == pytest.approx(float(numeric), abs=1e-7)


def test_sphere_gradient_clamps_near_the_antipode(sphere):
    y = np.array([np.sin(np.pi - 1e-5), 0.0, np.cos(np.pi - 1e-5)])
    grad, clamped = grad_log_heat_kernel(sphere, 0.5, NORTH, y, return_clamped=True)
    assert bool(clamped)
    assert np.all(np.isfinite(grad))


# ==================== RADIAL LAW ====================


@pytest.mark.parametrize("kind, dim, t", [
    ("euclidean", 1, 1.0),
    ("euclidean", 3, 0.5),
    ("sphere2", None, 0.05),
    ("sphere2", None, 2.0),
    ("hyperbolic3", None, 1.0),
])
def test_radial_density_integrates_to_one(kind, dim, t):
    model = make_model(kind, dim)
    mass, _ = integrate.quad(lambda r: float(radial_density(model, t, r)), 0.0,
                             radial_range(model, t), limit=200)
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_radial_density_examples(sphere):
    assert radial_density(make_model("euclidean", 3), 1.0, 1.0) == pytest.approx(0.48394, abs=1e-5)
    assert radial_density(sphere, 50.0, 0.5 * np.pi) == pytest.approx(0.5, abs=1e-10)


def test_radial_cdf_is_monotone(hyperbolic):
    grid, cdf = radial_cdf(hyperbolic, 0.5)
    assert cdf[0] == 0.0 and cdf[-1] == pytest.approx(1.0)
    assert np.all(np.diff(cdf) >= 0.0)
    assert grid[-1] == pytest.approx(radial_range(hyperbolic, 0.5))


@pytest.mark.parametrize("kind", ["sphere2", "hyperbolic3"])
def test_sampled_radii_follow_the_radial_law(kind):
    model = make_model(kind)
    x = model.origin()
    t = 0.6
    samples = sample_heat_kernel(model, t, x, 4000, np.random.default_rng(7))
    assert np.max(np.abs(model.point_residual(samples))) < 1e-10
    grid, cdf = radial_cdf(model, t)
    result = stats.kstest(model.distance(x, samples), lambda r: np.interp(r, grid, cdf))
    assert result.pvalue > 0.001


# ==================== SEMIGROUP ====================


def test_semigroup_of_one_is_one(sphere):
    value, err = semigroup_apply(sphere, 0.3, lambda y: np.ones(y.shape[:-1]), [0.6, 0.0, 0.8])
    assert value == pytest.approx(1.0, abs=1e-8)
    assert err < 1e-6


def test_zonal_harmonic_is_an_eigenfunction(sphere):
    x = np.array([0.6, 0.0, 0.8])
    t = 0.7
    value, _ = semigroup_apply(sphere, t, lambda y: 1.0 + 0.5 * y[..., 2], x)
    assert value == pytest.approx(1.0 + 0.5 * np.exp(-t) * 0.8, abs=1e-8)


def test_zonal_log_gradient(sphere):
    x = np.array([[0.6, 0.0, 0.8], [0.0, 0.28, -0.96]])
    t = 0.4
    grad = semigroup_log_gradient(sphere, t, lambda y: 1.0 + 0.5 * y[..., 2], x)
    q = 1.0 + 0.5 * np.exp(-t) * x[:, 2]
    tangent = NORTH - x[:, 2:3] * x
    assert_allclose(grad, (0.5 * np.exp(-t) / q)[:, None] * tangent, atol=1e-7)


def test_chapman_kolmogorov_on_the_sphere(sphere):
    x = np.array([0.0, 0.6, 0.8])
    y = np.array([0.48, -0.6, 0.64])
    value, _ = semigroup_apply(sphere, 0.3, lambda z: heat_kernel(sphere, 0.2, z, y), x)
    assert value == pytest.approx(float(heat_kernel(sphere, 0.5, x, y)), rel=1e-6)


def test_monte_carlo_semigroup_of_exponential_tilt(flat1):
    a, t = 0.8, 1.0
    value, err = semigroup_apply(
        flat1, t, lambda y: np.exp(a * y[..., 0] - 0.5 * a * a * t), [0.0],
        method="monte-carlo", n_samples=200000, seed=3,
    )
    assert abs(value - 1.0) < 4.0 * err
    assert err < 0.01


def test_semigroup_rejects_negative_test_functions(sphere):
    with pytest.raises(InvalidInputError, match="negative"):
        semigroup_apply(sphere, 0.3, lambda y: y[..., 2], NORTH)


def test_quadrature_needs_a_series_kernel(flat1, hyperbolic):
    with pytest.raises(InvalidInputError):
        semigroup_apply(flat1, 1.0, lambda y: np.ones(y.shape[:-1]), [0.0], method="quadrature")
    with pytest.raises(InvalidInputError):
        semigroup_log_gradient(hyperbolic, 1.0, lambda y: np.ones(y.shape[:-1]), hyperbolic.origin())
