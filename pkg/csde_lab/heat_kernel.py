"""
Heat kernels of 1/2 Laplacian on the model catalog.

Closed forms on Euclidean space and Hyperbolic3, a wrapped Gaussian / Fourier
pair on the Circle and a Legendre series on Sphere2. Besides point values the
module provides log-gradients in the first argument, radial densities of
d(x, X_t), exact samplers and application of the semigroup Q_t to a test
function.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
from numpy.polynomial import legendre
from scipy import integrate
from scipy.special import gammaln, logsumexp

from csde_lab.errors import InvalidInputError, OutOfRangeError
from csde_lab.geometry import CUT_LOCUS_GUARD, ManifoldModel
from csde_lab.utils import STREAM_SAMPLING, path_stream

logger = logging.getLogger(__name__)

# Smallest time at which the series kernels are certified
T_MIN = 0.01

# Circle: wrapped Gaussian below this time, Fourier series from it on
CIRCLE_SWITCH_T = 1.0

# Series terms are dropped once they fall below this absolute size
SERIES_TAIL = 1e-17

# Below this fraction of sum|c_l| the Legendre sum has lost its digits
SERIES_FLOOR_REL = 1e-10

MAX_LEGENDRE_DEGREE = 4000

SERIES_KINDS = ("circle", "sphere2")

# Points per vectorized quadrature call
QUADRATURE_BLOCK = 32


@dataclass(frozen=True)
class KernelEval:
    """One evaluation of q_t(x, y) with its bookkeeping."""

    kind: str
    t: float
    value: np.ndarray
    log_value: np.ndarray
    truncation_terms: int


def _check_time(model: ManifoldModel, t: float) -> float:
    t = float(t)
    if not np.isfinite(t) or t <= 0.0:
        raise OutOfRangeError(f"Heat kernel time must be positive, got {t}")
    if model.kind in SERIES_KINDS and t < T_MIN:
        raise OutOfRangeError(
            f"Heat kernel on {model!r} is certified for t >= {T_MIN}, got {t}"
        )
    return t


# ==================== SPHERE2 LEGENDRE SERIES ====================


@lru_cache(maxsize=256)
def _sphere_coefficients(t: float) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Legendre coefficients (2l+1)/(4 pi) exp(-l(l+1)t/2), their derivative
    series and sum|c_l|. Truncated once terms drop below SERIES_TAIL past the peak.
    """
    peak = int(np.ceil(1.0 / np.sqrt(t)))
    coeffs = []
    for l in range(MAX_LEGENDRE_DEGREE + 1):
        c = (2 * l + 1) / (4.0 * np.pi) * np.exp(-0.5 * l * (l + 1) * t)
        coeffs.append(c)
        if l > peak and c < SERIES_TAIL:
            break
    else:
        logger.warning("Legendre series truncated at degree %d for t=%g", MAX_LEGENDRE_DEGREE, t)
    coeffs = np.array(coeffs)
    coeffs.setflags(write=False)
    deriv = legendre.legder(coeffs) if len(coeffs) > 1 else np.zeros(1)
    deriv.setflags(write=False)
    logger.debug("Sphere2 kernel at t=%g uses %d Legendre terms", t, len(coeffs))
    return coeffs, deriv, float(np.sum(np.abs(coeffs)))


def _sphere_asymptotic(t: float, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Leading small-time expansion: log value and d/dtheta of the log."""
    theta = np.minimum(theta, np.pi - CUT_LOCUS_GUARD)
    safe = np.maximum(theta, 1e-300)
    sin = np.sin(safe)
    ratio = np.where(theta < 1e-6, 1.0 + theta ** 2 / 6.0, safe / sin)
    log_value = -np.log(2.0 * np.pi * t) - theta ** 2 / (2.0 * t) + 0.5 * np.log(ratio) + t / 8.0
    # d/dtheta of 0.5 log(theta / sin theta) is 0.5 (1/theta - cot theta) ~ theta/6
    correction = np.where(theta < 1e-6, theta / 6.0, 0.5 * (1.0 / safe - np.cos(safe) / sin))
    return log_value, -theta / t + correction


def _sphere_radial(t: float, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
    coeffs, deriv, scale = _sphere_coefficients(t)
    z = np.cos(theta)
    value = legendre.legval(z, coeffs)
    dvalue_dz = legendre.legval(z, deriv)
    reliable = value > SERIES_FLOOR_REL * scale
    safe_value = np.where(reliable, value, 1.0)
    log_series = np.log(safe_value)
    dlog_series = -np.sin(theta) * dvalue_dz / safe_value
    if np.all(reliable):
        return log_series, dlog_series, len(coeffs)
    log_asym, dlog_asym = _sphere_asymptotic(t, theta)
    return (np.where(reliable, log_series, log_asym),
            np.where(reliable, dlog_series, dlog_asym),
            len(coeffs))


# ==================== RADIAL PROFILES ====================


def _coth_gap(r: np.ndarray) -> np.ndarray:
    """1/r - coth(r), stable at r = 0."""
    small = r < 1e-4
    safe = np.where(small, 1.0, r)
    return np.where(small, -r / 3.0 + r ** 3 / 45.0, 1.0 / safe - 1.0 / np.tanh(safe))


def log_radial_kernel(model: ManifoldModel, t: float, r) -> Tuple[np.ndarray, np.ndarray, int]:
    """
    log k_t(r) and d/dr log k_t(r) for the radially symmetric kernels.

    Returns:
        (log value, radial derivative of the log, number of series terms)
    """
    r = np.asarray(r, dtype=float)
    if model.kind == "euclidean":
        return -0.5 * model.dim * np.log(2.0 * np.pi * t) - r ** 2 / (2.0 * t), -r / t, 1
    if model.kind == "sphere2":
        return _sphere_radial(t, r)
    if model.kind == "hyperbolic3":
        small = r < 1e-8
        ratio = np.where(small, 1.0, r / np.sinh(np.where(small, 1.0, r)))
        log_value = -1.5 * np.log(2.0 * np.pi * t) - 0.5 * t + np.log(ratio) - r ** 2 / (2.0 * t)
        return log_value, _coth_gap(r) - r / t, 1
    if model.kind == "circle":
        return _circle_log_kernel(t, r)
    raise InvalidInputError(f"No radial kernel for {model!r}")


def _circle_wrap_count(t: float) -> int:
    return int(np.ceil(np.sqrt(2.0 * t * 45.0) / (2.0 * np.pi))) + 1


def _circle_log_kernel(t: float, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
    """Log kernel and its theta-derivative as a function of the signed angle."""
    theta = np.asarray(theta, dtype=float)
    if t < CIRCLE_SWITCH_T:
        K = _circle_wrap_count(t)
        shifts = _wrap_shifts(K)
        z = theta[..., None] + shifts
        exponents = -z ** 2 / (2.0 * t)
        log_value = logsumexp(exponents, axis=-1) - 0.5 * np.log(2.0 * np.pi * t)
        weights = np.exp(exponents - logsumexp(exponents, axis=-1, keepdims=True))
        return log_value, -np.sum(weights * z, axis=-1) / t, 2 * K + 1
    value, dvalue, terms = circle_fourier_kernel(t, theta, with_derivative=True)
    return np.log(value), dvalue / value, terms


def _wrap_shifts(K: int) -> np.ndarray:
    return 2.0 * np.pi * np.arange(-K, K + 1)


def circle_fourier_kernel(t: float, theta, with_derivative: bool = False):
    """
    Fourier form of the Circle kernel, (1/2pi)(1 + 2 sum_n exp(-n^2 t/2) cos(n theta)).

    Args:
        t: Time (t >= T_MIN)
        theta: Angle difference(s)
        with_derivative: Also return d/dtheta and the number of terms

    Returns:
        The kernel value, or (value, derivative, terms) when requested
    """
    t = float(t)
    if t < T_MIN:
        raise OutOfRangeError(f"Circle Fourier kernel is certified for t >= {T_MIN}, got {t}")
    theta = np.asarray(theta, dtype=float)
    n_max = int(np.ceil(np.sqrt(2.0 * -np.log(SERIES_TAIL) / t))) + 1
    n = np.arange(1, n_max + 1)
    decay = np.exp(-0.5 * n ** 2 * t)
    angles = theta[..., None] * n
    value = (1.0 + 2.0 * np.sum(decay * np.cos(angles), axis=-1)) / (2.0 * np.pi)
    if not with_derivative:
        return value
    dvalue = -2.0 * np.sum(n * decay * np.sin(angles), axis=-1) / (2.0 * np.pi)
    return value, dvalue, n_max


def circle_wrapped_kernel(t: float, theta) -> np.ndarray:
    """Wrapped-Gaussian form of the Circle kernel, valid for any t > 0."""
    theta = np.asarray(theta, dtype=float)
    K = _circle_wrap_count(t)
    z = theta[..., None] + _wrap_shifts(K)
    return np.sum(np.exp(-z ** 2 / (2.0 * t)), axis=-1) / np.sqrt(2.0 * np.pi * t)


# ==================== PUBLIC OPERATIONS ====================


def evaluate_kernel(model: ManifoldModel, t: float, x, y) -> KernelEval:
    """q_t(x, y) with value, log value and the number of series terms used."""
    t = _check_time(model, t)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if model.kind == "circle":
        theta = model.log(x, y)[..., 0]
        log_value, _, terms = _circle_log_kernel(t, theta)
    else:
        r = model.distance(x, y)
        log_value, _, terms = log_radial_kernel(model, t, r)
    return KernelEval(model.kind, t, np.exp(log_value), log_value, terms)


def log_heat_kernel(model: ManifoldModel, t: float, x, y) -> np.ndarray:
    """
    log q_t(x, y) for the drift-free generator 1/2 Laplacian.

    Args:
        model: Catalog model
        t: Time; series kernels (Circle, Sphere2) need t >= T_MIN
        x, y: Points (broadcast over leading axes)

    Returns:
        Array of log kernel values

    Raises:
        OutOfRangeError: If t is not positive or below T_MIN for a series kernel
    """
    return evaluate_kernel(model, t, x, y).log_value


def heat_kernel(model: ManifoldModel, t: float, x, y) -> np.ndarray:
    return np.exp(log_heat_kernel(model, t, x, y))


def grad_log_heat_kernel(model: ManifoldModel, t: float, x, y,
                         return_clamped: bool = False):
    """
    Gradient in x of log q_t(x, y), as an ambient tangent vector at x.

    On Sphere2 the radius is clamped to pi - CUT_LOCUS_GUARD near the cut
    locus; clamped entries are reported through ``return_clamped``.

    Returns:
        Tangent vector(s) at x, and optionally a boolean clamp mask
    """
    t = _check_time(model, t)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    if model.kind == "circle":
        theta = model.log(x, y)[..., 0]
        _, dlog, _ = _circle_log_kernel(t, theta)
        grad = -dlog[..., None]
        clamped = np.zeros(theta.shape, dtype=bool)
    elif model.kind == "euclidean":
        grad = (y - x) / t
        clamped = np.zeros(grad.shape[:-1], dtype=bool)
    else:
        r, unit = model.radial(x, y)
        clamped = np.zeros(r.shape, dtype=bool)
        if model.kind == "sphere2":
            limit = np.pi - CUT_LOCUS_GUARD
            clamped = r > limit
            if np.any(clamped):
                logger.warning("Clamped %d radii to the cut-locus guard", int(np.sum(clamped)))
            r = np.minimum(r, limit)
        _, dlog, _ = log_radial_kernel(model, t, r)
        grad = -dlog[..., None] * unit

    if return_clamped:
        return grad, clamped
    return grad


def radial_density(model: ManifoldModel, t: float, r) -> np.ndarray:
    """
    Density of d(x, X_t) under the heat kernel: q_t(r) times the area of the
    geodesic sphere of radius r.
    """
    t = _check_time(model, t)
    r = np.asarray(r, dtype=float)
    if model.kind == "circle":
        log_value, _, _ = _circle_log_kernel(t, r)
        return 2.0 * np.exp(log_value)
    log_value, _, _ = log_radial_kernel(model, t, r)
    if model.kind == "euclidean":
        d = model.dim
        log_area = np.log(2.0) + 0.5 * d * np.log(np.pi) - gammaln(0.5 * d)
        return np.exp(log_value + log_area) * r ** (d - 1)
    if model.kind == "sphere2":
        return 2.0 * np.pi * np.sin(r) * np.exp(log_value)
    return 4.0 * np.pi * np.sinh(r) ** 2 * np.exp(log_value)


def radial_range(model: ManifoldModel, t: float) -> float:
    """Upper end of the radial support carrying all but a negligible mass."""
    if model.kind == "circle":
        return np.pi
    if model.kind == "sphere2":
        return np.pi
    if model.kind == "hyperbolic3":
        return t + 12.0 * np.sqrt(t) + 4.0
    return np.sqrt(t) * (12.0 + np.sqrt(model.dim))


def radial_bin_probabilities(model: ManifoldModel, t: float, edges) -> np.ndarray:
    """Probabilities of the radial law on consecutive bins by adaptive quadrature."""
    edges = np.asarray(edges, dtype=float)
    return np.array([
        integrate.quad(lambda r: float(radial_density(model, t, r)), a, b, limit=200)[0]
        for a, b in zip(edges[:-1], edges[1:])
    ])


def radial_cdf(model: ManifoldModel, t: float, n_grid: int = 8193) -> Tuple[np.ndarray, np.ndarray]:
    """Tabulated CDF of d(x, X_t) on a uniform radius grid."""
    r = np.linspace(0.0, radial_range(model, t), n_grid)
    cdf = integrate.cumulative_trapezoid(radial_density(model, t, r), r, initial=0.0)
    return r, cdf / cdf[-1]


def sample_heat_kernel(model: ManifoldModel, t: float, x, n: int,
                       rng: np.random.Generator) -> np.ndarray:
    """
    Exact draws from q_t(x, .).

    Euclidean and Circle use (wrapped) Gaussians; Sphere2 and Hyperbolic3 draw
    the radius by inverse CDF and the direction uniformly in the tangent space.
    """
    t = _check_time(model, t)
    x = model.check_point(x)
    if model.kind == "euclidean":
        return x + np.sqrt(t) * rng.standard_normal((n, model.dim))
    if model.kind == "circle":
        return np.mod(x + np.sqrt(t) * rng.standard_normal((n, 1)), 2.0 * np.pi)

    grid, cdf = radial_cdf(model, t)
    radii = np.interp(rng.random(n), cdf, grid)
    directions = rng.standard_normal((n, model.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    frame = model.default_frame(x)
    v = (radii[:, None] * directions) @ frame.T
    return model.exp(np.broadcast_to(x, v.shape), v)


# ==================== SEMIGROUP ====================


def _circle_nodes(n: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes = (np.arange(n) * (2.0 * np.pi / n))[:, None]
    return nodes, np.full(n, 2.0 * np.pi / n)


def _sphere_nodes(model: ManifoldModel, t: float, x: np.ndarray, n_r: int, n_phi: int):
    """Geodesic polar product rule around each x: Gauss-Legendre in r, uniform in phi."""
    a = min(np.pi, 15.0 * np.sqrt(t))
    g, gw = legendre.leggauss(n_r)
    r = 0.5 * a * (g + 1.0)
    wr = 0.5 * a * gw * np.sin(r)
    phi = np.arange(n_phi) * (2.0 * np.pi / n_phi)
    w = (wr[:, None] * np.full(n_phi, 2.0 * np.pi / n_phi)).ravel()
    frames = np.stack([model.default_frame(xi) for xi in x.reshape(-1, 3)])
    dirs = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    tangents = np.einsum("bij,pj->bpi", frames, dirs)
    cos_r, sin_r = np.cos(r), np.sin(r)
    xb = x.reshape(-1, 3)
    nodes = (cos_r[None, :, None, None] * xb[:, None, None, :]
             + sin_r[None, :, None, None] * tangents[:, None, :, :])
    return nodes.reshape(xb.shape[0], -1, 3), w


def _quadrature(model, t, xi, x, resolution, gradient=False):
    """Returns Q_t xi(x) and optionally the x-gradient of Q_t xi, for a batch of x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if model.kind == "circle":
        nodes, w = _circle_nodes(resolution)
        y = np.broadcast_to(nodes[None], (x.shape[0],) + nodes.shape)
    else:
        y, w = _sphere_nodes(model, t, x, resolution // 2, resolution)
    values = np.asarray(xi(y), dtype=float)
    if np.any(values < 0.0):
        raise InvalidInputError("Test function took a negative value")
    xb = x[:, None, :]
    kernel = heat_kernel(model, t, xb, y)
    q = np.sum(kernel * values * w, axis=-1)
    if not gradient:
        return q, None
    grads = grad_log_heat_kernel(model, t, np.broadcast_to(xb, y.shape), y)
    dq = np.sum((kernel * values * w)[..., None] * grads, axis=-2)
    return q, dq


def semigroup_apply(model: ManifoldModel, t: float, xi: Callable, x,
                    method: str = "auto", n_samples: int = 100000,
                    seed: int = 0, resolution: int = 256) -> Tuple[float, float]:
    """
    Q_t xi(x) = integral of q_t(x, y) xi(y) dy.

    Args:
        model: Catalog model
        t: Time
        xi: Bounded positive function of points (vectorized over leading axes)
        x: Evaluation point
        method: "quadrature" (Circle, Sphere2), "monte-carlo", or "auto"
        n_samples: Monte Carlo sample size
        seed: Monte Carlo seed
        resolution: Angular resolution of the quadrature rule

    Returns:
        (value, error estimate); the quadrature error is the change against a
        rule of half the resolution, the Monte Carlo error one standard error

    Raises:
        InvalidInputError: If xi is negative somewhere it is evaluated
    """
    t = _check_time(model, t)
    x = model.check_point(x)
    if method == "auto":
        method = "quadrature" if model.kind in SERIES_KINDS else "monte-carlo"
    if method == "quadrature":
        if model.kind not in SERIES_KINDS:
            raise InvalidInputError(f"Quadrature is available on Circle and Sphere2, not {model!r}")
        fine, _ = _quadrature(model, t, xi, x, resolution)
        coarse, _ = _quadrature(model, t, xi, x, resolution // 2)
        return float(fine[0]), float(abs(fine[0] - coarse[0]))
    if method != "monte-carlo":
        raise InvalidInputError(f"Unknown semigroup method '{method}'")

    samples = sample_heat_kernel(model, t, x, n_samples, path_stream(seed, 0, STREAM_SAMPLING))
    values = np.asarray(xi(samples), dtype=float)
    if np.any(values < 0.0):
        raise InvalidInputError("Test function took a negative value")
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(n_samples))


def semigroup_log_gradient(model: ManifoldModel, t: float, xi: Callable, x,
                           resolution: int = 128) -> np.ndarray:
    """
    Gradient of log Q_t xi at a batch of points, by differentiating under the
    quadrature (Circle and Sphere2).
    """
    t = _check_time(model, t)
    if model.kind not in SERIES_KINDS:
        raise InvalidInputError(f"Quadrature gradients are available on Circle and Sphere2, not {model!r}")
    x = np.asarray(x, dtype=float)
    shape = x.shape
    flat = x.reshape(-1, shape[-1])
    grad = np.empty_like(flat)
    for start in range(0, flat.shape[0], QUADRATURE_BLOCK):
        block = flat[start:start + QUADRATURE_BLOCK]
        q, dq = _quadrature(model, t, xi, block, resolution, gradient=True)
        grad[start:start + QUADRATURE_BLOCK] = dq / q[:, None]
    return model.project_tangent(x, grad.reshape(shape))
