"""
Positive test functions used as density ratios and gradient checks.

Each observable evaluates xi(y) and its Riemannian gradient, and where the
law of X_s is explicit (Gaussian transitions on Euclidean space, the
Sphere2 eigenfunctions) also Q_s xi(x) together with its x-gradient.
"""

from typing import Any, Dict, Optional, Tuple

import numpy as np
from numpy.polynomial import hermite_e

from csde_lab.errors import ConfigError, UnsupportedError
from csde_lab.geometry import ManifoldModel

# (M, b, S): X_s given X_0 = x is Normal(M x + b, S)
Moments = Tuple[np.ndarray, np.ndarray, np.ndarray]

# Nodes of the probabilists' Gauss-Hermite rule used for 1-D Gaussian expectations
HERMITE_NODES, HERMITE_WEIGHTS = hermite_e.hermegauss(80)
HERMITE_WEIGHTS = HERMITE_WEIGHTS / np.sqrt(2.0 * np.pi)


def brownian_moments(dim: int, s: float) -> Moments:
    return np.eye(dim), np.zeros(dim), s * np.eye(dim)


class Observable:
    """Base class; subclasses set ``models`` to the kinds they live on."""

    name = "observable"
    models: Tuple[str, ...] = ()
    is_constant = False

    def __call__(self, y):
        return self.value(y)

    def supports(self, model: ManifoldModel) -> bool:
        return not self.models or model.kind in self.models

    def value(self, y) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, model: ManifoldModel, y) -> np.ndarray:
        raise NotImplementedError

    def has_closed_form(self, model: ManifoldModel) -> bool:
        return False

    def semigroup(self, model: ManifoldModel, s: float, x,
                  moments: Optional[Moments] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Q_s xi(x) and its gradient in x.

        Args:
            model: Catalog model
            s: Remaining time
            x: Points (..., D)
            moments: Gaussian transition (M, b, S) on Euclidean space; Brownian if None

        Raises:
            UnsupportedError: If no closed form exists for this model
        """
        raise UnsupportedError(f"{self.name} has no closed-form semigroup on {model!r}")

    def log_semigroup_gradient(self, model, s, x, moments=None) -> np.ndarray:
        q, dq = self.semigroup(model, s, x, moments)
        return dq / q[..., None]


class Constant(Observable):
    """xi = 1: conditioning by the true law."""

    name = "constant"
    is_constant = True

    def value(self, y):
        return np.ones(np.shape(y)[:-1])

    def gradient(self, model, y):
        return np.zeros(np.shape(y))

    def has_closed_form(self, model):
        return True

    def semigroup(self, model, s, x, moments=None):
        x = np.asarray(x, dtype=float)
        return np.ones(x.shape[:-1]), np.zeros(x.shape)


class _FlatObservable(Observable):
    models = ("euclidean",)

    def has_closed_form(self, model):
        return model.kind == "euclidean"

    @staticmethod
    def _moments(model, s, moments):
        return moments if moments is not None else brownian_moments(model.dim, s)


class ExponentialTilt(_FlatObservable):
    """xi(y) = exp(<a, y> - |a|^2 T / 2); under Brownian motion from 0 it has mean one."""

    name = "exponential_tilt"

    def __init__(self, a, horizon: float):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))
        self.horizon = float(horizon)

    def value(self, y):
        return np.exp(np.asarray(y, dtype=float) @ self.a - 0.5 * self.a @ self.a * self.horizon)

    def gradient(self, model, y):
        return self.value(y)[..., None] * self.a

    def semigroup(self, model, s, x, moments=None):
        M, b, S = self._moments(model, s, moments)
        mean = np.asarray(x, dtype=float) @ M.T + b
        q = np.exp(mean @ self.a + 0.5 * self.a @ S @ self.a - 0.5 * self.a @ self.a * self.horizon)
        return q, q[..., None] * (M.T @ self.a)

    def log_semigroup_gradient(self, model, s, x, moments=None):
        M, _, _ = self._moments(model, s, moments)
        return np.broadcast_to(M.T @ self.a, np.shape(x)).copy()


class GaussianBump(_FlatObservable):
    """xi(y) = 1 + scale * exp(-|y - center|^2 / (2 width^2))."""

    name = "gaussian_bump"

    def __init__(self, center, width: float = 1.0, scale: float = 1.0):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.width = float(width)
        self.scale = float(scale)

    def _bump(self, y):
        diff = np.asarray(y, dtype=float) - self.center
        return np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * self.width ** 2))

    def value(self, y):
        return 1.0 + self.scale * self._bump(y)

    def gradient(self, model, y):
        diff = np.asarray(y, dtype=float) - self.center
        return -self.scale * self._bump(y)[..., None] * diff / self.width ** 2

    def semigroup(self, model, s, x, moments=None):
        M, b, S = self._moments(model, s, moments)
        mean = np.asarray(x, dtype=float) @ M.T + b
        widened = self.width ** 2 * np.eye(len(self.center)) + S
        inverse = np.linalg.inv(widened)
        diff = mean - self.center
        factor = self.width ** len(self.center) / np.sqrt(np.linalg.det(widened))
        bump = factor * np.exp(-0.5 * np.einsum("...i,ij,...j->...", diff, inverse, diff))
        dmean = -bump[..., None] * (diff @ inverse)
        return 1.0 + self.scale * bump, self.scale * dmean @ M


class SmoothRamp(_FlatObservable):
    """xi(y) = 1 + tanh(<a, y>) / 2, a smoothed linear ramp."""

    name = "smooth_ramp"

    def __init__(self, a):
        self.a = np.atleast_1d(np.asarray(a, dtype=float))

    def value(self, y):
        return 1.0 + 0.5 * np.tanh(np.asarray(y, dtype=float) @ self.a)

    def gradient(self, model, y):
        z = np.asarray(y, dtype=float) @ self.a
        return (0.5 / np.cosh(z) ** 2)[..., None] * self.a

    def semigroup(self, model, s, x, moments=None):
        # <a, X_s> is Normal(<a, mean>, a^T S a): one-dimensional Gauss-Hermite
        M, b, S = self._moments(model, s, moments)
        mean = np.asarray(x, dtype=float) @ M.T + b
        sd = np.sqrt(self.a @ S @ self.a)
        z = (mean @ self.a)[..., None] + sd * HERMITE_NODES
        q = 1.0 + 0.5 * np.sum(HERMITE_WEIGHTS * np.tanh(z), axis=-1)
        slope = 0.5 * np.sum(HERMITE_WEIGHTS / np.cosh(z) ** 2, axis=-1)
        return q, slope[..., None] * (M.T @ self.a)


class ZonalHarmonic(Observable):
    """xi(y) = 1 + amplitude * <y, e> on Sphere2, an l = 1 eigenfunction."""

    name = "zonal_harmonic"
    models = ("sphere2",)

    def __init__(self, axis, amplitude: float = 0.5):
        axis = np.asarray(axis, dtype=float)
        self.axis = axis / np.linalg.norm(axis)
        self.amplitude = float(amplitude)
        if not 0.0 < abs(self.amplitude) < 1.0:
            raise ConfigError(f"amplitude must lie in (-1, 1) for positivity, got {amplitude}")

    def value(self, y):
        return 1.0 + self.amplitude * (np.asarray(y, dtype=float) @ self.axis)

    def gradient(self, model, y):
        y = np.asarray(y, dtype=float)
        return self.amplitude * (self.axis - (y @ self.axis)[..., None] * y)

    def has_closed_form(self, model):
        return model.kind == "sphere2"

    def semigroup(self, model, s, x, moments=None):
        if model.kind != "sphere2":
            return super().semigroup(model, s, x, moments)
        x = np.asarray(x, dtype=float)
        decay = self.amplitude * np.exp(-s)
        q = 1.0 + decay * (x @ self.axis)
        return q, decay * (self.axis - (x @ self.axis)[..., None] * x)


OBSERVABLE_CATALOG = {
    "constant": Constant,
    "exponential_tilt": ExponentialTilt,
    "gaussian_bump": GaussianBump,
    "smooth_ramp": SmoothRamp,
    "zonal_harmonic": ZonalHarmonic,
}


def make_observable(spec: Optional[Dict[str, Any]], model: ManifoldModel,
                    horizon: float = 1.0) -> Observable:
    """Build an observable from a config mapping such as ``{"name": "smooth_ramp", "a": [1.0]}``."""
    if not spec:
        return Constant()
    name = str(spec.get("name", "constant")).lower()
    if name not in OBSERVABLE_CATALOG:
        raise ConfigError(
            f"Unknown observable '{name}'. Valid names: {', '.join(sorted(OBSERVABLE_CATALOG))}"
        )
    try:
        if name == "constant":
            obs = Constant()
        elif name == "exponential_tilt":
            obs = ExponentialTilt(spec["a"], spec.get("horizon", horizon))
        elif name == "gaussian_bump":
            obs = GaussianBump(spec["center"], spec.get("width", 1.0), spec.get("scale", 1.0))
        elif name == "smooth_ramp":
            obs = SmoothRamp(spec["a"])
        else:
            obs = ZonalHarmonic(spec.get("axis", [0.0, 0.0, 1.0]), spec.get("amplitude", 0.5))
    except KeyError as exc:
        raise ConfigError(f"Observable '{name}' is missing parameter {exc}") from exc
    if not obs.supports(model):
        raise ConfigError(f"Observable '{name}' is not available on {model!r}")
    return obs
