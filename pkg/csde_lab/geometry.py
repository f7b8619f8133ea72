"""
Exact differential geometry of the model-space catalog.

The catalog holds four complete Riemannian manifolds with closed-form
geodesics, parallel transport and Ricci curvature:

- Euclidean(d): points in R^d, flat metric
- Circle: one angle in [0, 2*pi), flat metric, nontrivial topology
- Sphere2: unit sphere in R^3
- Hyperbolic3: upper sheet of the unit hyperboloid in Minkowski R^4

Points, tangent vectors and frames are plain numpy arrays in ambient
coordinates. Every routine broadcasts over leading axes, so a whole batch of
Monte Carlo paths can be advanced with one call. A frame is stored as a
(..., ambient_dim, d) array whose columns are the images u(e_1), ..., u(e_d).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from csde_lab.errors import ConfigError, CutLocusError, InvalidInputError

logger = logging.getLogger(__name__)

# Tolerances for validating user input (outputs are held to much tighter residuals)
POINT_TOL = 1e-8
TANGENCY_TOL = 1e-8
FRAME_TOL = 1e-9

# log_map refuses pairs closer than this to the antipode on Sphere2
CUT_LOCUS_GUARD = 1e-3

TWO_PI = 2.0 * np.pi


def _dot(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Euclidean inner product over the last axis (broadcasting)."""
    return np.sum(u * v, axis=-1)


def _sinhc(z: np.ndarray) -> np.ndarray:
    """sinh(z)/z with the removable singularity filled in."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z * z / 6.0, np.sinh(safe) / safe)


def _theta_over_sin(theta: np.ndarray, s: np.ndarray) -> np.ndarray:
    """theta / s where s = sin(theta) or sinh(theta), stable at theta = 0."""
    small = s < 1e-12
    return np.where(small, 1.0 + theta * theta / 6.0, theta / np.where(small, 1.0, s))


class ManifoldModel:
    """
    Base class for the model spaces.

    Subclasses provide the metric, the constraint projection and the closed-form
    geodesic primitives. The public operations at module level (exp_map,
    log_map, parallel_transport, ...) validate their inputs and then call the
    unchecked methods defined here.
    """

    kind = "abstract"
    curvature = 0.0

    def __init__(self, dim: int, ambient_dim: int):
        self.dim = int(dim)
        self.ambient_dim = int(ambient_dim)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(d={self.dim})"

    # ---------------- metric ----------------

    def inner(self, x: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return _dot(u, v)

    def norm(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.sqrt(np.maximum(self.inner(x, v, v), 0.0))

    # ---------------- constraints ----------------

    def project_point(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float)

    def project_tangent(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float)

    def point_residual(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(np.shape(x)[:-1])

    def tangency_residual(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(v))[:-1])

    def check_point(self, x, name: str = "point") -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.ambient_dim:
            raise InvalidInputError(
                f"{name} has {x.shape[-1]} coordinates, {self!r} expects {self.ambient_dim}"
            )
        residual = np.max(np.abs(self.point_residual(x)), initial=0.0)
        if not np.isfinite(residual) or residual > POINT_TOL:
            raise InvalidInputError(
                f"{name} is not on {self!r}: constraint residual {residual:.3e}"
            )
        return self.project_point(x)

    def check_tangent(self, x: np.ndarray, v, name: str = "vector") -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.ambient_dim:
            raise InvalidInputError(
                f"{name} has {v.shape[-1]} coordinates, {self!r} expects {self.ambient_dim}"
            )
        scale = 1.0 + np.max(np.abs(v), initial=0.0)
        residual = np.max(np.abs(self.tangency_residual(x, v)), initial=0.0)
        if not np.isfinite(residual) or residual > TANGENCY_TOL * scale:
            raise InvalidInputError(
                f"{name} is not tangent at the base point: residual {residual:.3e}"
            )
        return v

    # ---------------- geodesics ----------------

    def exp(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        return x + v

    def radial(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Distance and unit initial direction of the minimizing geodesic x -> y.

        Never raises: at x = y (and at the antipode on Sphere2) the direction is
        returned as the zero vector.
        """
        diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        r = np.sqrt(_dot(diff, diff))
        unit = diff / np.where(r > 0.0, r, 1.0)[..., None]
        return r, unit

    def log(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) - np.asarray(x, dtype=float)

    def distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.radial(x, y)[0]

    def transport(self, x: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
        return np.broadcast_to(w, np.broadcast_shapes(np.shape(x), np.shape(v), np.shape(w))).copy()

    def transport_frame(self, x: np.ndarray, v: np.ndarray, frame: np.ndarray) -> np.ndarray:
        """Transport every column of ``frame`` along t -> exp_x(t v)."""
        cols = np.swapaxes(frame, -1, -2)
        moved = self.transport(x[..., None, :], v[..., None, :], cols)
        return np.swapaxes(moved, -1, -2)

    # ---------------- curvature ----------------

    @property
    def ricci_factor(self) -> float:
        """(d - 1) K for the space forms of the catalog."""
        return (self.dim - 1) * self.curvature

    def ricci_matrix(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=float)
        eye = np.eye(self.dim)
        return np.broadcast_to(self.ricci_factor * eye, frame.shape[:-2] + (self.dim, self.dim)).copy()

    # ---------------- frames ----------------

    def origin(self) -> np.ndarray:
        return np.zeros(self.ambient_dim)

    def default_frame(self, m: np.ndarray) -> np.ndarray:
        return np.eye(self.ambient_dim, self.dim)

    def frame_coordinates(self, x: np.ndarray, frame: np.ndarray, v: np.ndarray) -> np.ndarray:
        """u^{-1} v: metric inner products of v with the frame columns."""
        cols = np.swapaxes(frame, -1, -2)
        return self.inner(x[..., None, :], cols, v[..., None, :])

    def frame_vector(self, frame: np.ndarray, a: np.ndarray) -> np.ndarray:
        """u a: the tangent vector with frame coordinates ``a``."""
        return np.sum(frame * a[..., None, :], axis=-1)

    def frame_gram(self, x: np.ndarray, frame: np.ndarray) -> np.ndarray:
        cols = np.swapaxes(frame, -1, -2)
        return self.inner(x[..., None, None, :], cols[..., :, None, :], cols[..., None, :, :])

    def orthonormalize(self, x: np.ndarray, frame: np.ndarray) -> np.ndarray:
        """Modified Gram-Schmidt in the metric, after projecting to the tangent space."""
        out = np.array(frame, dtype=float, copy=True)
        for j in range(self.dim):
            col = self.project_tangent(x, out[..., :, j])
            for i in range(j):
                prev = out[..., :, i]
                col = col - self.inner(x, prev, col)[..., None] * prev
            out[..., :, j] = col / self.norm(x, col)[..., None]
        return out


class Euclidean(ManifoldModel):
    kind = "euclidean"

    def __init__(self, dim: int):
        if int(dim) < 1:
            raise InvalidInputError(f"Euclidean dimension must be positive, got {dim}")
        super().__init__(dim, dim)


class Circle(ManifoldModel):
    """The unit circle, stored as one angle reduced to [0, 2*pi)."""

    kind = "circle"

    def __init__(self):
        super().__init__(1, 1)

    def project_point(self, x):
        return np.mod(np.asarray(x, dtype=float), TWO_PI)

    def point_residual(self, x):
        x = np.asarray(x, dtype=float)[..., 0]
        return np.where((x >= 0.0) & (x < TWO_PI + POINT_TOL), 0.0, np.abs(x))

    def check_point(self, x, name: str = "point"):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != 1 or not np.all(np.isfinite(x)):
            raise InvalidInputError(f"{name} must be one finite angle")
        return self.project_point(x)

    def exp(self, x, v):
        return np.mod(x + v, TWO_PI)

    def log(self, x, y):
        return np.mod(np.asarray(y, dtype=float) - x + np.pi, TWO_PI) - np.pi

    def radial(self, x, y):
        diff = self.log(x, y)
        r = np.abs(diff[..., 0])
        return r, np.sign(diff)


class Sphere2(ManifoldModel):
    """Unit sphere in R^3, sectional curvature +1."""

    kind = "sphere2"
    curvature = 1.0
    NORTH = np.array([0.0, 0.0, 1.0])

    def __init__(self):
        super().__init__(2, 3)

    def project_point(self, x):
        x = np.asarray(x, dtype=float)
        return x / np.sqrt(_dot(x, x))[..., None]

    def project_tangent(self, x, v):
        return v - _dot(x, v)[..., None] * x

    def point_residual(self, x):
        return _dot(x, x) - 1.0

    def tangency_residual(self, x, v):
        return _dot(x, v)

    def exp(self, x, v):
        nv = np.sqrt(_dot(v, v))
        y = np.cos(nv)[..., None] * x + np.sinc(nv / np.pi)[..., None] * v
        return self.project_point(y)

    def radial(self, x, y):
        c = np.clip(_dot(x, y), -1.0, 1.0)
        u = y - c[..., None] * x
        s = np.sqrt(_dot(u, u))
        r = np.arctan2(s, c)
        unit = u / np.where(s > 0.0, s, 1.0)[..., None]
        return r, np.where((s > 0.0)[..., None], unit, 0.0)

    def log(self, x, y):
        c = np.clip(_dot(x, y), -1.0, 1.0)
        u = y - c[..., None] * x
        s = np.sqrt(_dot(u, u))
        theta = np.arctan2(s, c)
        worst = np.max(theta, initial=0.0)
        if worst >= np.pi - CUT_LOCUS_GUARD:
            raise CutLocusError(worst, np.pi - CUT_LOCUS_GUARD)
        return _theta_over_sin(theta, s)[..., None] * u

    def transport(self, x, v, w):
        theta = np.sqrt(_dot(v, v))
        unit = v / np.where(theta > 0.0, theta, 1.0)[..., None]
        coeff = _dot(unit, w)[..., None]
        kick = (np.cos(theta) - 1.0)[..., None] * unit - np.sin(theta)[..., None] * x
        return w + coeff * kick

    def origin(self):
        return self.NORTH.copy()

    def default_frame(self, m):
        """
        Coordinate frame at m: the rotation taking the north pole to m along a
        great circle, applied to (e_x, e_y). At the south pole the rotation is
        taken about the x-axis.
        """
        m = self.project_point(m)
        axis = np.cross(self.NORTH, m)
        s = np.linalg.norm(axis)
        angle = np.arctan2(s, float(np.dot(self.NORTH, m)))
        if s < 1e-12:
            axis = np.array([1.0, 0.0, 0.0])
        else:
            axis = axis / s
        rotation = Rotation.from_rotvec(angle * axis)
        frame = rotation.apply(np.eye(3)[:2]).T
        return self.orthonormalize(m, frame)


class Hyperbolic3(ManifoldModel):
    """Hyperboloid model of hyperbolic 3-space, sectional curvature -1."""

    kind = "hyperbolic3"
    curvature = -1.0

    def __init__(self):
        super().__init__(3, 4)

    def inner(self, x, u, v):
        prod = u * v
        return np.sum(prod[..., 1:], axis=-1) - prod[..., 0]

    def project_point(self, x):
        x = np.asarray(x, dtype=float)
        scale = np.sqrt(np.maximum(-self.inner(x, x, x), 1e-300))
        y = x / scale[..., None]
        return y * np.sign(y[..., :1] + 0.0)

    def project_tangent(self, x, v):
        return v + self.inner(x, x, v)[..., None] * x

    def point_residual(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x[..., 0] > 0.0, self.inner(x, x, x) + 1.0, np.inf)

    def tangency_residual(self, x, v):
        return self.inner(x, x, v)

    def exp(self, x, v):
        nv = self.norm(x, v)
        y = np.cosh(nv)[..., None] * x + _sinhc(nv)[..., None] * v
        return self.project_point(y)

    def radial(self, x, y):
        c = np.maximum(-self.inner(x, x, y), 1.0)
        u = y - c[..., None] * x
        diff = np.asarray(y, dtype=float) - x
        r = 2.0 * np.arcsinh(0.5 * np.sqrt(np.maximum(self.inner(x, diff, diff), 0.0)))
        s = self.norm(x, u)
        unit = u / np.where(s > 0.0, s, 1.0)[..., None]
        return r, np.where((s > 0.0)[..., None], unit, 0.0)

    def log(self, x, y):
        r, unit = self.radial(x, y)
        return r[..., None] * unit

    def transport(self, x, v, w):
        theta = self.norm(x, v)
        unit = v / np.where(theta > 0.0, theta, 1.0)[..., None]
        coeff = self.inner(x, unit, w)[..., None]
        kick = (np.cosh(theta) - 1.0)[..., None] * unit + np.sinh(theta)[..., None] * x
        return w + coeff * kick

    def origin(self):
        return np.array([1.0, 0.0, 0.0, 0.0])

    def default_frame(self, m):
        """Coordinate frame at the origin boosted to m along the joining geodesic."""
        m = self.project_point(m)
        o = self.origin()
        frame0 = np.eye(4)[:, 1:]
        frame = self.transport_frame(o, self.log(o, m), frame0)
        return self.orthonormalize(m, frame)


MODEL_CATALOG = {
    "euclidean": Euclidean,
    "circle": Circle,
    "sphere2": Sphere2,
    "hyperbolic3": Hyperbolic3,
}


def make_model(kind: str, dim: Optional[int] = None) -> ManifoldModel:
    """
    Build a model from its catalog name.

    Args:
        kind: One of the MODEL_CATALOG keys (case-insensitive)
        dim: Dimension, required for Euclidean and ignored otherwise

    Returns:
        The ManifoldModel instance

    Raises:
        ConfigError: If the name is not in the catalog
    """
    key = str(kind).strip().lower()
    if key not in MODEL_CATALOG:
        raise ConfigError(
            f"Unknown model kind '{kind}'. "
            f"Valid names: {', '.join(sorted(MODEL_CATALOG))}"
        )
    if key == "euclidean":
        return Euclidean(1 if dim is None else dim)
    return MODEL_CATALOG[key]()


# ==================== FRAMES ====================


@dataclass(frozen=True)
class FramePoint:
    """A point of the orthonormal frame bundle: base point plus orthonormal frame."""

    model: ManifoldModel
    base: np.ndarray
    frame: np.ndarray

    def __post_init__(self):
        base = self.model.check_point(self.base, "frame base")
        frame = np.asarray(self.frame, dtype=float)
        expected = (self.model.ambient_dim, self.model.dim)
        if frame.shape != expected:
            raise InvalidInputError(f"frame has shape {frame.shape}, expected {expected}")
        gram = self.model.frame_gram(base, frame)
        residual = np.max(np.abs(gram - np.eye(self.model.dim)))
        if residual > FRAME_TOL:
            raise InvalidInputError(f"frame is not orthonormal: Gram residual {residual:.3e}")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "frame", frame)

    @classmethod
    def at(cls, model: ManifoldModel, m) -> "FramePoint":
        """The deterministic catalog frame U_0 at m."""
        m = model.check_point(m, "start point")
        return cls(model, m, model.default_frame(m))

    def rotated(self, rotation: np.ndarray) -> "FramePoint":
        """The frame u O for an orthogonal d x d matrix O."""
        return FramePoint(self.model, self.base, self.frame @ np.asarray(rotation, dtype=float))

    def coordinates(self, v: np.ndarray) -> np.ndarray:
        return self.model.frame_coordinates(self.base, self.frame, np.asarray(v, dtype=float))

    def vector(self, a: np.ndarray) -> np.ndarray:
        return self.model.frame_vector(self.frame, np.asarray(a, dtype=float))


# ==================== DRIFT FIELDS ====================


class VectorFieldSpec:
    """
    A smooth drift field V with an analytic covariant derivative.

    ``covariant_derivative`` returns the frame matrix with entries
    <nabla_{u e_j} V, u e_i> (row i, column j).
    """

    name = "field"
    models: Tuple[str, ...] = ()

    def supports(self, model: ManifoldModel) -> bool:
        return not self.models or model.kind in self.models

    def value(self, model: ManifoldModel, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def covariant_derivative(self, model: ManifoldModel, x: np.ndarray, frame: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False


class ZeroField(VectorFieldSpec):
    name = "zero"

    def value(self, model, x):
        return np.zeros(np.shape(x))

    def covariant_derivative(self, model, x, frame):
        return np.zeros(np.shape(frame)[:-2] + (model.dim, model.dim))

    @property
    def is_zero(self):
        return True


class ConstantField(VectorFieldSpec):
    """V(x) = a on Euclidean space."""

    name = "constant"
    models = ("euclidean",)

    def __init__(self, vector):
        self.vector = np.atleast_1d(np.asarray(vector, dtype=float))

    def value(self, model, x):
        return np.broadcast_to(self.vector, np.shape(x)).copy()

    def covariant_derivative(self, model, x, frame):
        return np.zeros(np.shape(frame)[:-2] + (model.dim, model.dim))


class LinearField(VectorFieldSpec):
    """V(x) = A x on Euclidean space (A = -kappa I is the Ornstein-Uhlenbeck drift)."""

    name = "linear"
    models = ("euclidean",)

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def value(self, model, x):
        return np.asarray(x, dtype=float) @ self.matrix.T

    def covariant_derivative(self, model, x, frame):
        return np.swapaxes(frame, -1, -2) @ self.matrix @ frame


class SphericalGradientField(VectorFieldSpec):
    """V(x) = c (e - <x,e> x) on Sphere2, with nabla_w V = -c <x,e> w."""

    name = "spherical_gradient"
    models = ("sphere2",)

    def __init__(self, c: float, axis):
        self.c = float(c)
        axis = np.asarray(axis, dtype=float)
        self.axis = axis / np.linalg.norm(axis)

    def value(self, model, x):
        x = np.asarray(x, dtype=float)
        return self.c * (self.axis - _dot(x, self.axis)[..., None] * x)

    def covariant_derivative(self, model, x, frame):
        factor = -self.c * _dot(np.asarray(x, dtype=float), self.axis)
        return factor[..., None, None] * np.eye(model.dim)


FIELD_CATALOG = {
    "zero": ZeroField,
    "constant": ConstantField,
    "linear": LinearField,
    "spherical_gradient": SphericalGradientField,
}


def make_field(spec: Optional[Dict], model: ManifoldModel) -> VectorFieldSpec:
    """
    Build a drift field from a config mapping such as
    ``{"name": "linear", "matrix": [[-0.5]]}``.
    """
    if not spec:
        return ZeroField()
    name = str(spec.get("name", "zero")).lower()
    if name not in FIELD_CATALOG:
        raise ConfigError(
            f"Unknown drift field '{name}'. Valid names: {', '.join(sorted(FIELD_CATALOG))}"
        )
    if name == "zero":
        field = ZeroField()
    elif name == "constant":
        field = ConstantField(spec["vector"])
    elif name == "linear":
        if "kappa" in spec:
            field = LinearField(-float(spec["kappa"]) * np.eye(model.dim))
        else:
            field = LinearField(spec["matrix"])
    else:
        field = SphericalGradientField(spec.get("c", 1.0), spec.get("axis", [0.0, 0.0, 1.0]))
    if not field.supports(model):
        raise ConfigError(f"Drift field '{name}' is not available on {model!r}")
    return field


# ==================== PUBLIC OPERATIONS ====================


def exp_map(model: ManifoldModel, x, v) -> np.ndarray:
    """
    Endpoint of the geodesic starting at x with initial velocity v.

    Raises:
        InvalidInputError: If v is not tangent at x
    """
    x = model.check_point(x)
    v = model.check_tangent(x, v)
    return model.exp(x, v)


def log_map(model: ManifoldModel, x, y) -> np.ndarray:
    """
    Initial velocity of the minimizing geodesic from x to y.

    Raises:
        CutLocusError: On Sphere2 when d(x, y) >= pi - CUT_LOCUS_GUARD
    """
    x = model.check_point(x)
    y = model.check_point(y)
    return model.log(x, y)


def parallel_transport(model: ManifoldModel, x, v, w) -> np.ndarray:
    """Transport w along t -> exp_x(t v) to t = 1."""
    x = model.check_point(x)
    v = model.check_tangent(x, v, "velocity")
    w = model.check_tangent(x, w, "transported vector")
    return model.transport(x, v, w)


def ricci_matrix(u: FramePoint) -> np.ndarray:
    """The equivariant Ricci matrix Ric(u e_i, u e_j)."""
    return u.model.ricci_matrix(u.frame)


def vector_field_eval(field: VectorFieldSpec, u: FramePoint) -> Tuple[np.ndarray, np.ndarray]:
    """V at the base point of u and the frame matrix of nabla V."""
    value = field.value(u.model, u.base)
    return value, field.covariant_derivative(u.model, u.base, u.frame)


def covariant_derivative_fd(field: VectorFieldSpec, u: FramePoint, step: float = 1e-4) -> np.ndarray:
    """
    Geodesic central-difference approximation of the frame matrix of nabla V.

    V is sampled at exp_x(+-step u e_j), transported back to x along the same
    geodesic, and differenced. Used to verify the analytic catalog derivatives.
    """
    model, x = u.model, u.base
    out = np.zeros((model.dim, model.dim))
    for j in range(model.dim):
        w = u.frame[:, j]
        columns = []
        for sign in (1.0, -1.0):
            y = model.exp(x, sign * step * w)
            back = model.log(y, x)
            columns.append(model.transport(y, back, field.value(model, y)))
        derivative = (columns[0] - columns[1]) / (2.0 * step)
        out[:, j] = model.frame_coordinates(x, u.frame, derivative)
    return out
