"""
Conditioned SDEs for the endpoint functional Y = X_T.

A target law nu for X_T turns into the drift grad log of the conditional
density of X_T given the present: the heat-kernel score for a Dirac target, a
posterior-weighted mixture of scores for atoms, and grad log Q_{T-t} xi for a
density ratio xi = dnu/dP_{X_T}. Two samplers produce the conditioned law:

- sample_csde integrates the mixture drift and draws the endpoint at the end
- sample_enlarged draws y from nu first and runs the bridge to y

Both must give the same law.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import expm
from scipy.special import logsumexp

from csde_lab import heat_kernel
from csde_lab.batch_processor import BatchProcessor
from csde_lab.development import (
    PathBatch,
    StepState,
    default_steps,
    draw_drivers,
    integrate,
    sample_bm,
)
from csde_lab.errors import InvalidInputError, OutOfRangeError, UnsupportedError
from csde_lab.geometry import (
    ConstantField,
    FramePoint,
    LinearField,
    ManifoldModel,
    VectorFieldSpec,
    ZeroField,
)
from csde_lab.observables import Moments, Observable
from csde_lab.utils import STREAM_ENDPOINT, STREAM_TARGET, path_stream

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12
NORMALIZATION_PATHS = 4000
NORMALIZATION_SE = 2.0
EXACT_NORMALIZATION_TOL = 1e-6


# ==================== TARGET LAWS ====================


@dataclass(frozen=True)
class Dirac:
    point: np.ndarray
    kind = "dirac"


@dataclass(frozen=True)
class Atoms:
    points: np.ndarray
    weights: np.ndarray
    kind = "atoms"

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        if len(weights) != len(points) or len(weights) == 0:
            raise InvalidInputError("Atoms need one positive weight per point")
        if np.any(weights <= 0.0):
            raise InvalidInputError(f"Atom weights must be positive, got {weights.tolist()}")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise InvalidInputError(f"Atom weights must sum to 1, got {weights.sum():.15f}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)


@dataclass(frozen=True)
class DensityRatio:
    """nu = xi(y) P_{X_T}(dy) / c; c = E_P[xi(X_T)] is estimated or computed."""

    observable: Observable
    normalization: Optional[float] = None
    kind = "density_ratio"

    def __post_init__(self):
        if self.normalization is not None and not float(self.normalization) > 0.0:
            raise InvalidInputError(f"Density-ratio normalization must be positive, got {self.normalization}")


@dataclass(frozen=True)
class TimeDensity:
    """Target for a hitting time: g = dnu/dP_{T_r} on [0, tau_max]."""

    g: Callable[[np.ndarray], np.ndarray]
    label: str = "g"
    is_constant: bool = False
    kind = "time_density"


TargetLaw = Union[Dirac, Atoms, DensityRatio, TimeDensity]


# ==================== FLAT DRIFTED TRANSITIONS ====================


class GaussianTransition:
    """
    Exact transition kernel of dX = V(X) dt + dB on Euclidean space for the
    zero, constant and linear fields: X_s given X_0 = x is Normal(M x + b, S).
    """

    def __init__(self, model: ManifoldModel, V: VectorFieldSpec):
        if model.kind != "euclidean":
            raise UnsupportedError(f"Gaussian transitions exist on Euclidean space, not {model!r}")
        self.dim = model.dim
        self.V = V
        if isinstance(V, ZeroField):
            self.kind = "brownian"
        elif isinstance(V, ConstantField):
            self.kind = "constant"
        elif isinstance(V, LinearField):
            self.kind = "linear"
        else:
            raise UnsupportedError(f"No closed-form transition for drift field '{V.name}'")

    def moments(self, s: float) -> Moments:
        d = self.dim
        if self.kind == "brownian":
            return np.eye(d), np.zeros(d), s * np.eye(d)
        if self.kind == "constant":
            return np.eye(d), self.V.vector * s, s * np.eye(d)
        # Van Loan: expm of [[-A, I], [0, A^T]] s carries the covariance integral
        A = self.V.matrix
        block = np.zeros((2 * d, 2 * d))
        block[:d, :d] = -A
        block[:d, d:] = np.eye(d)
        block[d:, d:] = A.T
        G = expm(block * s)
        M = G[d:, d:].T
        S = M @ G[:d, d:]
        return M, np.zeros(d), 0.5 * (S + S.T)

    def log_density(self, s: float, x, y) -> np.ndarray:
        M, b, S = self.moments(s)
        diff = np.asarray(y, dtype=float) - (np.asarray(x, dtype=float) @ M.T + b)
        sign, logdet = np.linalg.slogdet(S)
        quad = np.einsum("...i,ij,...j->...", diff, np.linalg.inv(S), diff)
        return -0.5 * (self.dim * np.log(2.0 * np.pi) + logdet + quad)

    def grad_log_density(self, s: float, x, y) -> np.ndarray:
        """Gradient in x of log q_s(x, y): M^T S^{-1}(y - M x - b)."""
        M, b, S = self.moments(s)
        diff = np.asarray(y, dtype=float) - (np.asarray(x, dtype=float) @ M.T + b)
        return np.linalg.solve(S, diff[..., None])[..., 0] @ M


# ==================== SPEC ====================


@dataclass
class ConditioningSpec:
    """Endpoint conditioning of the V-diffusion from m at horizon T towards ``target``."""

    model: ManifoldModel
    m: np.ndarray
    V: VectorFieldSpec
    horizon: float
    target: TargetLaw
    N: Optional[int] = None
    transition: Optional[GaussianTransition] = field(default=None, init=False)
    terminal_gap: float = field(default=0.0, init=False)
    free_steps: int = field(default=0, init=False)

    def __post_init__(self):
        self.m = self.model.check_point(self.m, "start point")
        self.V = self.V or ZeroField()
        self.horizon = float(self.horizon)
        if self.horizon <= 0.0:
            raise InvalidInputError(f"Horizon must be positive, got {self.horizon}")
        self.N = default_steps(self.horizon) if self.N is None else int(self.N)
        if self.N < 2:
            raise InvalidInputError(f"Conditioned paths need at least 2 steps, got {self.N}")
        if isinstance(self.target, TimeDensity):
            raise UnsupportedError("Time-density targets condition a hitting time; use hitting_time")
        if isinstance(self.target, Dirac):
            object.__setattr__(self.target, "point", self.model.check_point(self.target.point, "target"))
        if isinstance(self.target, Atoms):
            object.__setattr__(self.target, "points", self.model.check_point(self.target.points, "atom"))

        if not self.V.is_zero:
            if self.model.kind != "euclidean":
                raise UnsupportedError(
                    f"Endpoint conditioning with drift '{self.V.name}' is only available on Euclidean space"
                )
            self.transition = GaussianTransition(self.model, self.V)

        h = self.horizon / self.N
        if self.model.kind in heat_kernel.SERIES_KINDS:
            gap = max(h, heat_kernel.T_MIN)
        else:
            gap = h
        self.free_steps = int(np.floor((self.horizon - gap) / h + 1e-9))
        self.terminal_gap = self.horizon - self.free_steps * h

    @property
    def step(self) -> float:
        return self.horizon / self.N

    @property
    def u0(self) -> FramePoint:
        return FramePoint.at(self.model, self.m)

    # ---------------- kernels ----------------

    def log_q(self, s: float, x, y) -> np.ndarray:
        if self.transition is not None:
            return self.transition.log_density(s, x, y)
        return heat_kernel.log_heat_kernel(self.model, s, x, y)

    def grad_log_q(self, s: float, x, y) -> np.ndarray:
        if self.transition is not None:
            return self.transition.grad_log_density(s, x, y)
        return heat_kernel.grad_log_heat_kernel(self.model, s, x, y)

    def check_time(self, t: float, allow_end: bool = True):
        limit = self.horizon - self.terminal_gap
        if t < 0.0 or t > limit + 1e-12 or (not allow_end and t >= limit - 1e-12):
            raise OutOfRangeError(
                f"t = {t} outside [0, T - eps] = [0, {limit}] for conditioned quantities"
            )


# ==================== DENSITIES AND DRIFTS ====================


def eta_density(spec: ConditioningSpec, t: float, x, y) -> np.ndarray:
    """
    Conditional density of X_T at y given X_t = x, relative to its law at time 0:
    q_{T-t}(x, y) / q_T(m, y), for 0 <= t < T - eps.
    """
    spec.check_time(t, allow_end=False)
    return np.exp(spec.log_q(spec.horizon - t, x, y) - spec.log_q(spec.horizon, spec.m, y))


def posterior_weights(spec: ConditioningSpec, t: float, x) -> np.ndarray:
    """
    Atom weights w_i eta_t^{y_i}(x), normalized over i, computed in log space.

    Returns:
        Array (..., k) whose rows sum to one
    """
    atoms = spec.target
    x = np.asarray(x, dtype=float)
    s = spec.horizon - t
    log_eta = spec.log_q(s, x[..., None, :], atoms.points) - spec.log_q(spec.horizon, spec.m, atoms.points)
    logits = np.log(atoms.weights) + log_eta
    return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))


def endpoint_drift(spec: ConditioningSpec, t: float, x, target_point=None) -> np.ndarray:
    """
    Conditioning drift at time t, added to V.

    Args:
        spec: Conditioning spec
        t: Time in [0, T - eps] (up to T for density ratios)
        x: Points (..., D)
        target_point: Overrides the target with a fixed endpoint (the bridge
            drift used by the enlarged-filtration route)

    Returns:
        Tangent vectors (..., D)
    """
    target = spec.target
    x = np.asarray(x, dtype=float)
    s = spec.horizon - t
    if target_point is not None:
        return spec.grad_log_q(s, x, target_point)
    if isinstance(target, Dirac):
        spec.check_time(t)
        return spec.grad_log_q(s, x, target.point)
    if isinstance(target, Atoms):
        spec.check_time(t)
        weights = posterior_weights(spec, t, x)
        grads = spec.grad_log_q(s, x[..., None, :], target.points)
        return np.sum(weights[..., None] * grads, axis=-2)
    if isinstance(target, DensityRatio):
        return density_ratio_drift(spec, t, x)
    raise UnsupportedError(f"No endpoint drift for target '{target.kind}'")


def density_ratio_drift(spec: ConditioningSpec, t: float, x) -> np.ndarray:
    """grad log Q_{T-t} xi(x); exactly zero for xi = 1."""
    xi = spec.target.observable
    x = np.asarray(x, dtype=float)
    if xi.is_constant:
        return np.zeros(x.shape)
    s = spec.horizon - t
    if s <= 0.0:
        return xi.gradient(spec.model, x) / xi.value(x)[..., None]
    if xi.has_closed_form(spec.model):
        moments = spec.transition.moments(s) if spec.transition is not None else None
        return xi.log_semigroup_gradient(spec.model, s, x, moments)
    if spec.model.kind in heat_kernel.SERIES_KINDS and spec.V.is_zero:
        return heat_kernel.semigroup_log_gradient(spec.model, max(s, heat_kernel.T_MIN), xi, x)
    raise UnsupportedError(
        f"Q_s xi is not computable for '{xi.name}' on {spec.model!r}; "
        "density-ratio targets need a closed form or quadrature"
    )


def bridge_drift(model: ManifoldModel, V: VectorFieldSpec, s: float, x, y) -> np.ndarray:
    """
    Total drift V(x) + grad_x log q^V_s(x, y) of the V-diffusion pinned at y
    after remaining time s.
    """
    x = np.asarray(x, dtype=float)
    if model.kind == "euclidean":
        score = GaussianTransition(model, V).grad_log_density(s, x, y)
    elif V.is_zero:
        score = heat_kernel.grad_log_heat_kernel(model, s, x, y)
    else:
        raise UnsupportedError(f"No pinned drift for '{V.name}' on {model!r}")
    return V.value(model, x) + score


def space_time_harmonic_drift(a) -> Callable[[float, np.ndarray], np.ndarray]:
    """
    h-transform drift grad log phi for phi(t, x) = exp(<a, x> - |a|^2 t / 2),
    a positive space-time harmonic function of flat Brownian motion.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))

    def drift(t: float, x) -> np.ndarray:
        return np.broadcast_to(a, np.shape(x)).copy()

    return drift


# ==================== SAMPLERS ====================


def _attach(batch: PathBatch, endpoints: np.ndarray, horizon: float,
            target_index: Optional[np.ndarray] = None) -> PathBatch:
    """Append the exact endpoint as a final geodesic jump, flagged as attached."""
    model = batch.model
    x = batch.points[:, -1]
    r, unit = model.radial(x, endpoints)
    velocity = r[..., None] * unit
    B, _, d = batch.driver.shape
    nan_row = np.full((B, 1, d), np.nan)

    frames = batch.frames
    if frames is not None:
        moved = model.orthonormalize(endpoints, model.transport_frame(x, velocity, frames[:, -1]))
        frames = np.concatenate([frames, moved[:, None]], axis=1)

    batch.points = np.concatenate([batch.points, endpoints[:, None]], axis=1)
    batch.frames = frames
    batch.driver = np.concatenate([batch.driver, nan_row], axis=1)
    batch.realized_drift = np.concatenate([batch.realized_drift, nan_row], axis=1)
    batch.times = np.append(batch.times, horizon)
    batch.attached = True
    batch.targets = endpoints
    batch.target_index = target_index
    return batch


def _draw_indices(weights: np.ndarray, seed: int, path_ids: Sequence[int], purpose: int) -> np.ndarray:
    """One categorical draw per row from the row's own stream."""
    weights = np.atleast_2d(weights)
    uniforms = np.array([path_stream(seed, pid, purpose).random() for pid in path_ids])
    cumulative = np.cumsum(weights, axis=-1)
    cumulative[..., -1] = 1.0
    return np.array([np.searchsorted(row, u, side="right") for row, u in zip(cumulative, uniforms)])


def _conditioned_chunk(spec: ConditioningSpec, seed: int, path_ids: Sequence[int],
                       drift_fn: Callable[[StepState], np.ndarray], n_steps: int,
                       store_frames: bool) -> PathBatch:
    h = spec.step
    drivers = draw_drivers(seed, path_ids, n_steps, spec.model.dim, h)
    return integrate(spec.model, spec.u0, spec.V, drivers, h, path_ids, seed,
                     extra_drift=drift_fn, store_frames=store_frames)


def sample_csde(spec: ConditioningSpec, n_paths: int, seed: int,
                processor: Optional[BatchProcessor] = None,
                store_frames: bool = True) -> PathBatch:
    """
    Simulate the conditioned SDE: V plus the endpoint drift of the target law.

    Dirac and atom targets are integrated to T - eps, after which the endpoint
    (the target, or an atom drawn from the posterior weights at T - eps) is
    attached. Density-ratio targets have a smooth drift and run to T; their
    normalization is checked first (see check_normalization).
    """
    if int(n_paths) < 1:
        raise InvalidInputError(f"n_paths must be at least 1, got {n_paths}")
    processor = processor or BatchProcessor()
    target = spec.target

    def drift_fn(state: StepState) -> np.ndarray:
        return endpoint_drift(spec, state.t, state.points)

    normalization = check_normalization(spec, seed, processor) if isinstance(target, DensityRatio) else None

    def run(start, stop):
        ids = np.arange(start, stop)
        if isinstance(target, DensityRatio):
            return _conditioned_chunk(spec, seed, ids, drift_fn, spec.N, store_frames)
        batch = _conditioned_chunk(spec, seed, ids, drift_fn, spec.free_steps, store_frames)
        if isinstance(target, Dirac):
            ends = np.broadcast_to(target.point, batch.points[:, -1].shape).copy()
            return _attach(batch, ends, spec.horizon)
        t_end = spec.horizon - spec.terminal_gap
        weights = posterior_weights(spec, t_end, batch.points[:, -1])
        index = _draw_indices(weights, seed, ids, STREAM_ENDPOINT)
        return _attach(batch, target.points[index], spec.horizon, index)

    result = PathBatch.concat(processor.run(run, int(n_paths), desc="csde"))
    result.meta.update(route="csde", terminal_gap=spec.terminal_gap)
    if normalization is not None:
        result.meta["normalization"] = normalization
    return result


def sample_enlarged(spec: ConditioningSpec, n_paths: int, seed: int,
                    processor: Optional[BatchProcessor] = None,
                    store_frames: bool = True) -> PathBatch:
    """
    Enlarged-filtration route: draw y from the target law first, then run the
    bridge to y. For a Dirac target this is the conditioned SDE itself.
    """
    target = spec.target
    if isinstance(target, Dirac):
        result = sample_csde(spec, n_paths, seed, processor, store_frames)
        result.meta["route"] = "enlarged"
        return result
    if not isinstance(target, Atoms):
        raise UnsupportedError("The enlarged route needs a Dirac or atom target")
    if int(n_paths) < 1:
        raise InvalidInputError(f"n_paths must be at least 1, got {n_paths}")
    processor = processor or BatchProcessor()

    def run(start, stop):
        ids = np.arange(start, stop)
        index = _draw_indices(np.broadcast_to(target.weights, (len(ids), len(target.weights))),
                              seed, ids, STREAM_TARGET)
        ends = target.points[index]

        def drift_fn(state: StepState) -> np.ndarray:
            spec.check_time(state.t)
            return endpoint_drift(spec, state.t, state.points, target_point=ends)

        batch = _conditioned_chunk(spec, seed, ids, drift_fn, spec.free_steps, store_frames)
        return _attach(batch, ends.copy(), spec.horizon, index)

    result = PathBatch.concat(processor.run(run, int(n_paths), desc="enlarged"))
    result.meta.update(route="enlarged", terminal_gap=spec.terminal_gap)
    return result


def estimate_normalization(spec: ConditioningSpec, n_paths: int = 20000, seed: int = 0,
                           processor: Optional[BatchProcessor] = None) -> Tuple[float, float]:
    """
    c = E_P[xi(X_T)] for a density-ratio target, with its standard error.

    Exact (standard error 0) when Q_T xi has a closed form, Monte Carlo otherwise.
    """
    xi = spec.target.observable
    if xi.has_closed_form(spec.model):
        moments = spec.transition.moments(spec.horizon) if spec.transition is not None else None
        q, _ = xi.semigroup(spec.model, spec.horizon, spec.m[None], moments)
        return float(q[0]), 0.0
    paths = sample_bm(spec.model, spec.m, spec.V, spec.horizon, spec.N, n_paths, seed,
                      processor, store_frames=False)
    values = xi.value(paths.endpoints)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(len(values)))


def check_normalization(spec: ConditioningSpec, seed: int, processor: Optional[BatchProcessor] = None,
                        n_paths: int = NORMALIZATION_PATHS) -> float:
    """
    Normalization c of a density-ratio target.

    Without a declared normalization the estimate of E_P[xi(X_T)] is returned.
    With one, E_P[xi(X_T)] / c must lie within 2 standard errors of 1
    (within 1e-6 when the expectation is exact).

    Raises:
        InvalidInputError: If the declared normalization does not normalize xi
    """
    xi = spec.target.observable
    estimate, se = estimate_normalization(spec, n_paths, seed, processor)
    if not estimate > 0.0:
        raise InvalidInputError(f"E_P[{xi.name}(X_T)] = {estimate} is not positive")
    declared = spec.target.normalization
    if declared is None:
        logger.debug("Normalization of %s: %.8f +- %.2e", xi.name, estimate, se)
        return estimate
    declared = float(declared)
    ratio = estimate / declared
    allowed = NORMALIZATION_SE * se / declared if se > 0.0 else EXACT_NORMALIZATION_TOL
    if abs(ratio - 1.0) > allowed:
        raise InvalidInputError(
            f"Density ratio {xi.name} / {declared:g} has mean {ratio:.6f} under P, expected 1 (+- {allowed:.2e})"
        )
    return declared
