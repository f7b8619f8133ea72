"""
Monte Carlo estimators for gradient and martingale identities.

- bismut_gradient: grad log Q_T xi(m) = (1/T) E^Q[ sum Lambda_{t_k} dB_k ],
  sampled under P and reweighted by xi(X_T)
- covariant_ibp_check: grad Q_T xi(m) = E[ Lambda_T u_T^{-1} grad xi(X_T) ]
- newton_martingale: N_t = Lambda_t u_t^{-1} grad log q_{T-t}(X_t, X_T),
  constant in mean under every conditioned law of the endpoint
- hitting_newton_martingale: the same construction for the exit time of a
  ball, with the exit-time density in place of the heat kernel

All vectors at m are reported as coordinates in the fixed initial frame U_0.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from csde_lab import heat_kernel
from csde_lab.batch_processor import BatchProcessor
from csde_lab.conditioning import ConditioningSpec, GaussianTransition
from csde_lab.curvature_transport import TransportMatrix, integrate_transport, transport_ode
from csde_lab.development import PathBatch, PathSample, default_steps, sample_chunk
from csde_lab.errors import DegenerateInputError, InvalidInputError, UnsupportedError
from csde_lab.geometry import FramePoint, ManifoldModel, VectorFieldSpec, ZeroField
from csde_lab.hitting_time import ExitSamples, RadialSpec, exact_exit_density, exact_exit_density_slope
from csde_lab.observables import Observable
from csde_lab.stats_harness import TestReport, mean_and_se, z_score_report

logger = logging.getLogger(__name__)


@dataclass
class GradientEstimate:
    """A tangent vector at m in U_0 coordinates with per-coordinate standard errors."""

    value: np.ndarray
    std_error: np.ndarray
    n_paths: int
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"value": self.value.tolist(), "std_error": self.std_error.tolist(),
                "n_paths": self.n_paths, **self.details}


def _moments(model: ManifoldModel, V: VectorFieldSpec, s: float):
    if model.kind == "euclidean" and not V.is_zero:
        return GaussianTransition(model, V).moments(s)
    return None


def semigroup_gradient(model: ManifoldModel, V: VectorFieldSpec, xi: Observable, T: float,
                       m) -> Tuple[float, np.ndarray]:
    """
    Q_T xi(m) and grad Q_T xi(m) (ambient), by closed form or quadrature.

    Raises:
        UnsupportedError: If neither is available for xi on the model
    """
    m = np.asarray(m, dtype=float)
    if xi.has_closed_form(model):
        q, dq = xi.semigroup(model, T, m[None], _moments(model, V, T))
        return float(q[0]), dq[0]
    if model.kind in heat_kernel.SERIES_KINDS and V.is_zero:
        q, _ = heat_kernel.semigroup_apply(model, T, xi, m, method="quadrature")
        grad = heat_kernel.semigroup_log_gradient(model, T, xi, m[None])[0]
        return q, q * grad
    raise UnsupportedError(f"No reference value of grad Q_T xi for '{xi.name}' on {model!r}")


def _simulate(model, m, V, T, N, n_paths, seed, processor, reduce_chunk):
    u0 = FramePoint.at(model, m)
    N = default_steps(T) if N is None else int(N)
    processor = processor or BatchProcessor()

    def run(start, stop):
        batch = sample_chunk(model, u0, V, T, N, seed, range(start, stop))
        return reduce_chunk(batch)

    parts = processor.run(run, int(n_paths), desc="estimate")
    return [np.concatenate(items, axis=0) for items in zip(*parts)]


def bismut_gradient(model: ManifoldModel, m, xi: Observable, T: float, n_paths: int, seed: int,
                    V: Optional[VectorFieldSpec] = None, N: Optional[int] = None,
                    processor: Optional[BatchProcessor] = None,
                    convention: str = "standard") -> GradientEstimate:
    """
    Estimate grad log Q_T xi(m) by the Bismut formula with importance weights.

    Paths are sampled under P; path i contributes (1/T) sum_k Lambda_{t_k} dB_k
    with weight xi(X_T^i) / mean xi. The standard error is the delta-method
    error of this ratio estimator.

    Raises:
        DegenerateInputError: If every weight vanishes
    """
    V = V or ZeroField()

    def reduce_chunk(batch: PathBatch):
        lam = transport_ode(batch, V, convention=convention).matrices
        integral = np.einsum("bkij,bkj->bi", lam[:, :-1], batch.driver) / T
        return xi.value(batch.endpoints), integral

    weights, integrals = _simulate(model, m, V, T, N, n_paths, seed, processor, reduce_chunk)
    if np.any(weights < 0.0):
        raise InvalidInputError("Importance weights must be non-negative")
    mean_w = weights.mean()
    if mean_w <= 0.0:
        raise DegenerateInputError("All importance weights vanished")
    value = (weights[:, None] * integrals).mean(axis=0) / mean_w
    residual = weights[:, None] * (integrals - value) / mean_w
    std_error = residual.std(axis=0, ddof=1) / np.sqrt(len(weights))
    logger.debug("Bismut estimate %s +- %s from %d paths", value, std_error, len(weights))
    return GradientEstimate(value, std_error, len(weights), {"mean_weight": float(mean_w)})


def covariant_ibp_check(model: ManifoldModel, m, V: Optional[VectorFieldSpec], xi: Observable,
                        T: float, n_paths: int, seed: int, N: Optional[int] = None,
                        processor: Optional[BatchProcessor] = None,
                        convention: str = "standard") -> Tuple[np.ndarray, GradientEstimate, TestReport]:
    """
    Integration by parts at time 0: grad Q_T xi(m) against E[Lambda_T u_T^{-1} grad xi(X_T)].

    Returns:
        (lhs in U_0 coordinates, Monte Carlo rhs, z-score report)

    Raises:
        UnsupportedError: If grad Q_T xi(m) has no closed form or quadrature
    """
    V = V or ZeroField()
    m = model.check_point(m)
    _, grad = semigroup_gradient(model, V, xi, T, m)
    lhs = FramePoint.at(model, m).coordinates(grad)

    def reduce_chunk(batch: PathBatch):
        lam_T = transport_ode(batch, V, convention=convention).final
        x_T = batch.endpoints
        coords = model.frame_coordinates(x_T, batch.frames[:, -1], xi.gradient(model, x_T))
        return (np.einsum("bij,bj->bi", lam_T, coords),)

    (samples,) = _simulate(model, m, V, T, N, n_paths, seed, processor, reduce_chunk)
    mean, se = mean_and_se(samples)
    rhs = GradientEstimate(mean, se, len(samples), {"convention": convention})
    report = z_score_report(f"covariant_ibp[{convention}]", mean, se, lhs, len(samples), seed)
    return lhs, rhs, report


def weight_normalization(model: ManifoldModel, m, xi: Observable, T: float, n_paths: int,
                         seed: int, V: Optional[VectorFieldSpec] = None, N: Optional[int] = None,
                         processor: Optional[BatchProcessor] = None) -> TestReport:
    """
    Mean of xi(X_T)/c under P against 1, with c = Q_T xi(m) from closed form
    or quadrature.
    """
    V = V or ZeroField()
    c, _ = semigroup_gradient(model, V, xi, T, np.asarray(m, dtype=float))

    def reduce_chunk(batch: PathBatch):
        return (xi.value(batch.endpoints) / c,)

    (weights,) = _simulate(model, m, V, T, N, n_paths, seed, processor, reduce_chunk)
    mean, se = mean_and_se(weights)
    return z_score_report("weight_normalization", mean, se, 1.0, len(weights), seed)


def newton_martingale(path: Union[PathSample, PathBatch], transport: TransportMatrix,
                      target=None, T: Optional[float] = None,
                      spec: Optional[ConditioningSpec] = None,
                      return_clamped: bool = False):
    """
    N_t = Lambda_t u_t^{-1} grad log q_{T-t}(X_t, y) on the simulated grid.

    Args:
        path: Conditioned path or batch (frames recorded)
        transport: Lambda along the same path(s)
        target: Endpoint y; defaults to the path's own target
        T: Horizon; defaults to the last grid time
        spec: Conditioning spec, required when V is a drifted flat field
        return_clamped: Also return the per-time cut-locus clamp flags

    Returns:
        Array (..., K, d) over the grid times up to T - eps
    """
    if path.frames is None:
        raise InvalidInputError("The Newton martingale needs frames along the path")
    T = float(path.times[-1] if T is None else T)
    batch_like = isinstance(path, PathBatch)
    if target is None:
        target = path.targets if batch_like else path.target
        if target is None:
            raise InvalidInputError("No target endpoint for the Newton martingale")
    target = np.asarray(target, dtype=float)

    keep = len(path.times) - 1 if path.attached else len(path.times)
    times = path.times[:keep]
    if np.any(T - times <= 0.0):
        raise InvalidInputError("Grid reaches the horizon; the Newton martingale lives on [0, T)")
    points = path.points[..., :keep, :]
    frames = path.frames[..., :keep, :, :]
    model = path.model

    grads = np.empty(points.shape)
    clamped = np.zeros(points.shape[:-1], dtype=bool)
    for k, t in enumerate(times):
        if spec is not None:
            grads[..., k, :] = spec.grad_log_q(T - t, points[..., k, :], target)
        else:
            g, c = heat_kernel.grad_log_heat_kernel(model, T - t, points[..., k, :], target,
                                                    return_clamped=True)
            grads[..., k, :] = g
            clamped[..., k] = c
    coords = model.frame_coordinates(points, frames, grads)
    lam = transport.matrices[..., :keep, :, :]
    values = np.einsum("...kij,...kj->...ki", lam, coords)
    if return_clamped:
        return values, clamped
    return values


def hitting_newton_martingale(samples: ExitSamples, spec: RadialSpec,
                              margin: float = 0.1) -> Tuple[np.ndarray, np.ndarray]:
    """
    N_t = Phi_t u_t^{-1} grad log Psi^{T_r}(t, X_t) at the recorded times.

    Psi^tau(t, x) = f(tau - t, |x|) / f(tau, 0) is the exit-time density
    ratio, so its log-gradient is (d/drho log f)(T_r - t, |x|) x / |x|. The
    radial models are flat and Phi = I. Only paths with T_r beyond the last
    recorded time plus ``margin`` are kept; T_r is known at time 0 in the
    enlarged filtration, so the restriction leaves N a martingale.

    Args:
        samples: Exits with positions recorded
        spec: Interval or 3-ball
        margin: Minimum gap between the last recorded time and T_r

    Returns:
        Tuple of (values of shape (n_kept, J, d), indices of the kept paths)
    """
    if spec.kind not in ("interval", "ball3"):
        raise UnsupportedError("The hitting-time Newton martingale needs the eigen-series (interval or ball3)")
    if samples.positions is None or samples.record_times is None:
        raise InvalidInputError("Exit samples carry no recorded positions")
    if margin <= 0.0:
        raise InvalidInputError(f"margin must be positive, got {margin}")
    times = np.asarray(samples.record_times, dtype=float)
    keep = np.nonzero(~samples.censored & (samples.exit_times > times[-1] + margin))[0]
    if len(keep) < 2:
        raise DegenerateInputError(f"Only {len(keep)} exit paths outlast t = {times[-1] + margin:.4g}")

    x = samples.positions[keep]
    s = samples.exit_times[keep, None] - times[None, :]
    rho = np.linalg.norm(x, axis=-1)
    f = exact_exit_density(spec, s, rho)
    slope = exact_exit_density_slope(spec, s, rho)
    with np.errstate(divide="ignore", invalid="ignore"):
        radial = np.where(f > 0.0, slope / f, 0.0)
        direction = np.where(rho[..., None] > 0.0, x / rho[..., None], 0.0)
    grads = radial[..., None] * direction

    phi = integrate_transport(times, np.zeros((len(times), spec.dim, spec.dim)))
    values = np.einsum("kij,bkj->bki", phi, grads)
    return values, keep


def martingale_constancy(values, times: np.ndarray, grid_times: Sequence[float],
                         name: str = "newton_martingale", seed: Optional[int] = None) -> TestReport:
    """
    Constancy of the mean of a vector process across grid times.

    For each time t_j the paired differences N_{t_j} - N_{t_1} are averaged;
    the statistic is the largest |mean| / SE over times and coordinates.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[..., None]
    index = [int(np.argmin(np.abs(times - t))) for t in grid_times]
    base = values[:, index[0]]
    worst = 0.0
    means = []
    for j in index:
        diff = values[:, j] - base
        means.append(values[:, j].mean(axis=0))
        if j == index[0]:
            continue
        mean, se = mean_and_se(diff)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0.0, np.abs(mean) / se, np.where(mean == 0.0, 0.0, np.inf))
        worst = max(worst, float(np.max(z)))
    return TestReport(name=name, statistic=worst, threshold=3.0, passed=bool(worst <= 3.0),
                      n_samples=values.shape[0], kind="z_score", z_score=worst, seed=seed,
                      details={"times": [float(times[j]) for j in index],
                               "means": np.array(means)})
