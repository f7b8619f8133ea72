"""
Stochastic development on the orthonormal frame bundle.

Paths are integrated with the geodesic Euler scheme: each step moves the base
point along the geodesic with initial velocity u_k(a_k h + dB_k) and carries
the frame along that geodesic by parallel transport, followed by modified
Gram-Schmidt. All paths of a chunk advance together; every path draws its
increments from its own counter-based stream, so the result for a path id
does not depend on how paths are chunked.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from csde_lab.batch_processor import BatchProcessor
from csde_lab.errors import InvalidInputError, NumericalError
from csde_lab.geometry import FramePoint, ManifoldModel, VectorFieldSpec, ZeroField
from csde_lab.utils import STREAM_DEVELOPMENT, path_stream

logger = logging.getLogger(__name__)

STEPS_PER_UNIT_TIME = 800


def default_steps(horizon: float) -> int:
    """Default grid size, 800 steps per unit time."""
    return max(1, int(np.ceil(STEPS_PER_UNIT_TIME * float(horizon) - 1e-9)))


@dataclass(frozen=True)
class StepState:
    """What an extra drift sees at step k: the current points and frames of the chunk."""

    t: float
    k: int
    points: np.ndarray
    frames: np.ndarray
    path_ids: np.ndarray


ExtraDrift = Callable[[StepState], np.ndarray]


@dataclass
class PathSample:
    """One discretized frame-bundle path with its anti-development."""

    model: ManifoldModel
    times: np.ndarray
    points: np.ndarray
    frames: Optional[np.ndarray]
    driver: np.ndarray
    realized_drift: np.ndarray
    seed: int
    path_id: int
    attached: bool = False
    target: Optional[np.ndarray] = None
    target_index: Optional[int] = None

    def frame_point(self, k: int) -> FramePoint:
        if self.frames is None:
            raise InvalidInputError("Frames were not recorded for this path")
        return FramePoint(self.model, self.points[k], self.frames[k])

    @property
    def endpoint(self) -> np.ndarray:
        return self.points[-1]


@dataclass
class PathBatch:
    """
    A set of paths on one shared time grid, stored as stacked arrays.

    Shapes: points (B, K, D), frames (B, K, D, d), driver and realized_drift
    (B, K-1, d). For attached paths the last step is the synthetic jump to the
    endpoint and its driver and drift rows are NaN.
    """

    model: ManifoldModel
    times: np.ndarray
    points: np.ndarray
    frames: Optional[np.ndarray]
    driver: np.ndarray
    realized_drift: np.ndarray
    path_ids: np.ndarray
    seed: int
    attached: bool = False
    targets: Optional[np.ndarray] = None
    target_index: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.path_ids)

    @property
    def endpoints(self) -> np.ndarray:
        return self.points[:, -1]

    @property
    def free_points(self) -> np.ndarray:
        """Points of the simulated part of the grid (the attached endpoint excluded)."""
        return self.points[:, :-1] if self.attached else self.points

    @property
    def free_times(self) -> np.ndarray:
        return self.times[:-1] if self.attached else self.times

    def time_index(self, t: float) -> int:
        """Index of the grid time closest to t."""
        return int(np.argmin(np.abs(self.times - t)))

    def path(self, i: int) -> PathSample:
        return PathSample(
            model=self.model,
            times=self.times,
            points=self.points[i],
            frames=None if self.frames is None else self.frames[i],
            driver=self.driver[i],
            realized_drift=self.realized_drift[i],
            seed=self.seed,
            path_id=int(self.path_ids[i]),
            attached=self.attached,
            target=None if self.targets is None else self.targets[i],
            target_index=None if self.target_index is None else int(self.target_index[i]),
        )

    @staticmethod
    def concat(batches: Sequence["PathBatch"]) -> "PathBatch":
        first = batches[0]
        if len(batches) == 1:
            return first

        def stack(name):
            parts = [getattr(b, name) for b in batches]
            return None if parts[0] is None else np.concatenate(parts, axis=0)

        return replace(
            first,
            points=stack("points"),
            frames=stack("frames"),
            driver=stack("driver"),
            realized_drift=stack("realized_drift"),
            path_ids=stack("path_ids"),
            targets=stack("targets"),
            target_index=stack("target_index"),
        )


def draw_drivers(seed: int, path_ids: Sequence[int], n_steps: int, dim: int, h: float) -> np.ndarray:
    """Brownian increments dB_k ~ Normal(0, h I) for each path, from its own stream."""
    drivers = np.empty((len(path_ids), n_steps, dim))
    for row, pid in enumerate(path_ids):
        drivers[row] = path_stream(seed, pid, STREAM_DEVELOPMENT).standard_normal((n_steps, dim))
    return drivers * np.sqrt(h)


def _check_drift(model: ManifoldModel, points: np.ndarray, drift: np.ndarray, k: int, source: str):
    if not np.all(np.isfinite(drift)):
        raise NumericalError(f"Non-finite {source}", step=k)
    if drift.shape != points.shape:
        raise InvalidInputError(f"{source} has shape {drift.shape}, expected {points.shape}")
    model.check_tangent(points, drift, source)


def integrate(model: ManifoldModel, u0: FramePoint, V: VectorFieldSpec, drivers: np.ndarray,
              h: float, path_ids: Sequence[int], seed: int,
              extra_drift: Optional[ExtraDrift] = None, store_frames: bool = True) -> PathBatch:
    """
    Run the geodesic Euler scheme for a chunk of paths with given increments.

    Args:
        model: Catalog model
        u0: Initial frame point, shared by all paths
        V: Drift field of the underlying diffusion
        drivers: Brownian increments, shape (B, n_steps, d)
        h: Step size
        path_ids: Path ids of the rows
        seed: Seed recorded with the batch
        extra_drift: Optional additional drift evaluated on the chunk state
        store_frames: Record the frame at every grid time

    Returns:
        PathBatch on the grid 0, h, ..., n_steps h
    """
    B, n_steps, d = drivers.shape
    D = model.ambient_dim
    path_ids = np.asarray(path_ids, dtype=np.int64)

    points = np.empty((B, n_steps + 1, D))
    frames = np.empty((B, n_steps + 1, D, d)) if store_frames else None
    realized = np.empty((B, n_steps, d))

    x = np.broadcast_to(u0.base, (B, D)).copy()
    u = np.broadcast_to(u0.frame, (B, D, d)).copy()
    points[:, 0] = x
    if store_frames:
        frames[:, 0] = u

    for k in range(n_steps):
        drift = V.value(model, x)
        if extra_drift is not None:
            extra = np.asarray(extra_drift(StepState(k * h, k, x, u, path_ids)), dtype=float)
            _check_drift(model, x, extra, k, "extra drift")
            drift = drift + extra
        elif not np.all(np.isfinite(drift)):
            raise NumericalError("Non-finite drift", step=k)

        a = model.frame_coordinates(x, u, drift)
        realized[:, k] = a
        velocity = model.frame_vector(u, a * h + drivers[:, k])
        x_next = model.exp(x, velocity)
        u = model.orthonormalize(x_next, model.transport_frame(x, velocity, u))
        x = x_next
        if not np.all(np.isfinite(x)):
            raise NumericalError("Path left the manifold", step=k)

        points[:, k + 1] = x
        if store_frames:
            frames[:, k + 1] = u

    return PathBatch(
        model=model,
        times=h * np.arange(n_steps + 1),
        points=points,
        frames=frames,
        driver=drivers.copy(),
        realized_drift=realized,
        path_ids=path_ids,
        seed=int(seed),
    )


def develop_path(model: ManifoldModel, u0: FramePoint, V: Optional[VectorFieldSpec],
                 extra_drift: Optional[ExtraDrift], T: float, N: int,
                 rng: np.random.Generator, seed: int = 0, path_id: int = 0) -> PathSample:
    """
    Integrate one path of the horizontal SDE driven by ``rng``.

    Args:
        model: Catalog model
        u0: Initial frame point
        V: Drift field (None for Brownian motion)
        extra_drift: Optional additional drift, a function of the StepState
        T: Horizon (T = 0 gives the constant path)
        N: Number of steps (N >= 1)
        rng: Random stream for the increments
        seed, path_id: Reproducibility metadata stored on the sample

    Returns:
        PathSample with N + 1 grid points

    Raises:
        InvalidInputError: If N < 1 or the extra drift is not tangent
        NumericalError: If the drift becomes non-finite (carries the step)
    """
    if int(N) < 1:
        raise InvalidInputError(f"Number of steps must be at least 1, got {N}")
    if T < 0:
        raise InvalidInputError(f"Horizon must be non-negative, got {T}")
    h = float(T) / int(N)
    drivers = rng.standard_normal((1, int(N), model.dim)) * np.sqrt(h)
    batch = integrate(model, u0, V or ZeroField(), drivers, h, [path_id], seed, extra_drift)
    return batch.path(0)


def geodesic_path(model: ManifoldModel, u0: FramePoint, velocity, T: float, N: int) -> PathSample:
    """The geodesic with initial velocity u0(velocity), with its parallel frame, on N steps."""
    h = float(T) / int(N)
    a = np.asarray(velocity, dtype=float)
    drivers = np.broadcast_to(a * h, (1, int(N), model.dim)).copy()
    return integrate(model, u0, ZeroField(), drivers, h, [0], 0).path(0)


def sample_chunk(model: ManifoldModel, u0: FramePoint, V: VectorFieldSpec, T: float, N: int,
                 seed: int, path_ids: Sequence[int], extra_drift: Optional[ExtraDrift] = None,
                 store_frames: bool = True) -> PathBatch:
    """Brownian paths for the given ids, drawn from their counter-based streams."""
    h = float(T) / int(N)
    drivers = draw_drivers(seed, path_ids, int(N), model.dim, h)
    return integrate(model, u0, V, drivers, h, path_ids, seed, extra_drift, store_frames)


def sample_bm(model: ManifoldModel, m, V: Optional[VectorFieldSpec], T: float,
              N: Optional[int], n_paths: int, seed: int,
              processor: Optional[BatchProcessor] = None,
              store_frames: bool = True) -> PathBatch:
    """
    Sample ``n_paths`` independent paths of Brownian motion with drift V from m.

    The initial frame is the catalog frame at m; path i uses the stream keyed
    by (seed, i), so repeated calls with the same seed are bitwise identical.
    """
    if int(n_paths) < 1:
        raise InvalidInputError(f"n_paths must be at least 1, got {n_paths}")
    N = default_steps(T) if N is None else int(N)
    if N < 1:
        raise InvalidInputError(f"Number of steps must be at least 1, got {N}")
    u0 = FramePoint.at(model, m)
    V = V or ZeroField()
    processor = processor or BatchProcessor()

    def run(start, stop):
        return sample_chunk(model, u0, V, T, N, seed, range(start, stop), store_frames=store_frames)

    batches: List[PathBatch] = processor.run(run, int(n_paths), desc="develop")
    logger.debug("Sampled %d paths on %r with N=%d", n_paths, model, N)
    return PathBatch.concat(batches)
