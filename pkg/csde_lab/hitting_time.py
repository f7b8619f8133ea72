"""
Conditioning the first exit time from a geodesic ball.

For a rotationally symmetric ball of radius r the survival function
u(s, rho) = P(T_r > s | start at radius rho) solves
du/ds = 1/2 (u'' + (A'/A) u') with u = 0 on the sphere, where A is the area of
the sphere of radius rho. Given a target density g = dQ/dP on exit times,

    phi(t, rho) = integral of g(t + s) f(s, rho) ds,    f = -du/ds,

is the space-time harmonic function of the conditioning, and the conditioned
process carries the extra radial drift d/drho log phi.

Profiles come from eigen-series on the interval and the 3-ball, or from a
Crank-Nicolson solve for any area function.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import integrate
from scipy.interpolate import RectBivariateSpline, RegularGridInterpolator
from scipy.linalg import solve_banded

from csde_lab.batch_processor import BatchProcessor
from csde_lab.conditioning import TimeDensity
from csde_lab.errors import (
    BoundaryError,
    InvalidInputError,
    OutOfRangeError,
    ResolutionError,
    UnsupportedError,
)
from csde_lab.stats_harness import mean_and_se
from csde_lab.utils import STREAM_EXIT, path_stream

logger = logging.getLogger(__name__)

DEFAULT_TIME_STEPS = 4000
DEFAULT_RADIUS_STEPS = 200
MASS_TOL = 1e-6
NORMALIZATION_TOL = 1e-4
SUPPORT_FRACTION = 0.9
RANNACHER_HALF_STEPS = 4
EXIT_STEP = 1e-3
NOISE_BLOCK = 512
PHI_FLOOR = 1e-300
SERIES_BLOCK = 8192
RESIDUAL_RHO_FRACTION = 0.8
PHI_RESIDUAL_TOL = 1e-3


@dataclass(frozen=True)
class RadialSpec:
    """
    A rotationally symmetric ball: "interval" (flat d = 1), "ball3" (flat d = 3)
    or "grid" (any area function A, solved numerically).
    """

    kind: str
    radius: float
    area: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("interval", "ball3", "grid"):
            raise InvalidInputError(f"Unknown radial model '{self.kind}'. Valid: interval, ball3, grid")
        if not self.radius > 0.0:
            raise InvalidInputError(f"Radius must be positive, got {self.radius}")
        if self.kind == "grid" and self.area is None:
            raise InvalidInputError("A radial grid needs an area function")

    @property
    def dim(self) -> int:
        return {"interval": 1, "ball3": 3}.get(self.kind, 0)

    def area_fn(self) -> Callable[[np.ndarray], np.ndarray]:
        if self.area is not None:
            return self.area
        if self.kind == "interval":
            return lambda rho: np.ones_like(np.asarray(rho, dtype=float))
        return lambda rho: 4.0 * np.pi * np.asarray(rho, dtype=float) ** 2


def euclidean_interval(radius: float) -> RadialSpec:
    return RadialSpec("interval", float(radius), label="interval")


def euclidean_ball3(radius: float) -> RadialSpec:
    return RadialSpec("ball3", float(radius), label="ball3")


def radial_grid(area: Callable, radius: float, label: str = "grid") -> RadialSpec:
    return RadialSpec("grid", float(radius), area=area, label=label)


AREA_CATALOG = {
    "flat1": lambda rho: np.ones_like(np.asarray(rho, dtype=float)),
    "flat3": lambda rho: 4.0 * np.pi * np.asarray(rho, dtype=float) ** 2,
    "sphere2": lambda rho: 2.0 * np.pi * np.sin(np.asarray(rho, dtype=float)),
    "hyperbolic3": lambda rho: 4.0 * np.pi * np.sinh(np.asarray(rho, dtype=float)) ** 2,
}


@dataclass
class HittingProfile:
    """Survival u(s, rho) and exit density f(s, rho) on a (s, rho) grid."""

    spec: RadialSpec
    s_grid: np.ndarray
    rho_grid: np.ndarray
    survival: np.ndarray
    exit_density: np.ndarray

    @property
    def ds(self) -> float:
        return float(self.s_grid[1] - self.s_grid[0])

    @property
    def drho(self) -> float:
        return float(self.rho_grid[1] - self.rho_grid[0])

    @property
    def tau_max(self) -> float:
        return float(self.s_grid[-1])

    def mass_defect(self) -> np.ndarray:
        """|integral of f ds + u(tau_max) - 1| at every interior radius."""
        mass = integrate.trapezoid(self.exit_density, self.s_grid, axis=0) + self.survival[-1]
        return np.abs(mass[:-1] - 1.0)


@dataclass
class ConditionedExitField:
    """phi on a (t, rho) grid together with the target density it was built from."""

    profile: HittingProfile
    target: TimeDensity
    t_grid: np.ndarray
    phi: np.ndarray
    constant: bool = False
    _drift_spline: Optional[RectBivariateSpline] = field(default=None, repr=False)

    @property
    def t_end(self) -> float:
        return float(self.t_grid[-1])


# ==================== SERIES PROFILES ====================


def _series_terms(spec: RadialSpec, s_min: float) -> int:
    """Terms until exp(-lambda_n s_min) < 1e-17."""
    r = spec.radius
    if spec.kind == "interval":
        # lambda_n = (2n+1)^2 pi^2 / (8 r^2)
        return int(np.ceil(0.5 * (np.sqrt(39.2 * 8.0 * r ** 2 / (np.pi ** 2 * s_min)) - 1.0))) + 2
    return int(np.ceil(np.sqrt(39.2 * 2.0 * r ** 2 / (np.pi ** 2 * s_min)))) + 2


def _eigen_data(spec: RadialSpec, n_terms: int, slope: bool = False):
    """
    Coefficients, decay rates and radial eigenfunctions of the survival series,
    or their rho-derivatives when ``slope`` is set.
    """
    r = spec.radius
    if spec.kind == "interval":
        k = 2 * np.arange(n_terms) + 1
        coeff = (4.0 / np.pi) * (-1.0) ** np.arange(n_terms) / k
        rate = (k * np.pi) ** 2 / (8.0 * r ** 2)
        wave = k * np.pi / (2.0 * r)
        if slope:
            radial = lambda rho: -wave * np.sin(wave * rho[:, None])
        else:
            radial = lambda rho: np.cos(wave * rho[:, None])
    else:
        n = np.arange(1, n_terms + 1)
        coeff = 2.0 * (-1.0) ** (n + 1)
        rate = (n * np.pi) ** 2 / (2.0 * r ** 2)
        if slope:
            radial = lambda rho: _sinc_slope(n * rho[:, None] / r) * n / r
        else:
            radial = lambda rho: np.sinc(n * rho[:, None] / r)
    return coeff, rate, radial


def _sinc_slope(x: np.ndarray) -> np.ndarray:
    """d/dx of sin(pi x) / (pi x); zero at x = 0."""
    safe = np.where(x == 0.0, 1.0, x)
    return np.where(x == 0.0, 0.0, (np.cos(np.pi * safe) - np.sinc(safe)) / safe)


def _series(spec: RadialSpec, s, rho, n_terms: Optional[int], derivative: bool, slope: bool = False):
    if spec.kind not in ("interval", "ball3"):
        raise UnsupportedError(f"No eigen-series for radial model '{spec.kind}'")
    s, rho = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(rho, dtype=float))
    shape = s.shape
    s, rho = s.ravel(), rho.ravel()
    positive = s > 0.0
    if n_terms is None:
        n_terms = _series_terms(spec, float(np.min(s[positive])) if np.any(positive) else 1.0)
    coeff, rate, radial = _eigen_data(spec, n_terms, slope)
    if derivative:
        coeff = coeff * rate
    out = np.zeros(s.shape)
    for start in range(0, len(s), SERIES_BLOCK):
        block = slice(start, start + SERIES_BLOCK)
        s_b = np.where(positive[block], s[block], np.inf)
        out[block] = np.sum(coeff * radial(rho[block]) * np.exp(-rate * s_b[:, None]), axis=1)
    out = np.where(rho >= spec.radius, 0.0, out)
    return out.reshape(shape), positive.reshape(shape), (rho < spec.radius).reshape(shape)


def exact_survival(spec: RadialSpec, s, rho, n_terms: Optional[int] = None) -> np.ndarray:
    """
    Survival function from the eigen-series (interval and 3-ball).

    u(0, rho) = 1 inside and u(s, r) = 0 are imposed exactly.
    """
    u, positive, inside = _series(spec, s, rho, n_terms, derivative=False)
    return np.where(positive, u, np.where(inside, 1.0, 0.0))


def exact_exit_density(spec: RadialSpec, s, rho, n_terms: Optional[int] = None) -> np.ndarray:
    """f(s, rho) = -du/ds from the differentiated eigen-series (s > 0)."""
    if np.any(np.asarray(s) <= 0.0):
        raise OutOfRangeError("The exit density series needs s > 0")
    f, _, _ = _series(spec, s, rho, n_terms, derivative=True)
    return f


def exact_exit_density_slope(spec: RadialSpec, s, rho, n_terms: Optional[int] = None) -> np.ndarray:
    """d/drho f(s, rho) from the eigen-series (s > 0)."""
    if np.any(np.asarray(s) <= 0.0):
        raise OutOfRangeError("The exit density series needs s > 0")
    slope, _, _ = _series(spec, s, rho, n_terms, derivative=True, slope=True)
    return slope


# ==================== CRANK-NICOLSON ====================


def _generator_bands(spec: RadialSpec, rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Tridiagonal flux-form discretization of 1/2 (1/A) d/drho (A du/drho) on
    nodes 0..n-1 (node n carries the Dirichlet value). Node 0 is a half cell
    with zero flux through rho = 0.
    """
    area = spec.area_fn()
    drho = rho[1] - rho[0]
    n = len(rho) - 1
    half = rho[:-1] + 0.5 * drho
    a_half = area(half)
    volumes = np.empty(n)
    for i in range(n):
        lo = max(rho[i] - 0.5 * drho, 0.0)
        volumes[i] = integrate.quad(lambda x: float(area(x)), lo, rho[i] + 0.5 * drho)[0]
    if np.any(volumes <= 0.0):
        raise ResolutionError("Area function vanishes on a grid cell")
    upper = np.zeros(n)
    lower = np.zeros(n)
    diag = np.zeros(n)
    for i in range(n):
        right = a_half[i] / drho
        diag[i] -= right
        if i + 1 < n:
            upper[i] = right
        if i > 0:
            left = a_half[i - 1] / drho
            diag[i] -= left
            lower[i] = left
    scale = 0.5 / volumes
    return scale * lower, scale * diag, scale * upper


def _banded(lower, diag, upper, factor):
    """Band storage of I + factor * L for solve_banded((1, 1), ...)."""
    n = len(diag)
    ab = np.zeros((3, n))
    ab[0, 1:] = factor * upper[:-1]
    ab[1] = 1.0 + factor * diag
    ab[2, :-1] = factor * lower[1:]
    return ab


def _apply(lower, diag, upper, u, factor):
    out = u + factor * diag * u
    out[:-1] += factor * upper[:-1] * u[1:]
    out[1:] += factor * lower[1:] * u[:-1]
    return out


def crank_nicolson_survival(spec: RadialSpec, s_grid: np.ndarray, rho_grid: np.ndarray) -> np.ndarray:
    """
    Survival on the grid by Crank-Nicolson with Rannacher startup (the first
    step replaced by implicit-Euler half steps).

    Raises:
        ResolutionError: If the grid is too coarse or the solution loses monotonicity
    """
    n_rho = len(rho_grid) - 1
    if n_rho < 20 or len(s_grid) < 50:
        raise ResolutionError(f"Grid too coarse for Crank-Nicolson: {n_rho} radius and {len(s_grid) - 1} time steps")
    lower, diag, upper = _generator_bands(spec, rho_grid)
    ds = s_grid[1] - s_grid[0]

    u = np.ones(n_rho)
    out = np.zeros((len(s_grid), n_rho + 1))
    out[0, :n_rho] = 1.0

    half = 0.5 * ds
    startup = RANNACHER_HALF_STEPS // 2
    implicit = _banded(lower, diag, upper, -half)
    cn_left = _banded(lower, diag, upper, -0.5 * ds)

    for k in range(1, len(s_grid)):
        if k <= startup:
            for _ in range(2):
                u = solve_banded((1, 1), implicit, u)
        else:
            u = solve_banded((1, 1), cn_left, _apply(lower, diag, upper, u, 0.5 * ds))
        out[k, :n_rho] = u

    increase = np.max(np.diff(out, axis=0))
    if increase > 1e-8:
        raise ResolutionError(f"Survival increased by {increase:.2e} in time; refine the grid")
    return out


# ==================== PROFILES ====================


def exit_density(spec: RadialSpec, tau_max: Optional[float] = None,
                 n_s: int = DEFAULT_TIME_STEPS, n_rho: int = DEFAULT_RADIUS_STEPS) -> HittingProfile:
    """
    Exit-time survival and density on a (s, rho) grid.

    Args:
        spec: Radial model
        tau_max: Time horizon of the grid (default 16 r^2, at least 5 r^2)
        n_s: Number of time steps
        n_rho: Number of radius steps

    Returns:
        HittingProfile whose density is -du/ds by centered differences, so the
        trapezoid mass plus the remaining survival is one

    Raises:
        InvalidInputError: If tau_max < 5 r^2
        ResolutionError: If the Crank-Nicolson grid is too coarse
    """
    r = spec.radius
    tau_max = 16.0 * r ** 2 if tau_max is None else float(tau_max)
    if tau_max < 5.0 * r ** 2:
        raise InvalidInputError(f"tau_max must be at least 5 r^2 = {5.0 * r ** 2}, got {tau_max}")
    s_grid = np.linspace(0.0, tau_max, int(n_s) + 1)
    rho_grid = np.linspace(0.0, r, int(n_rho) + 1)

    if spec.kind == "grid":
        survival = crank_nicolson_survival(spec, s_grid, rho_grid)
    else:
        survival = exact_survival(spec, s_grid[:, None], rho_grid[None, :])
    density = -np.gradient(survival, s_grid, axis=0, edge_order=1)

    profile = HittingProfile(spec, s_grid, rho_grid, survival, density)
    defect = float(np.max(profile.mass_defect()))
    tail = float(np.max(survival[-1]))
    logger.debug("Exit profile %s: mass defect %.2e, tail %.2e", spec.kind, defect, tail)
    if tail > MASS_TOL:
        logger.warning("Survival at tau_max is %.2e; increase tau_max", tail)
    return profile


def mean_exit_time(profile: HittingProfile, rho: float = 0.0) -> float:
    """E[T_r] from a start at radius rho, as the time integral of the survival."""
    column = _column(profile, rho)
    return float(integrate.trapezoid(column, profile.s_grid))


def survival_at(profile: HittingProfile, s, rho) -> np.ndarray:
    """Bilinear read-out of the survival grid."""
    interp = RegularGridInterpolator((profile.s_grid, profile.rho_grid), profile.survival)
    s, rho = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(rho, dtype=float))
    return interp(np.stack([s.ravel(), rho.ravel()], axis=-1)).reshape(s.shape)


def _column(profile: HittingProfile, rho: float) -> np.ndarray:
    if not 0.0 <= rho <= profile.spec.radius:
        raise OutOfRangeError(f"rho = {rho} outside [0, {profile.spec.radius}]")
    interp = RegularGridInterpolator((profile.s_grid, profile.rho_grid), profile.survival)
    points = np.stack([profile.s_grid, np.full_like(profile.s_grid, rho)], axis=-1)
    return interp(points)


def exit_cdf(profile: HittingProfile, rho: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    """CDF of T_r from radius rho; uses the eigen-series where available."""
    spec = profile.spec
    if spec.kind in ("interval", "ball3"):
        return lambda s: 1.0 - exact_survival(spec, np.maximum(np.asarray(s, dtype=float), 0.0), rho)
    column = _column(profile, rho)
    return lambda s: np.interp(s, profile.s_grid, 1.0 - column)


# ==================== TARGETS ====================


def constant_target() -> TimeDensity:
    return TimeDensity(lambda s: np.ones_like(np.asarray(s, dtype=float)), "constant", True)


def _normalized(profile: HittingProfile, raw: Callable, label: str) -> TimeDensity:
    """Scale ``raw`` so its trapezoid integral against the grid exit density at rho = 0 is one."""
    mass = float(integrate.trapezoid(raw(profile.s_grid) * profile.exit_density[:, 0], profile.s_grid))
    if mass <= 0.0:
        raise InvalidInputError(f"The exit law gives no mass to the target {label}")
    return TimeDensity(lambda s: raw(s) / mass, label)


def bump_target(profile: HittingProfile, tau0: float, width_fraction: float = 0.05) -> TimeDensity:
    """Narrow Gaussian bump at tau0 (width width_fraction * tau0), normalized against the exit law."""
    width = width_fraction * tau0
    raw = lambda s: np.exp(-0.5 * ((np.asarray(s, dtype=float) - tau0) / width) ** 2)
    return _normalized(profile, raw, f"bump({tau0:g})")


def interval_target(profile: HittingProfile, a: float, b: float) -> TimeDensity:
    """Normalized indicator of [a, b]: exit conditioned to happen in that window."""
    if not 0.0 <= a < b:
        raise InvalidInputError(f"Need 0 <= a < b, got [{a}, {b}]")
    raw = lambda s: np.where((np.asarray(s) >= a) & (np.asarray(s) <= b), 1.0, 0.0)
    return _normalized(profile, raw, f"interval({a:g},{b:g})")


def interval_target_cdf(profile: HittingProfile, a: float, b: float) -> Callable:
    """CDF of T_r under the interval target: the exit law restricted to [a, b]."""
    cdf = exit_cdf(profile, 0.0)
    fa, fb = float(cdf(a)), float(cdf(b))
    return lambda s: np.clip((cdf(np.clip(s, a, b)) - fa) / (fb - fa), 0.0, 1.0)


# ==================== CONDITIONED FIELD ====================


def _trapezoid_weights(n: int, ds: float) -> np.ndarray:
    w = np.full(n, ds)
    w[0] = w[-1] = 0.5 * ds
    return w


def phi_from_target(profile: HittingProfile, g: TimeDensity, t_stride: int = 10) -> ConditionedExitField:
    """
    phi(t, rho) = integral of g(t + s) f(s, rho) ds on the profile grid.

    Args:
        profile: Exit profile
        g: Target density of the exit time against its law
        t_stride: Keep every t_stride-th time of the s grid for t

    Raises:
        InvalidInputError: If g is negative, not normalized within 1e-4 or not
            supported in [0, 0.9 tau_max]
    """
    s = profile.s_grid
    if g.is_constant:
        t_grid = s[::t_stride]
        phi = np.ones((len(t_grid), len(profile.rho_grid)))
        return ConditionedExitField(profile, g, t_grid, phi, constant=True)

    values = np.asarray(g.g(s), dtype=float)
    if np.any(values < 0.0):
        raise InvalidInputError(f"Target density {g.label} takes negative values")
    support_end = SUPPORT_FRACTION * profile.tau_max
    outside = values[s > support_end]
    if outside.size and np.max(outside) > 1e-12 * max(1.0, np.max(values)):
        raise InvalidInputError(f"Target density {g.label} must vanish beyond {support_end:.4g}")
    weights = _trapezoid_weights(len(s), profile.ds)
    normalization = float(np.sum(weights * values * profile.exit_density[:, 0]))
    if abs(normalization - 1.0) > NORMALIZATION_TOL:
        raise InvalidInputError(
            f"Target density {g.label} integrates to {normalization:.6f} against the exit law, expected 1"
        )

    last = int(np.max(np.nonzero(values)[0])) if np.any(values > 0.0) else 0
    padded = np.concatenate([values, np.zeros(len(s))])
    windows = sliding_window_view(padded, len(s))[: last + 1 : t_stride]
    phi = (windows * weights) @ profile.exit_density
    phi[:, -1] = values[: last + 1 : t_stride]
    t_grid = s[: last + 1 : t_stride]
    if len(t_grid) < 2:
        raise ResolutionError(f"Target density {g.label} is supported on fewer than two phi times; lower t_stride")
    logger.debug("phi for %s on %d times, phi(0,0) = %.8f", g.label, len(t_grid), phi[0, 0])
    return ConditionedExitField(profile, g, t_grid, phi)


def phi_residual(field: ConditionedExitField, rho_fraction: float = RESIDUAL_RHO_FRACTION) -> float:
    """
    Scaled residual of d(phi)/dt + 1/2 (phi'' + (A'/A) phi') on interior
    nodes with 0 < rho <= rho_fraction * r, divided by the largest |d(phi)/dt|.
    The boundary layer at small s is not resolved by the time grid, so the
    outer shell is left out.
    """
    if field.constant:
        return 0.0
    phi, t, rho = field.phi, field.t_grid, field.profile.rho_grid
    area = field.profile.spec.area_fn()
    drho = rho[1] - rho[0]
    dphi_dt = np.gradient(phi, t, axis=0)
    dphi = np.gradient(phi, drho, axis=1)
    d2phi = np.gradient(dphi, drho, axis=1)
    inner = slice(1, max(int(rho_fraction * (len(rho) - 1)), 2) + 1)
    r_in = rho[inner]
    log_area_slope = (np.log(area(r_in + 1e-6)) - np.log(area(r_in - 1e-6))) / 2e-6
    residual = dphi_dt[1:-1, inner] + 0.5 * (d2phi[1:-1, inner] + log_area_slope * dphi[1:-1, inner])
    scale = np.max(np.abs(dphi_dt[1:-1, inner]))
    return float(np.max(np.abs(residual)) / scale) if scale > 0 else 0.0


def _drift_spline(field: ConditionedExitField) -> RectBivariateSpline:
    if field._drift_spline is None:
        rho = field.profile.rho_grid[:-1]
        log_phi = np.log(np.maximum(field.phi[:, :-1], PHI_FLOOR))
        slope = np.gradient(log_phi, rho, axis=1)
        slope[:, 0] = 0.0
        field._drift_spline = RectBivariateSpline(field.t_grid, rho, slope, kx=1, ky=3)
    return field._drift_spline


def conditioned_exit_drift(field: ConditionedExitField, t, rho) -> np.ndarray:
    """
    Radial drift d/drho log phi(t, rho): centered differences on the grid,
    linear in t and cubic in rho between nodes.

    Raises:
        BoundaryError: If rho reaches the sphere of radius r
    """
    t = np.asarray(t, dtype=float)
    rho = np.asarray(rho, dtype=float)
    r = field.profile.spec.radius
    if np.any(rho >= r):
        raise BoundaryError(f"The exit drift is not defined on the sphere rho = {r}")
    if np.any(rho < 0.0):
        raise OutOfRangeError("Radius must be non-negative")
    if field.constant:
        return np.zeros(np.broadcast_shapes(t.shape, rho.shape))
    spline = _drift_spline(field)
    rho_top = field.profile.rho_grid[-2]
    t_c = np.clip(t, field.t_grid[0], field.t_grid[-1])
    return spline.ev(t_c, np.minimum(rho, rho_top))


# ==================== SAMPLING ====================


@dataclass
class ExitSamples:
    """Exit times per path; ``positions`` (B, J, d) holds X at ``record_times``, NaN after exit."""

    path_ids: np.ndarray
    exit_times: np.ndarray
    censored: np.ndarray
    seed: int
    record_times: Optional[np.ndarray] = None
    positions: Optional[np.ndarray] = None

    @property
    def observed(self) -> np.ndarray:
        return self.exit_times[~self.censored]


def _simulate_exits(field: Optional[ConditionedExitField], spec: RadialSpec, path_ids: np.ndarray,
                    seed: int, h: float, t_limit: float,
                    record_steps: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    d = spec.dim
    r = spec.radius
    B = len(path_ids)
    rngs = [path_stream(seed, pid, STREAM_EXIT) for pid in path_ids]
    x = np.zeros((B, d))
    positions = None if record_steps is None else np.full((B, len(record_steps), d), np.nan)
    exit_times = np.full(B, np.nan)
    alive = np.ones(B, dtype=bool)
    sqrt_h = np.sqrt(h)
    k = 0
    noise = uniforms = None
    while np.any(alive):
        slot = k % NOISE_BLOCK
        if slot == 0:
            noise = np.empty((B, NOISE_BLOCK, d))
            uniforms = np.empty((B, NOISE_BLOCK))
            for i in np.nonzero(alive)[0]:
                noise[i] = rngs[i].standard_normal((NOISE_BLOCK, d))
                uniforms[i] = rngs[i].random(NOISE_BLOCK)
        t = k * h
        if t >= t_limit:
            exit_times[alive] = t
            break
        if positions is not None:
            for j in np.nonzero(record_steps == k)[0]:
                positions[alive, j] = x[alive]
        idx = np.nonzero(alive)[0]
        xa = x[idx]
        rho = np.linalg.norm(xa, axis=1)
        if field is not None and not field.constant:
            radial = conditioned_exit_drift(field, np.full(len(idx), t), rho)
            # an inward step never carries the path past the centre
            radial = np.maximum(radial, -rho / h)
            direction = np.where(rho[:, None] > 0.0, xa / np.where(rho > 0.0, rho, 1.0)[:, None], 0.0)
            drift = radial[:, None] * direction
        else:
            drift = 0.0
        x_new = xa + drift * h + sqrt_h * noise[idx, slot]
        rho_new = np.linalg.norm(x_new, axis=1)

        crossed = rho_new >= r
        gap_old = r - rho
        gap_new = np.maximum(r - rho_new, 0.0)
        bridge = np.exp(-2.0 * gap_old * gap_new / h)
        hidden = (~crossed) & (uniforms[idx, slot] < bridge)
        frac = np.where(crossed, gap_old / np.maximum(rho_new - rho, 1e-300),
                        gap_old / np.maximum(gap_old + gap_new, 1e-300))
        done = crossed | hidden
        exit_times[idx[done]] = t + h * np.clip(frac[done], 0.0, 1.0)
        alive[idx[done]] = False
        x[idx] = x_new
        k += 1
    censored = np.isnan(exit_times) | (exit_times >= t_limit)
    return exit_times, censored, positions


def sample_conditioned_exit(spec: RadialSpec, field: Optional[ConditionedExitField], n_paths: int,
                            seed: int, h: float = EXIT_STEP,
                            processor: Optional[BatchProcessor] = None,
                            record_times=None) -> ExitSamples:
    """
    Exit times of Brownian motion from the ball under the conditioned drift.

    The full process is simulated (the line in d = 1, space in d = 3) with the
    radial drift d/drho log phi added. Crossings are timed by linear
    interpolation within the step, plus a Brownian-bridge test for excursions
    between grid times. Paths still inside at the end of the phi grid (or at
    tau_max) are censored.

    ``record_times`` (multiples of h below the censoring time) keeps the
    position of every path still inside the ball at those times.
    """
    if spec.kind not in ("interval", "ball3"):
        raise UnsupportedError("Conditioned exits are simulated on the interval and the 3-ball")
    if int(n_paths) < 1:
        raise InvalidInputError(f"n_paths must be at least 1, got {n_paths}")
    if field is None or field.constant:
        t_limit = field.profile.tau_max if field is not None else 16.0 * spec.radius ** 2
    else:
        t_limit = field.t_end
    processor = processor or BatchProcessor()
    record_steps = None
    if record_times is not None:
        record_times = np.asarray(record_times, dtype=float)
        record_steps = np.rint(record_times / h).astype(int)
        if np.any(np.abs(record_steps * h - record_times) > 1e-9) or np.any(record_times >= t_limit):
            raise InvalidInputError(f"record_times must be multiples of h = {h} below {t_limit:.4g}")

    def run(start, stop):
        ids = np.arange(start, stop)
        times, censored, positions = _simulate_exits(field, spec, ids, seed, h, t_limit, record_steps)
        return ids, times, censored, positions

    parts = processor.run(run, int(n_paths), desc="exits")
    ids = np.concatenate([p[0] for p in parts])
    times = np.concatenate([p[1] for p in parts])
    censored = np.concatenate([p[2] for p in parts])
    if np.any(censored):
        logger.warning("%d of %d exit paths censored at t = %.4g", int(censored.sum()), len(ids), t_limit)
    positions = None if record_steps is None else np.concatenate([p[3] for p in parts])
    return ExitSamples(ids, times, censored, int(seed), record_times, positions)


def target_expectation(samples: ExitSamples, g: TimeDensity) -> Tuple[float, float]:
    """Monte Carlo E_P[g(T_r)] with its standard error, from unconditioned exits."""
    values = np.asarray(g.g(samples.observed), dtype=float)
    mean, se = mean_and_se(values)
    return float(mean), float(se)
