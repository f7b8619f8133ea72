"""
Statistical tests that turn law equalities into pass/fail reports.

Every test returns a TestReport. p-value tests pass when p >= alpha, z-score
tests when |z| <= 3.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

from csde_lab.errors import BinningError, InvalidInputError, UnderpoweredError
from csde_lab.geometry import ManifoldModel
from csde_lab.utils import STREAM_PERMUTATION, path_stream

logger = logging.getLogger(__name__)

ALPHA = 0.01
Z_THRESHOLD = 3.0
MIN_SAMPLES = 10
MIN_EXPECTED_COUNT = 5.0

DistanceFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class TestReport:
    """Outcome of one statistical or deterministic check."""

    __test__ = False

    name: str
    statistic: float
    threshold: float
    passed: bool
    n_samples: int
    kind: str = "p_value"
    p_value: Optional[float] = None
    z_score: Optional[float] = None
    seed: Optional[int] = None
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        record = asdict(self)
        record["pass"] = record.pop("passed")
        return record

    def to_json(self) -> str:
        return json.dumps(plain_values(self.to_dict()), sort_keys=True, allow_nan=True)

    def status_line(self) -> str:
        mark = "✓" if self.passed else "✗"
        if self.kind == "p_value":
            value = f"p={self.p_value:.4g} (alpha {self.threshold})"
        elif self.kind == "z_score":
            value = f"|z|={abs(self.z_score):.3f} (limit {self.threshold})"
        else:
            value = f"{self.statistic:.3e} (limit {self.threshold:.1e})"
        return f"{mark} {self.name}: {value}"


def plain_values(value):
    """numpy scalars/arrays to JSON-ready Python values with 17 significant digits."""
    if isinstance(value, dict):
        return {str(k): plain_values(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain_values(v) for v in value]
    if isinstance(value, np.ndarray):
        return plain_values(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(f"{float(value):.17g}")
    return value


def bound_report(name: str, value: float, limit: float, n_samples: int = 0,
                 seed: Optional[int] = None, **details) -> TestReport:
    """A deterministic check: passes when value <= limit."""
    value = float(value)
    return TestReport(name=name, statistic=value, threshold=float(limit),
                      passed=bool(np.isfinite(value) and value <= limit),
                      n_samples=n_samples, kind="bound", seed=seed, details=details)


# ==================== MONTE CARLO SUMMARIES ====================


def mean_and_se(values, axis: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Sample mean and its standard error along ``axis``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    if n < 2:
        raise UnderpoweredError(f"Need at least 2 samples for a standard error, got {n}")
    return values.mean(axis=axis), values.std(axis=axis, ddof=1) / np.sqrt(n)


def z_score_report(name: str, estimate, std_error, expected, n_samples: int,
                   seed: Optional[int] = None, threshold: float = Z_THRESHOLD,
                   **details) -> TestReport:
    """
    Compare a Monte Carlo estimate with a reference value coordinate-wise.

    The reported z is the coordinate with the largest |z|; a zero standard
    error counts as agreement only when the difference is exactly zero.
    """
    estimate = np.atleast_1d(np.asarray(estimate, dtype=float))
    std_error = np.atleast_1d(np.asarray(std_error, dtype=float))
    expected = np.broadcast_to(np.asarray(expected, dtype=float), estimate.shape)
    diff = estimate - expected
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std_error > 0.0, diff / std_error, np.where(diff == 0.0, 0.0, np.inf))
    worst = int(np.argmax(np.abs(z)))
    details.update(estimate=estimate, std_error=std_error, expected=expected)
    return TestReport(name=name, statistic=float(np.abs(z[worst])), threshold=threshold,
                      passed=bool(abs(z[worst]) <= threshold), n_samples=int(n_samples),
                      kind="z_score", z_score=float(z[worst]), seed=seed, details=details)


def proportion_interval(name: str, count: int, n: int, p: float, level: float = 0.99,
                        seed: Optional[int] = None) -> TestReport:
    """Whether ``count`` successes in ``n`` trials lie in the central binomial interval of p."""
    low, high = stats.binom.interval(level, n, p)
    passed = bool(low <= count <= high)
    return TestReport(name=name, statistic=count / n, threshold=level, passed=passed,
                      n_samples=n, kind="interval", seed=seed,
                      details={"count": count, "low": low, "high": high, "p": p})


# ==================== TWO-SAMPLE ENERGY TEST ====================


def euclidean_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cdist(np.atleast_2d(a), np.atleast_2d(b))


def geodesic_distance(model: ManifoldModel) -> DistanceFn:
    """Pairwise geodesic distances on ``model`` as a DistanceFn."""

    def distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return model.distance(np.asarray(a)[:, None, :], np.asarray(b)[None, :, :])

    return distance


def energy_statistic(distances: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """
    V-statistic 2 E d(A,B) - E d(A,A') - E d(B,B') for one or many labelings.

    Args:
        distances: Pooled distance matrix (n, n)
        labels: Indicator rows of sample A, shape (n,) or (P, n)
    """
    s = np.atleast_2d(labels).astype(float)
    t = 1.0 - s
    n_a = s.sum(axis=1)
    n_b = t.sum(axis=1)
    Ds = s @ distances
    Dt = t @ distances
    within_a = np.einsum("pi,pi->p", Ds, s) / n_a ** 2
    within_b = np.einsum("pi,pi->p", Dt, t) / n_b ** 2
    between = np.einsum("pi,pi->p", Ds, t) / (n_a * n_b)
    return 2.0 * between - within_a - within_b


def energy_distance_test(sample_a, sample_b, distance: Optional[DistanceFn] = None,
                         n_permutations: int = 200, alpha: float = ALPHA, seed: int = 0,
                         name: str = "energy_distance") -> TestReport:
    """
    Two-sample energy-distance test with a permutation p-value.

    Args:
        sample_a, sample_b: Point sets (n, D)
        distance: Pairwise distance function; Euclidean if None
        n_permutations: Number of label permutations
        alpha: Level
        seed: Seed of the permutation stream
        name: Report name

    Returns:
        TestReport with p = (1 + #{permuted >= observed}) / (n_permutations + 1)

    Raises:
        UnderpoweredError: If either sample has fewer than 10 points
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) < MIN_SAMPLES or len(b) < MIN_SAMPLES:
        raise UnderpoweredError(
            f"Energy test needs at least {MIN_SAMPLES} points per sample, got {len(a)} and {len(b)}"
        )
    distance = distance or euclidean_distance
    pooled = np.concatenate([a, b], axis=0)
    matrix = distance(pooled, pooled)
    if np.any(matrix < 0.0) or not np.allclose(matrix, matrix.T):
        raise InvalidInputError("Distance function must be symmetric and non-negative")

    labels = np.zeros(len(pooled))
    labels[: len(a)] = 1.0
    observed = float(energy_statistic(matrix, labels)[0])

    rng = path_stream(seed, 0, STREAM_PERMUTATION)
    permuted_labels = np.stack([rng.permutation(labels) for _ in range(n_permutations)])
    permuted = energy_statistic(matrix, permuted_labels)
    exceed = int(np.sum(permuted >= observed - 1e-14 * max(1.0, abs(observed))))
    p_value = (1.0 + exceed) / (n_permutations + 1.0)
    logger.debug("Energy statistic %.6g, p=%.4g", observed, p_value)
    return TestReport(name=name, statistic=observed, threshold=alpha, passed=bool(p_value >= alpha),
                      n_samples=len(pooled), kind="p_value", p_value=p_value, seed=seed,
                      details={"n_a": len(a), "n_b": len(b), "n_permutations": n_permutations})


# ==================== ONE-SAMPLE TESTS ====================


def ks_test(sample, cdf: Callable, alpha: float = ALPHA, name: str = "ks",
            seed: Optional[int] = None) -> TestReport:
    """One-sample Kolmogorov-Smirnov test against an explicit CDF."""
    sample = np.asarray(sample, dtype=float).ravel()
    if len(sample) == 0:
        raise UnderpoweredError("KS test needs a non-empty sample")
    result = stats.kstest(sample, cdf)
    return TestReport(name=name, statistic=float(result.statistic), threshold=alpha,
                      passed=bool(result.pvalue >= alpha), n_samples=len(sample),
                      kind="p_value", p_value=float(result.pvalue), seed=seed)


def chisq_atoms(counts: Sequence[float], expected_probs: Sequence[float], alpha: float = ALPHA,
                name: str = "chisq", seed: Optional[int] = None) -> TestReport:
    """
    Pearson chi-square goodness of fit with k - 1 degrees of freedom.

    Raises:
        BinningError: If any expected count is below 5
    """
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(expected_probs, dtype=float)
    total = counts.sum()
    if total <= 0:
        raise InvalidInputError("Chi-square test needs a positive total count")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise InvalidInputError(f"Expected probabilities must sum to 1, got {probs.sum():.12f}")
    expected = total * probs
    if np.any(expected < MIN_EXPECTED_COUNT):
        raise BinningError(
            f"Expected counts below {MIN_EXPECTED_COUNT}: {np.round(expected, 3).tolist()}"
        )
    result = stats.chisquare(counts, expected)
    return TestReport(name=name, statistic=float(result.statistic), threshold=alpha,
                      passed=bool(result.pvalue >= alpha), n_samples=int(total),
                      kind="p_value", p_value=float(result.pvalue), seed=seed,
                      details={"counts": counts, "expected": expected})


def all_passed(reports: Sequence[TestReport]) -> bool:
    return all(r.passed for r in reports)
