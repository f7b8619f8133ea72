import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from csde_lab.batch_processor import BatchProcessor
from csde_lab.errors import InvalidInputError, NumericalError
from csde_lab.geometry import FramePoint, LinearField, make_model
from csde_lab.heat_kernel import radial_bin_probabilities, radial_cdf
from csde_lab.development import (
    default_steps,
    develop_path,
    draw_drivers,
    geodesic_path,
    sample_bm,
)


def test_default_steps():
    assert default_steps(1.0) == 800
    assert default_steps(0.25) == 200
    assert default_steps(1e-6) == 1


def test_flat_development_is_the_driving_walk(flat2, processor):
    batch = sample_bm(flat2, [1.0, -1.0], None, 1.0, 50, 20, seed=4, processor=processor)
    walk = np.concatenate([np.zeros((20, 1, 2)), np.cumsum(batch.driver, axis=1)], axis=1)
    assert_allclose(batch.points, np.array([1.0, -1.0]) + walk, atol=1e-12)
    assert_allclose(batch.frames, np.broadcast_to(np.eye(2), batch.frames.shape))


def test_zero_horizon_gives_the_constant_path(sphere):
    u0 = FramePoint.at(sphere, [0.0, 0.6, 0.8])
    path = develop_path(sphere, u0, None, None, 0.0, 5, np.random.default_rng(0))
    assert_allclose(path.points, np.broadcast_to(u0.base, path.points.shape))
    assert_allclose(path.times, np.zeros(6))


def test_sphere_paths_stay_on_the_frame_bundle(sphere, processor):
    batch = sample_bm(sphere, sphere.origin(), None, 0.5, 100, 30, seed=1, processor=processor)
    assert np.max(np.abs(sphere.point_residual(batch.points))) < 1e-12
    gram = sphere.frame_gram(batch.points, batch.frames)
    assert np.max(np.abs(gram - np.eye(2))) < 1e-10
    tangency = np.einsum("bki,bkij->bkj", batch.points, batch.frames)
    assert np.max(np.abs(tangency)) < 1e-10


def test_hyperbolic_paths_stay_on_the_hyperboloid(hyperbolic, processor):
    batch = sample_bm(hyperbolic, hyperbolic.origin(), None, 0.5, 100, 20, seed=2, processor=processor)
    assert np.max(np.abs(hyperbolic.point_residual(batch.points))) < 1e-9
    gram = hyperbolic.frame_gram(batch.points, batch.frames)
    assert np.max(np.abs(gram - np.eye(3))) < 1e-9


def test_geodesic_path_follows_the_great_circle(sphere):
    u0 = FramePoint.at(sphere, sphere.origin())
    path = geodesic_path(sphere, u0, [0.5 * np.pi, 0.0], 1.0, 100)
    assert_allclose(path.endpoint, [1.0, 0.0, 0.0], atol=1e-10)
    assert_allclose(path.frames[-1][:, 0], [0.0, 0.0, -1.0], atol=1e-10)
    assert_allclose(path.frames[-1][:, 1], [0.0, 1.0, 0.0], atol=1e-10)


def test_same_seed_gives_identical_paths(sphere, processor):
    first = sample_bm(sphere, sphere.origin(), None, 0.2, 20, 15, seed=9, processor=processor)
    second = sample_bm(sphere, sphere.origin(), None, 0.2, 20, 15, seed=9, processor=processor)
    assert_array_equal(first.points, second.points)
    assert_array_equal(first.frames, second.frames)


def test_paths_do_not_depend_on_chunking(sphere):
    small = BatchProcessor({"batch": {"chunk_size": 3, "threads": 2}})
    large = BatchProcessor({"batch": {"chunk_size": 500, "threads": 1}})
    a = sample_bm(sphere, sphere.origin(), None, 0.2, 20, 11, seed=5, processor=small)
    b = sample_bm(sphere, sphere.origin(), None, 0.2, 20, 11, seed=5, processor=large)
    assert_array_equal(a.path_ids, np.arange(11))
    assert_array_equal(a.points, b.points)


def test_drivers_are_keyed_by_path_id():
    both = draw_drivers(3, [7, 8], 10, 2, 0.1)
    alone = draw_drivers(3, [8], 10, 2, 0.1)
    assert_array_equal(both[1], alone[0])
    assert not np.array_equal(both[0], both[1])


def test_different_seeds_differ(flat1, processor):
    a = sample_bm(flat1, [0.0], None, 1.0, 10, 5, seed=0, processor=processor)
    b = sample_bm(flat1, [0.0], None, 1.0, 10, 5, seed=1, processor=processor)
    assert not np.array_equal(a.points, b.points)


def test_batch_accessors(flat1, processor):
    batch = sample_bm(flat1, [0.0], None, 1.0, 10, 4, seed=0, processor=processor)
    assert len(batch) == 4
    assert batch.time_index(0.52) == 5
    assert batch.free_points.shape == batch.points.shape
    path = batch.path(2)
    assert path.path_id == 2
    assert_array_equal(path.endpoint, batch.endpoints[2])
    assert path.frame_point(3).base.shape == (1,)


def test_flat_endpoints_have_zero_mean(flat2, processor):
    batch = sample_bm(flat2, [0.0, 0.0], None, 1.0, 20, 2000, seed=11, processor=processor, store_frames=False)
    mean = batch.endpoints.mean(axis=0)
    se = batch.endpoints.std(axis=0, ddof=1) / np.sqrt(2000)
    assert np.all(np.abs(mean) < 4.0 * se)
    assert batch.frames is None


@pytest.mark.slow
def test_ou_endpoint_variance(flat1, processor):
    V = LinearField([[-0.5]])
    batch = sample_bm(flat1, [0.0], V, 1.0, 400, 4000, seed=21, processor=processor, store_frames=False)
    variance = batch.endpoints[:, 0].var(ddof=1)
    assert variance == pytest.approx(1.0 - np.exp(-1.0), abs=4.0 * 0.6321 * np.sqrt(2.0 / 4000))


@pytest.mark.slow
def test_sphere_radial_law_matches_the_heat_kernel(sphere, processor):
    t, n = 0.5, 3000
    batch = sample_bm(sphere, sphere.origin(), None, t, 400, n, seed=17, processor=processor, store_frames=False)
    radii = sphere.distance(sphere.origin(), batch.endpoints)
    grid, cdf = radial_cdf(sphere, t)
    edges = np.interp(np.linspace(0.0, 1.0, 11), cdf, grid)
    edges[-1] = np.pi
    probs = radial_bin_probabilities(sphere, t, edges)
    counts, _ = np.histogram(radii, bins=edges)
    result = stats.chisquare(counts, n * probs / probs.sum())
    assert result.pvalue > 0.001


# ==================== ERRORS ====================


def test_zero_steps_is_rejected(flat1):
    u0 = FramePoint.at(flat1, [0.0])
    with pytest.raises(InvalidInputError):
        develop_path(flat1, u0, None, None, 1.0, 0, np.random.default_rng(0))
    with pytest.raises(InvalidInputError):
        sample_bm(flat1, [0.0], None, 1.0, 0, 10, seed=0)


def test_non_tangent_extra_drift_is_rejected(sphere):
    u0 = FramePoint.at(sphere, sphere.origin())

    def normal_push(state):
        return state.points.copy()

    with pytest.raises(InvalidInputError, match="tangent"):
        develop_path(sphere, u0, None, normal_push, 0.1, 10, np.random.default_rng(0))


def test_non_finite_extra_drift_reports_the_step(flat1):
    u0 = FramePoint.at(flat1, [0.0])

    def blows_up(state):
        value = 0.0 if state.k < 3 else np.nan
        return np.full(state.points.shape, value)

    with pytest.raises(NumericalError) as excinfo:
        develop_path(flat1, u0, None, blows_up, 1.0, 10, np.random.default_rng(0))
    assert excinfo.value.step == 3
    assert excinfo.value.exit_code == 3


def test_start_point_of_the_wrong_dimension():
    with pytest.raises(InvalidInputError):
        sample_bm(make_model("euclidean", 2), [0.0], None, 1.0, 10, 5, seed=0)
