import numpy as np
import pytest
from numpy.testing import assert_allclose

from csde_lab.errors import ConfigError
from csde_lab.stats_harness import all_passed
from csde_lab.verification import HITTING_NEWTON_GRID, NEWTON_GRID, SUITES, run_suite, sphere_atoms


def test_bridge_invariance():
    reports = run_suite("bridge_invariance")
    assert len(reports) == 2
    assert all_passed(reports), [r.status_line() for r in reports]


def test_transport(processor):
    reports = run_suite("transport", processor=processor)
    assert {r.name for r in reports} == {
        "transport_sphere",
        "transport_contraction",
        "transport_hyperbolic",
        "transport_flat",
        "transport_step_halving",
    }
    assert all_passed(reports), [r.status_line() for r in reports]


def test_reproducibility(processor):
    reports = run_suite("reproducibility", seed=3, processor=processor)
    assert all_passed(reports), [r.status_line() for r in reports]


def test_sphere_atoms(sphere):
    atoms = sphere_atoms(sphere, sphere.origin())
    assert sphere.distance(sphere.origin(), atoms) == pytest.approx([1.0, 0.8])


def test_newton_grids_start_after_time_zero():
    assert len(NEWTON_GRID) == 8
    assert NEWTON_GRID[0] == pytest.approx(0.1)
    assert NEWTON_GRID[-1] < 1.0
    assert_allclose(NEWTON_GRID * 800, np.round(NEWTON_GRID * 800), atol=1e-9)
    assert_allclose(HITTING_NEWTON_GRID * 1000, np.round(HITTING_NEWTON_GRID * 1000), atol=1e-9)


def test_unknown_suite():
    with pytest.raises(ConfigError, match="Valid suites"):
        run_suite("everything")


@pytest.mark.slow
@pytest.mark.parametrize("name", [n for n in SUITES if n not in ("bridge_invariance", "transport", "reproducibility")])
def test_suite_passes(name, processor):
    reports = run_suite(name, seed=0, scale=1.0, processor=processor)
    assert all_passed(reports), [r.status_line() for r in reports if not r.passed]
