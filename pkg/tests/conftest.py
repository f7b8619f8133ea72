"""Shared fixtures for the test-suite."""

import numpy as np
import pytest
import yaml

from csde_lab.batch_processor import BatchProcessor
from csde_lab.geometry import make_model


@pytest.fixture(autouse=True)
def _no_env_overrides(monkeypatch):
    monkeypatch.delenv("CSDE_LAB_THREADS", raising=False)
    monkeypatch.delenv("CSDE_LAB_CHUNK_SIZE", raising=False)


@pytest.fixture
def flat1():
    return make_model("euclidean", 1)


@pytest.fixture
def flat2():
    return make_model("euclidean", 2)


@pytest.fixture
def sphere():
    return make_model("sphere2")


@pytest.fixture
def hyperbolic():
    return make_model("hyperbolic3")


@pytest.fixture
def circle():
    return make_model("circle")


@pytest.fixture
def processor():
    return BatchProcessor({"batch": {"chunk_size": 500, "threads": 1}})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def write_config(tmp_path):
    """Write a config mapping to a YAML file and return its path."""

    def _write(config, name="experiment.yaml"):
        path = tmp_path / name
        with open(path, "w") as f:
            yaml.safe_dump(config, f)
        return path

    return _write


@pytest.fixture
def sphere_points(rng):
    """Uniform random points on the unit sphere."""

    def _draw(n):
        x = rng.standard_normal((n, 3))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    return _draw
