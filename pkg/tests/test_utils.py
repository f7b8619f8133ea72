import json

import numpy as np
import pytest

from csde_lab.errors import ConfigError
from csde_lab.utils import (
    STREAM_DEVELOPMENT,
    STREAM_EXIT,
    chunk_size,
    ensure_directories,
    load_config,
    load_json,
    path_stream,
    path_streams,
    save_json,
    worker_count,
)


def test_defaults():
    config = load_config()
    assert config["command"] == "simulate"
    assert config["model"] == {"kind": "euclidean", "dim": 1}
    assert config["batch"]["chunk_size"] == 2000


def test_user_config_is_merged(write_config):
    config = load_config(write_config({"n_paths": 7, "batch": {"threads": 4}}))
    assert config["n_paths"] == 7
    assert config["batch"] == {"chunk_size": 2000, "threads": 4}
    assert config["start"] == [0.0]


def test_new_model_drops_the_default_start(write_config):
    config = load_config(write_config({"model": {"kind": "sphere2"}}))
    assert "start" not in config
    assert config["model"]["kind"] == "sphere2"


def test_json_configs(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({"seed": 11, "horizon": 0.5}))
    config = load_config(str(path))
    assert config["seed"] == 11
    assert config["horizon"] == 0.5


def test_config_errors(tmp_path, write_config):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.yaml"))
    with pytest.raises(ConfigError, match="mapping"):
        load_config(write_config([1, 2, 3]))
    broken = tmp_path / "broken.yaml"
    broken.write_text("model: [unclosed\n")
    with pytest.raises(ConfigError, match="parse"):
        load_config(str(broken))


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_config(str(path)) == load_config()


def test_batch_settings():
    assert worker_count() == 1
    assert chunk_size() == 2000
    assert worker_count({"batch": {"threads": 0}}) == 1
    assert chunk_size({"batch": {"chunk_size": 64}}) == 64


def test_environment_overrides(monkeypatch):
    monkeypatch.setenv("CSDE_LAB_THREADS", "3")
    monkeypatch.setenv("CSDE_LAB_CHUNK_SIZE", "17")
    assert worker_count({"batch": {"threads": 8}}) == 3
    assert chunk_size({"batch": {"chunk_size": 64}}) == 17
    monkeypatch.setenv("CSDE_LAB_THREADS", "many")
    with pytest.raises(ConfigError):
        worker_count()


def test_path_streams_are_keyed():
    a = path_stream(5, 3).standard_normal(4)
    assert np.array_equal(a, path_stream(5, 3, STREAM_DEVELOPMENT).standard_normal(4))
    assert not np.array_equal(a, path_stream(5, 4).standard_normal(4))
    assert not np.array_equal(a, path_stream(6, 3).standard_normal(4))
    assert not np.array_equal(a, path_stream(5, 3, STREAM_EXIT).standard_normal(4))
    streams = path_streams(5, [2, 3])
    assert np.array_equal(streams[1].standard_normal(4), a)


def test_json_helpers(tmp_path):
    out = ensure_directories(tmp_path / "a" / "b")
    assert out.is_dir()
    save_json({"b": 1, "a": [0.5]}, out / "x.json")
    assert load_json(out / "x.json") == {"a": [0.5], "b": 1}
