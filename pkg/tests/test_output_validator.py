import copy

import pytest

from csde_lab.output_validator import ConfigValidator
from csde_lab.utils import load_config


@pytest.fixture
def config():
    return load_config()


@pytest.fixture
def validator():
    return ConfigValidator()


def errors_of(validator, config):
    is_valid, errors = validator.validate(config)
    assert is_valid == (not errors)
    return errors


def test_defaults_are_valid(validator, config):
    assert errors_of(validator, config) == []


def test_shipped_experiments_are_valid(validator):
    from pathlib import Path

    configs = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*"))
    assert configs
    for path in configs:
        assert errors_of(validator, load_config(str(path))) == [], path.name


def test_unknown_command(validator, config):
    config["command"] = "plot"
    errors = errors_of(validator, config)
    assert len(errors) == 1
    assert "Valid commands" in errors[0]


def test_unknown_model(validator, config):
    config["model"] = {"kind": "Sphere5"}
    errors = errors_of(validator, config)
    assert "Valid models: circle, euclidean, hyperbolic3, sphere2" in errors[0]


def test_start_must_lie_on_the_model(validator, config):
    config["model"] = {"kind": "sphere2"}
    config["start"] = [0.0, 0.0, 2.0]
    config["target"] = {"kind": "dirac", "point": [0.0, 0.0, -1.0]}
    errors = errors_of(validator, config)
    assert len(errors) == 1
    assert errors[0].startswith("start:")


def test_missing_start_uses_the_origin(validator, config):
    config["model"] = {"kind": "hyperbolic3"}
    del config["start"]
    config["target"] = {"kind": "none"}
    assert errors_of(validator, config) == []


def test_atom_checks(validator, config):
    config["target"] = {"kind": "atoms", "points": [[1.0], [2.0]], "weights": [0.5, 0.6]}
    errors = errors_of(validator, config)
    assert any("sum to 1" in e for e in errors)
    config["target"] = {"kind": "atoms", "points": [[1.0]], "weights": [0.5, 0.5]}
    assert any("1 points but 2 weights" in e for e in errors_of(validator, config))
    config["target"] = {"kind": "atoms"}
    assert errors_of(validator, config) == ["atoms target needs points and weights"]


def test_target_and_route(validator, config):
    config["target"] = {"kind": "dirac"}
    config["route"] = "bridge"
    errors = errors_of(validator, config)
    assert "dirac target needs a point" in errors
    assert any("route" in e for e in errors)
    config["target"] = {"kind": "density_ratio", "observable": {"name": "cosine"}}
    config["route"] = "csde"
    assert any("Unknown observable" in e for e in errors_of(validator, config))


def test_numbers(validator, config):
    bad = copy.deepcopy(config)
    bad.update(seed=-1, horizon=0, steps=2.5, n_paths=0)
    errors = errors_of(validator, bad)
    assert len(errors) == 4


def test_drift_checks(validator, config):
    config["drift"] = {"name": "spiral"}
    assert any("Unknown drift field" in e for e in errors_of(validator, config))
    config["drift"] = {"name": "spherical_gradient", "c": 1.0}
    assert any(e.startswith("drift:") for e in errors_of(validator, config))


def test_density_ratio_normalization(validator, config):
    config["target"] = {"kind": "density_ratio", "observable": {"name": "constant"}, "normalization": 1.0}
    assert errors_of(validator, config) == []
    config["target"]["normalization"] = -1.0
    assert any("normalization" in e for e in errors_of(validator, config))


def test_hitting_checks(validator, config):
    config["command"] = "hitting"
    assert errors_of(validator, config) == []
    config["hitting"].update(radius=1.0, tau_max=4.0)
    assert any("tau_max" in e for e in errors_of(validator, config))
    config["hitting"].update(tau_max=None, radial="grid", area="torus")
    assert any("Unknown area function" in e for e in errors_of(validator, config))
    config["hitting"].update(area="sphere2", target={"kind": "late"})
    assert any("Unknown hitting target" in e for e in errors_of(validator, config))


@pytest.mark.parametrize("target, message", [
    ({"kind": "interval"}, "interval target"),
    ({"kind": "interval", "a": 0.6, "b": 0.2}, "interval target"),
    ({"kind": "interval", "a": 0.2, "b": 20.0}, "interval target"),
    ({"kind": "bump"}, "tau0"),
    ({"kind": "bump", "tau0": -1.0}, "tau0"),
    ({"kind": "bump", "tau0": 1.0, "width_fraction": 0}, "width_fraction"),
])
def test_hitting_target_parameters(validator, config, target, message):
    config["command"] = "hitting"
    config["hitting"]["target"] = target
    errors = errors_of(validator, config)
    assert len(errors) == 1
    assert message in errors[0]


def test_verify_checks(validator, config):
    config["command"] = "verify"
    config["verify"] = {"suite": "everything", "scale": 0}
    errors = errors_of(validator, config)
    assert len(errors) == 2
    assert "Valid suites: all, flat_bridge" in errors[0]


def test_gradient_checks(validator, config):
    config["command"] = "gradient"
    assert errors_of(validator, config) == []
    config["gradient"] = {"method": "malliavin", "observable": {"name": "cosine"}}
    assert len(errors_of(validator, config)) == 2


def test_report(validator, capsys):
    validator.print_validation_report([])
    assert "✓ Config is valid" in capsys.readouterr().out
    validator.print_validation_report(["a", "b"])
    out = capsys.readouterr().out
    assert "Found 2 problem(s)" in out
    assert "  - b" in out
