"""
Validation of experiment configs.

Checks that a merged config is complete and consistent before anything runs:
known catalog names, start and target points on the model, normalized atom
weights, positive horizons and counts.
"""

from typing import Any, Dict, List, Tuple

import numpy as np

from csde_lab.conditioning import WEIGHT_TOL
from csde_lab.errors import CsdeLabError
from csde_lab.geometry import FIELD_CATALOG, MODEL_CATALOG, make_field, make_model
from csde_lab.hitting_time import AREA_CATALOG
from csde_lab.observables import OBSERVABLE_CATALOG
from csde_lab.verification import SUITES


class ConfigValidator:
    """
    Validates experiment configs for completeness and correctness.
    """

    def __init__(self):
        """Initialize validator with the accepted names."""
        self.commands = ["simulate", "verify", "gradient", "hitting"]
        self.target_kinds = ["none", "dirac", "atoms", "density_ratio"]
        self.routes = ["csde", "enlarged"]
        self.gradient_methods = ["bismut", "ibp"]
        self.radial_kinds = ["interval", "ball3", "grid"]
        self.time_targets = ["constant", "bump", "interval"]

    def _check_point(self, model, value, label: str, errors: List[str]):
        try:
            model.check_point(np.asarray(value, dtype=float), label)
        except (CsdeLabError, ValueError, TypeError) as exc:
            errors.append(f"{label}: {exc}")

    def _validate_model_section(self, config: Dict[str, Any], errors: List[str]):
        model_cfg = config.get("model") or {}
        kind = str(model_cfg.get("kind", "")).lower()
        if kind not in MODEL_CATALOG:
            errors.append(f"Unknown model '{model_cfg.get('kind')}'. Valid models: {', '.join(sorted(MODEL_CATALOG))}")
            return None
        try:
            model = make_model(kind, model_cfg.get("dim"))
        except CsdeLabError as exc:
            errors.append(f"model: {exc}")
            return None

        self._check_point(model, config.get("start", model.origin()), "start", errors)

        drift = config.get("drift") or {}
        name = str(drift.get("name", "zero")).lower()
        if name not in FIELD_CATALOG:
            errors.append(f"Unknown drift field '{name}'. Valid names: {', '.join(sorted(FIELD_CATALOG))}")
        else:
            try:
                make_field(drift, model)
            except (CsdeLabError, KeyError) as exc:
                errors.append(f"drift: {exc}")

        horizon = config.get("horizon")
        if not isinstance(horizon, (int, float)) or horizon <= 0:
            errors.append(f"horizon must be a positive number, got: {horizon}")
        steps = config.get("steps")
        if steps is not None and (not isinstance(steps, int) or steps < 1):
            errors.append(f"steps must be a positive integer or null, got: {steps}")
        return model

    def _validate_target(self, config: Dict[str, Any], model, errors: List[str]):
        target = config.get("target") or {"kind": "none"}
        kind = str(target.get("kind", "none")).lower()
        if kind not in self.target_kinds:
            errors.append(f"Unknown target kind '{kind}'. Valid kinds: {', '.join(self.target_kinds)}")
            return
        if kind == "dirac":
            if "point" not in target:
                errors.append("dirac target needs a point")
            else:
                self._check_point(model, target["point"], "target point", errors)
        elif kind == "atoms":
            points = target.get("points")
            weights = target.get("weights")
            if not points or not weights:
                errors.append("atoms target needs points and weights")
                return
            if len(points) != len(weights):
                errors.append(f"atoms: {len(points)} points but {len(weights)} weights")
            for i, point in enumerate(points):
                self._check_point(model, point, f"atom {i}", errors)
            weights = np.asarray(weights, dtype=float)
            if np.any(weights <= 0):
                errors.append(f"atom weights must be positive, got: {weights.tolist()}")
            if abs(weights.sum() - 1.0) > WEIGHT_TOL:
                errors.append(f"atom weights must sum to 1, got: {weights.sum():.15f}")
        elif kind == "density_ratio":
            name = str((target.get("observable") or {}).get("name", "constant")).lower()
            if name not in OBSERVABLE_CATALOG:
                errors.append(
                    f"Unknown observable '{name}'. Valid names: {', '.join(sorted(OBSERVABLE_CATALOG))}"
                )
            normalization = target.get("normalization")
            if normalization is not None and (not isinstance(normalization, (int, float)) or normalization <= 0):
                errors.append(f"density_ratio normalization must be a positive number, got: {normalization}")

        route = str(config.get("route", "csde")).lower()
        if route not in self.routes:
            errors.append(f"route must be one of {self.routes}, got: {route}")

    def _validate_hitting(self, config: Dict[str, Any], errors: List[str]):
        hitting = config.get("hitting") or {}
        radial = str(hitting.get("radial", "")).lower()
        if radial not in self.radial_kinds:
            errors.append(f"Unknown radial model '{radial}'. Valid: {', '.join(self.radial_kinds)}")
        if radial == "grid" and hitting.get("area") not in AREA_CATALOG:
            errors.append(f"Unknown area function '{hitting.get('area')}'. Valid: {', '.join(sorted(AREA_CATALOG))}")
        radius = hitting.get("radius")
        if not isinstance(radius, (int, float)) or radius <= 0:
            errors.append(f"hitting.radius must be positive, got: {radius}")
        tau_max = hitting.get("tau_max")
        if tau_max is not None and isinstance(radius, (int, float)) and tau_max < 5 * radius ** 2:
            errors.append(f"hitting.tau_max must be at least 5 r^2 = {5 * radius ** 2}, got: {tau_max}")
        target = hitting.get("target") or {}
        kind = str(target.get("kind", "constant")).lower()
        if kind not in self.time_targets:
            errors.append(f"Unknown hitting target '{kind}'. Valid: {', '.join(self.time_targets)}")
            return
        if not isinstance(radius, (int, float)) or radius <= 0:
            return
        horizon = tau_max if isinstance(tau_max, (int, float)) else 16.0 * radius ** 2
        if kind == "bump":
            tau0 = target.get("tau0")
            if not isinstance(tau0, (int, float)) or not 0 < tau0 <= horizon:
                errors.append(f"bump target needs tau0 in (0, {horizon:g}], got: {tau0}")
            width = target.get("width_fraction", 0.05)
            if not isinstance(width, (int, float)) or width <= 0:
                errors.append(f"bump width_fraction must be positive, got: {width}")
        elif kind == "interval":
            a, b = target.get("a"), target.get("b")
            if not all(isinstance(v, (int, float)) for v in (a, b)) or not 0 <= a < b <= horizon:
                errors.append(f"interval target needs 0 <= a < b <= {horizon:g}, got: a={a}, b={b}")

    def validate(self, config: Dict[str, Any]) -> Tuple[bool, List[str]]:
        """
        Validate a merged experiment config.

        Args:
            config: Config dictionary (defaults already merged in)

        Returns:
            Tuple of (is_valid, list_of_errors)
        """
        errors: List[str] = []

        command = str(config.get("command", "")).lower()
        if command not in self.commands:
            errors.append(f"Unknown command '{command}'. Valid commands: {', '.join(self.commands)}")
            return False, errors

        seed = config.get("seed")
        if not isinstance(seed, int) or seed < 0:
            errors.append(f"seed must be a non-negative integer, got: {seed}")

        if command == "verify":
            suite = str((config.get("verify") or {}).get("suite", "all"))
            if suite != "all" and suite not in SUITES:
                errors.append(f"Unknown suite '{suite}'. Valid suites: all, {', '.join(SUITES)}")
            scale = (config.get("verify") or {}).get("scale", 1.0)
            if not isinstance(scale, (int, float)) or scale <= 0:
                errors.append(f"verify.scale must be positive, got: {scale}")
            return len(errors) == 0, errors

        n_paths = config.get("n_paths")
        if not isinstance(n_paths, int) or n_paths < 1:
            errors.append(f"n_paths must be a positive integer, got: {n_paths}")

        if command == "hitting":
            self._validate_hitting(config, errors)
            return len(errors) == 0, errors

        model = self._validate_model_section(config, errors)
        if model is None:
            return False, errors
        if command == "simulate":
            self._validate_target(config, model, errors)
        else:
            gradient = config.get("gradient") or {}
            method = str(gradient.get("method", "bismut")).lower()
            if method not in self.gradient_methods:
                errors.append(f"gradient.method must be one of {self.gradient_methods}, got: {method}")
            name = str((gradient.get("observable") or {}).get("name", "")).lower()
            if name not in OBSERVABLE_CATALOG:
                errors.append(
                    f"Unknown observable '{name}'. Valid names: {', '.join(sorted(OBSERVABLE_CATALOG))}"
                )

        return len(errors) == 0, errors

    def print_validation_report(self, errors: List[str]):
        """Print formatted validation report."""
        print("\n" + "=" * 70)
        print("CONFIG VALIDATION")
        print("=" * 70)
        if not errors:
            print("\n✓ Config is valid")
        else:
            print(f"\nFound {len(errors)} problem(s):")
            for error in errors:
                print(f"  - {error}")
        print("\n" + "=" * 70)
