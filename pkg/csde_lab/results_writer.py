"""
Result files for experiment runs.

Paths, endpoints, exit times and hitting profiles become pandas DataFrames and
are written as CSV with 17 significant digits; test reports go to a JSON-lines
file. Rerunning a config with the same seed reproduces every file byte for byte.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from csde_lab.development import PathBatch
from csde_lab.hitting_time import ExitSamples, HittingProfile
from csde_lab.stats_harness import TestReport, plain_values
from csde_lab.utils import ensure_directories

FLOAT_FORMAT = "%.17g"


def _coordinate_names(prefix: str, n: int) -> List[str]:
    return [f"{prefix}{i}" for i in range(n)]


def paths_frame(batch: PathBatch) -> pd.DataFrame:
    """
    One row per (path, grid time): path_id, k, t, ambient coordinates, then the
    driver and realized drift of the step leaving that time (NaN on the last row).
    """
    B, K, D = batch.points.shape
    d = batch.driver.shape[-1]
    pad = np.full((B, 1, d), np.nan)
    driver = np.concatenate([batch.driver, pad], axis=1)
    drift = np.concatenate([batch.realized_drift, pad], axis=1)

    frame = pd.DataFrame({
        "path_id": np.repeat(batch.path_ids, K),
        "k": np.tile(np.arange(K), B),
        "t": np.tile(batch.times, B),
    })
    coords = pd.DataFrame(batch.points.reshape(B * K, D), columns=_coordinate_names("x", D))
    drivers = pd.DataFrame(driver.reshape(B * K, d), columns=_coordinate_names("dB", d))
    drifts = pd.DataFrame(drift.reshape(B * K, d), columns=_coordinate_names("a", d))
    return pd.concat([frame, coords, drivers, drifts], axis=1)


def endpoints_frame(batch: PathBatch) -> pd.DataFrame:
    """
    One row per path: path_id, the atom index when the path was conditioned on
    atoms, the distance from the last simulated point X_{T-eps} to the path's
    target (NaN without one) and the final point.
    """
    D = batch.points.shape[-1]
    frame = pd.DataFrame({"path_id": batch.path_ids})
    if batch.target_index is not None:
        frame["atom"] = batch.target_index
    if batch.targets is not None:
        frame["distance"] = batch.model.distance(batch.free_points[:, -1], batch.targets)
    else:
        frame["distance"] = np.nan
    coords = pd.DataFrame(batch.endpoints, columns=_coordinate_names("x", D))
    return pd.concat([frame, coords], axis=1)


def exits_frame(samples: ExitSamples) -> pd.DataFrame:
    return pd.DataFrame({
        "path_id": samples.path_ids,
        "exit_time": samples.exit_times,
        "censored": samples.censored,
    })


def profile_frame(profile: HittingProfile, s_stride: int = 10, rho_stride: int = 1) -> pd.DataFrame:
    """Long-format (s, rho, u, f) table for plotting, thinned in s by ``s_stride``."""
    s = profile.s_grid[::s_stride]
    rho = profile.rho_grid[::rho_stride]
    u = profile.survival[::s_stride, ::rho_stride]
    f = profile.exit_density[::s_stride, ::rho_stride]
    ss, rr = np.meshgrid(s, rho, indexing="ij")
    return pd.DataFrame({"s": ss.ravel(), "rho": rr.ravel(), "u": u.ravel(), "f": f.ravel()})


def frame_to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format=FLOAT_FORMAT)


def reports_to_jsonl(reports: Sequence[TestReport]) -> str:
    return "".join(report.to_json() + "\n" for report in reports)


class ResultsWriter:
    """
    Writes the artifacts of one run into an output directory.
    """

    def __init__(self, output_dir: Path, verbose: bool = True):
        """
        Initialize results writer.

        Args:
            output_dir: Directory for result files (created if missing)
            verbose: Print a line per written file
        """
        self.output_dir = ensure_directories(Path(output_dir))
        self.verbose = verbose
        self.written: List[str] = []

    def _write_text(self, name: str, text: str) -> Path:
        file_path = self.output_dir / name
        # newline="" keeps the bytes identical across platforms
        with open(file_path, "w", newline="") as f:
            f.write(text)
        self.written.append(name)
        if self.verbose:
            print(f"  Saved: {file_path}")
        return file_path

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        return self._write_text(name, frame_to_csv(frame))

    def write_paths(self, batch: PathBatch) -> Path:
        return self.write_frame("paths.csv", paths_frame(batch))

    def write_endpoints(self, batch: PathBatch) -> Path:
        return self.write_frame("endpoints.csv", endpoints_frame(batch))

    def write_exits(self, samples: ExitSamples) -> Path:
        return self.write_frame("exits.csv", exits_frame(samples))

    def write_profile(self, profile: HittingProfile, s_stride: int = 10) -> Path:
        return self.write_frame("profile.csv", profile_frame(profile, s_stride))

    def write_reports(self, reports: Sequence[TestReport]) -> Path:
        return self._write_text("reports.jsonl", reports_to_jsonl(reports))

    def write_estimate(self, name: str, record: Dict[str, Any]) -> Path:
        return self._write_text(name, json.dumps(plain_values(record), indent=2, sort_keys=True) + "\n")

    def write_summary(self, config: Dict[str, Any], command: str, seed: int,
                      exit_code: int, extra: Optional[Dict[str, Any]] = None) -> Path:
        """run_summary.json: the config that ran, the seed, the exit code and the file list."""
        summary = {
            "command": command,
            "seed": seed,
            "exit_code": exit_code,
            "files": sorted(self.written),
            "config": config,
        }
        if extra:
            summary.update(extra)
        return self._write_text("run_summary.json", json.dumps(plain_values(summary), indent=2, sort_keys=True) + "\n")
