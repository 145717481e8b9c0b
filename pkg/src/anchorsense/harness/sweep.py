"""Seeded Monte-Carlo sweeps, aggregation, and theory comparison."""

from __future__ import annotations

import csv
import json
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..locate import AnchorGeometry, forward_measurements, predict_covariance, solve
from ..scene import C, DynamicTarget, wrap_angle
from .config import Scenario, load_scenario
from .pipeline import parse_stages, run_trial, trial_streams

AXES = ("snr_s", "anchor_range_rmse", "anchor_aod_rmse", "reflectivity", "none")
WORKERS_ENV = "ANCHORSENSE_WORKERS"
CSV_FIELDS = ("metric", "grid_value", "value", "trials", "seed")


@dataclass(frozen=True)
class RunConfig:
    scenario_path: str | None = None
    axis: str = "none"
    grid: tuple = ()
    trials: int = 200
    seed: int = 0
    out_dir: str = "runs"
    stages: tuple = ("full",)
    # anchor-noise sweeps hold the other measurement noise at these levels
    fixed_range_rmse: float = 0.01  # m
    fixed_aod_rmse_deg: float = 0.1
    reflectivity_target: int = 1
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}; choose from {AXES}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        grid = tuple(float(g) for g in self.grid)
        if self.axis != "none" and not grid:
            raise ValueError("a sweep axis needs a non-empty grid")
        object.__setattr__(self, "grid", grid if self.axis != "none" else (float("nan"),))
        parse_stages(list(self.stages))


class Accumulator:
    """Running count, sum and sum of squares per metric.

    Trials are folded in index order, so the result does not depend on how
    they were scheduled.
    """

    def __init__(self):
        self.stats: dict[str, list] = {}
        self.theory: dict[str, list] = {}
        self.trials = 0
        self.failures: list[str] = []

    def add(self, result):
        self.trials += 1
        if isinstance(result, str):
            self.failures.append(result)
            return
        for name, v in result.errors.items():
            v = v[np.isfinite(v)]
            s = self.stats.setdefault(name, [0, 0.0, 0.0, 0])
            s[0] += v.size
            s[1] += float(np.sum(v))
            s[2] += float(np.sum(v * v))
            s[3] += int(np.size(result.errors[name]) - v.size)
        for name, var in result.theory.items():
            t = self.theory.setdefault(name, [0, 0.0])
            t[0] += 1
            t[1] += float(var)

    def summary(self) -> dict[str, float]:
        out = {}
        for name, (n, s1, s2, bad) in sorted(self.stats.items()):
            if n:
                mean = s1 / n
                out[f"{name}.rmse"] = float(np.sqrt(s2 / n))
                out[f"{name}.bias"] = mean
                out[f"{name}.var"] = max(s2 / n - mean * mean, 0.0)
            out[f"{name}.count"] = float(n)
            if bad:
                out[f"{name}.nonfinite"] = float(bad)
        for name, (n, s) in sorted(self.theory.items()):
            out[f"{name}.theory"] = float(np.sqrt(s / n))
        out["trial.failure_rate"] = len(self.failures) / self.trials if self.trials else 0.0
        return out


def _scenario_for(config: RunConfig, base: Scenario, value: float) -> tuple[Scenario, float | None]:
    """Scenario and SNR override for one grid point."""
    if config.axis == "snr_s":
        return base, value
    if config.axis == "reflectivity":
        targets = list(base.scene.dynamic_targets)
        i = config.reflectivity_target
        if not 0 <= i < len(targets):
            raise ValueError(f"no dynamic target {i} to scale")
        t = targets[i]
        targets[i] = DynamicTarget(t.position, value, doppler=t.doppler, velocity=t.velocity)
        return base.with_scene(base.scene.replace(dynamic_targets=tuple(targets))), None
    return base, None


def _anchor_noise_trial(scenario: Scenario, rng, range_rmse: float, aod_rmse: float):
    """Localization from forward-model anchor measurements plus Gaussian noise."""
    from .pipeline import TrialResult

    scene = scenario.scene
    geometry = AnchorGeometry.from_points(scene.anchors, scene.bs_position)
    c_tau0 = (scenario.reference_tmo or 0.0) * C
    ranges, aods, dt = forward_measurements(scene.ue_position, scene.ue_rotation_rho,
                                            geometry, c_tau0)
    La = geometry.n_anchors
    noisy_r = ranges + range_rmse * rng.standard_normal(La)
    noisy_a = aods + aod_rmse * rng.standard_normal(La)
    sol = solve(noisy_r, noisy_a, geometry)
    err = sol.ue_position.as_array() - scene.ue_position.as_array()
    out = TrialResult()
    out.add("ue.position", [np.hypot(*err)])
    out.add("ue.x", [err[0]])
    out.add("ue.y", [err[1]])
    out.add("ue.rho", [wrap_angle(sol.rho_hat - scene.ue_rotation_rho)])
    out.add("ue.c_tau_o0", [sol.tau_o0_hat * C - c_tau0])
    truth = np.r_[scene.ue_position.x, scene.ue_position.y, scene.ue_rotation_rho, dt]
    cov = predict_covariance(truth, aods, geometry,
                             np.r_[np.full(La, range_rmse**2), np.full(La, aod_rmse**2)])
    out.theory["ue.position"] = cov[0, 0] + cov[1, 1]
    out.theory["ue.rho"] = cov[2, 2]
    return out


def _one_trial(args):
    config, scenario, point, value, trial = args
    rngs = trial_streams(config.seed, point, trial)
    try:
        if config.axis == "anchor_range_rmse":
            return _anchor_noise_trial(scenario, rngs[2], value,
                                       np.deg2rad(config.fixed_aod_rmse_deg))
        if config.axis == "anchor_aod_rmse":
            return _anchor_noise_trial(scenario, rngs[2], config.fixed_range_rmse,
                                       np.deg2rad(value))
        sc, snr = _scenario_for(config, scenario, value)
        return run_trial(sc, rngs, config.stages, snr_s_db=snr)
    except Exception as exc:  # isolate the failure, keep the sweep going
        return f"{type(exc).__name__}: {exc}"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_point(config: RunConfig, scenario: Scenario, point: int, value: float,
              workers: int | None = None) -> Accumulator:
    jobs = [(config, scenario, point, value, t) for t in range(config.trials)]
    workers = worker_count() if workers is None else workers
    acc = Accumulator()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for res in pool.map(_one_trial, jobs, chunksize=max(1, len(jobs) // (4 * workers))):
                acc.add(res)
    else:
        for job in jobs:
            acc.add(_one_trial(job))
    return acc


def version_string() -> str:
    try:
        root = Path(__file__).resolve().parents[3]
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=root,
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _fmt(x: float) -> str:
    return "" if isinstance(x, float) and np.isnan(x) else repr(float(x))


def run_sweep(config: RunConfig, scenario: Scenario | None = None,
              workers: int | None = None, write: bool = True) -> list[dict]:
    """Run every grid point; write results.csv and manifest.json to ``out_dir``.

    Returns the CSV rows as dicts.
    """
    if scenario is None:
        scenario = load_scenario(config.scenario_path, config.overrides or None)
    rows, points = [], []
    for point, value in enumerate(config.grid):
        acc = run_point(config, scenario, point, value, workers)
        for metric, v in acc.summary().items():
            rows.append({"metric": metric, "grid_value": _fmt(value), "value": _fmt(v),
                         "trials": config.trials, "seed": config.seed})
        points.append({"grid_value": None if np.isnan(value) else value,
                       "trials": acc.trials, "failures": len(acc.failures),
                       "failure_messages": sorted(set(acc.failures))[:10]})
    if write:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "results.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, CSV_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        manifest = {
            "version": version_string(),
            "run": {**asdict(config), "grid": list(config.grid)},
            "scenario": scenario.raw,
            "points": points,
            "csv": "results.csv",
        }
        with open(out / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    return rows


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and np.isnan(obj):
        return None
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass(frozen=True)
class TheoryCheck:
    metric: str
    grid_value: str
    empirical: float
    theory: float
    ratio: float
    passed: bool


def compare_theory(rows, low: float = 0.8, high: float = 1.25):
    """Ratio empirical RMSE / theory for every metric that has both.

    Returns (checks, notes); notes list metrics whose theory column is missing.
    """
    table = {}
    for r in rows:
        value = float(r["value"]) if r["value"] != "" else np.nan
        table[(r["metric"], str(r["grid_value"]))] = value
    checks, notes = [], []
    for (metric, grid), value in sorted(table.items()):
        if not metric.endswith(".rmse"):
            continue
        base = metric[: -len(".rmse")]
        theory = table.get((f"{base}.theory", grid))
        if theory is None:
            continue
        ratio = value / theory if theory > 0 else np.inf
        checks.append(TheoryCheck(base, grid, value, theory, ratio, bool(low <= ratio <= high)))
    for (metric, grid) in sorted(table):
        if metric.endswith(".theory") and (metric[:-7] + ".rmse", grid) not in table:
            notes.append(f"{metric} at {grid or 'none'}: no empirical column, skipped")
    return checks, notes

