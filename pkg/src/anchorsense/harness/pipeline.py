"""One Monte-Carlo trial: scene -> channel -> sync -> estimate -> locate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .. import sync
from ..channel import NoiseModel, add_los_path, static_amplitudes, synthesize_csi
from ..estimate import (StaticProcessor, doppler_filter, estimate_dynamic, extract_zero_doppler,
                        identify_anchors, refine_dynamic)
from ..locate import AnchorGeometry, locate_dynamic, solve
from ..scene import C, derive_paths, sample_clock, wrap_angle
from .config import Scenario

STAGES = ("coarse", "refined", "estimate", "locate")


def parse_stages(stages) -> frozenset:
    """Normalize a stage list; "full" expands to every stage, "exact" swaps sync for truth."""
    if stages is None:
        stages = ["full"]
    if isinstance(stages, str):
        stages = [s for s in stages.split(",") if s]
    out = set()
    for s in stages:
        s = s.strip().lower()
        if s == "full":
            out.update(STAGES)
        elif s in STAGES or s == "exact":
            out.add(s)
        else:
            raise ValueError(f"unknown stage {s!r}; choose from {STAGES + ('full', 'exact')}")
    if "locate" in out and "estimate" not in out:
        raise ValueError("the locate stage needs the estimate stage")
    out.add("coarse")
    return frozenset(out)


@dataclass
class TrialResult:
    """Per-trial error samples and theoretical variances, keyed by metric name."""

    errors: dict = field(default_factory=dict)
    theory: dict = field(default_factory=dict)

    def add(self, name: str, values):
        self.errors[name] = np.atleast_1d(np.asarray(values, dtype=float))


def trial_streams(base_seed: int, point: int, trial: int):
    """Independent generators for clock, reflection phases and noise."""
    ss = np.random.SeedSequence([base_seed, point, trial])
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def _wrap(x, period):
    return (np.asarray(x) + period / 2) % period - period / 2


def _match(truth, meas, range_period):
    """Assign measurements to truth paths by wrapped range and AOA distance."""
    if not truth or not meas:
        return []
    cost = np.empty((len(truth), len(meas)))
    for i, (r, a) in enumerate(truth):
        for j, m in enumerate(meas):
            cost[i, j] = (abs(_wrap(m.relative_range - r, range_period)) / 1.0
                          + abs(wrap_angle(m.aoa - a)) / np.deg2rad(1.0))
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows, cols))


def run_trial(scenario: Scenario, rngs, stages=None, snr_s_db: float | None = None,
              noise_power: float | None = None) -> TrialResult:
    """Simulate one trial and return its error samples.

    ``rngs`` are the (clock, phase, noise) generators. ``noise_power``
    overrides the scenario noise (0 gives a noise-free trial). With the
    "exact" stage the true relative offsets are compensated instead of the
    estimated ones.
    """
    stages = parse_stages(stages)
    clock_rng, phase_rng, noise_rng = rngs
    scene, wf, st = scenario.scene, scenario.waveform, scenario.sync
    out = TrialResult()

    paths = derive_paths(scene, phase_rng)
    if scenario.los:
        paths = add_los_path(paths, scene.ue_position, scene.bs_position,
                             scene.carrier_wavelength, scene.tx_power, scene.ue_rotation_rho,
                             phase_rng.uniform(-np.pi, np.pi))
    clock = sample_clock(clock_rng, wf.n_symbols, scenario.tmo_max)
    if scenario.reference_tmo is not None or scenario.reference_cfo is not None:
        tmo0 = clock.tmo[0] if scenario.reference_tmo is None else scenario.reference_tmo
        cfo0 = clock.cfo_phase[0] if scenario.reference_cfo is None else scenario.reference_cfo
        clock = clock.with_reference(tmo0, cfo0)
    sigma = scenario.noise_power(snr_s_db) if noise_power is None else noise_power
    need_all = "estimate" in stages
    csi = synthesize_csi(paths, clock, wf, NoiseModel(sigma), noise_rng,
                         n_pairs=None if need_all else st.n_pairs)

    period = 1.0 / wf.delta_f

    def record_sync(est, stage):
        out.add(f"sync.{stage}.rtmo", _wrap(est.rtmo - clock.relative_tmo, period)[1:])
        out.add(f"sync.{stage}.rcfo", wrap_angle(est.rcfo - clock.relative_cfo)[1:])

    n_dyn = sum(p.kind == "dynamic" for p in paths)
    if "exact" in stages:
        truth = sync.SyncEstimate(clock.relative_tmo, clock.relative_cfo, "refined")
        comp = sync.compensate(csi, truth)
    else:
        coarse, total, comp = sync.run_sync(
            csi, st.n_pairs, refine="refined" in stages,
            cancel_dynamic=n_dyn if st.cancel_dynamic else 0, cancel_rounds=st.cancel_rounds,
            max_iters=st.max_iters, tol=st.tol)
        record_sync(coarse, "coarse")
        if "refined" in stages:
            record_sync(total, "refined")
            if sigma > 0:
                h = static_amplitudes(paths, wf, st.n_pairs)
                pred = sync.predict_error(h, sigma)
                # the same closed form is the reference for both stages
                for stage in ("coarse", "refined"):
                    out.theory[f"sync.{stage}.rtmo"] = pred.rtmo_seconds(wf.delta_f) ** 2
                    out.theory[f"sync.{stage}.rcfo"] = pred.rcfo_error_std**2

    if "estimate" not in stages:
        return out

    R_max = wf.max_range
    c_tau0 = clock.tmo[0] * C
    es = scenario.estimate
    static = extract_zero_doppler(comp)
    noise_var = sigma / wf.n_symbols if sigma > 0 else None
    proc = StaticProcessor.build(static, wf, es.subarray, noise_var)
    anchor_paths = [p for p in paths if p.kind == "anchor"]
    anchors = identify_anchors(proc, [p.aoa for p in anchor_paths], es.detection_db)
    offsets = []
    for i, (a, p) in enumerate(zip(anchors, anchor_paths)):
        out.add(f"anchor{i}.range", _wrap(a.relative_range - p.delay * C - c_tau0, R_max))
        out.add(f"anchor{i}.aod", wrap_angle(a.aod - p.aod))
        offsets.append(_wrap(a.relative_range - p.delay * C, R_max))

    dyn_paths = [p for p in paths if p.kind == "dynamic"]
    measured = []
    if dyn_paths:
        filtered = doppler_filter(comp)
        det = estimate_dynamic(filtered, len(dyn_paths), es.guard, es.dynamic_threshold_db)
        measured = refine_dynamic(filtered, det).measurements
        truth = [((p.delay * C + c_tau0) % R_max, p.aoa) for p in dyn_paths]
        out.add("dynamic.missed", [len(dyn_paths) - len(measured)])
        for i, j in _match(truth, measured, R_max):
            p, m = dyn_paths[i], measured[j]
            out.add(f"dynamic{p.index}.range", _wrap(m.relative_range - truth[i][0], R_max))
            out.add(f"dynamic{p.index}.aoa", wrap_angle(m.aoa - p.aoa))
            out.add(f"dynamic{p.index}.doppler", m.doppler - p.doppler)
            offsets.append(_wrap(m.relative_range - p.delay * C, R_max))
    # every object's relative range carries the same clock bias
    out.add("common_range_offset", [np.mean(offsets) % R_max])

    if "locate" not in stages:
        return out
    geometry = AnchorGeometry.from_points(scene.anchors, scene.bs_position)
    sol = solve([a.relative_range for a in anchors], [a.aod for a in anchors], geometry,
                range_period=R_max)
    ue = scene.ue_position
    err = sol.ue_position.as_array() - ue.as_array()
    out.add("ue.position", [np.hypot(*err)])
    out.add("ue.x", [err[0]])
    out.add("ue.y", [err[1]])
    out.add("ue.rho", [wrap_angle(sol.rho_hat - scene.ue_rotation_rho)])
    out.add("ue.c_tau_o0", [_wrap(sol.tau_o0_hat * C - c_tau0, R_max)])
    out.add("ue.converged", [float(sol.converged)])
    if measured:
        located = locate_dynamic(sol, [m.relative_range for m in measured],
                                 [m.aoa for m in measured], range_period=R_max)
        truth = [((p.delay * C + c_tau0) % R_max, p.aoa) for p in dyn_paths]
        for i, j in _match(truth, measured, R_max):
            pos = located[j]
            target = scene.dynamic_targets[dyn_paths[i].index].position
            out.add(f"target{dyn_paths[i].index}.position",
                    [np.nan if pos is None else pos.distance_to(target)])
    return out
