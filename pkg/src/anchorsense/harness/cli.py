"""Command-line entry point: ``anchorsense run | theory | demo``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .. import sync
from ..channel import NoiseModel, static_amplitudes, synthesize_csi, write_csi
from ..estimate import (StaticProcessor, doppler_filter, estimate_dynamic, extract_zero_doppler,
                        identify_anchors, range_doppler_map, refine_dynamic)
from ..locate import AnchorGeometry, forward_measurements, locate_dynamic, predict_covariance, solve
from ..scene import C, derive_paths, sample_clock
from .config import load_scenario
from .pipeline import trial_streams
from .sweep import AXES, CSV_FIELDS, RunConfig, compare_theory, run_sweep


def _parse_grid(text: str | None):
    if not text:
        return ()
    return tuple(float(v) for v in text.split(","))


def _parse_sets(items) -> dict:
    """``a.b=value`` pairs into a nested override dict (values parsed as YAML)."""
    out: dict = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(value)
    return out


def _write_rows(path: Path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_run(args) -> int:
    config = RunConfig(scenario_path=args.config, axis=args.sweep, grid=_parse_grid(args.grid),
                       trials=args.trials, seed=args.seed, out_dir=args.out,
                       stages=tuple(args.stages.split(",")), overrides=_parse_sets(args.set))
    rows = run_sweep(config)
    checks, notes = compare_theory(rows, args.low, args.high)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.metric} @ {c.grid_value or 'none'}: "
              f"empirical {c.empirical:.4g} theory {c.theory:.4g} ratio {c.ratio:.3f}")
    for n in notes:
        print(f"note: {n}")
    failures = [r for r in rows if r["metric"] == "trial.failure_rate" and float(r["value"]) > 0]
    for r in failures:
        print(f"warning: failure rate {float(r['value']):.3f} at {r['grid_value'] or 'none'}")
    print(f"wrote {Path(args.out) / 'results.csv'}")
    return 0


def theory_rows(scenario, axis: str, grid, draws: int, seed: int, fixed_range: float,
                fixed_aod_deg: float):
    """Closed-form predictions on a grid, averaged over reflection-phase draws."""
    wf, st = scenario.waveform, scenario.sync
    rows = []

    def row(metric, value, g):
        rows.append({"metric": metric, "grid_value": "" if g is None else repr(float(g)),
                     "value": repr(float(value)), "trials": draws, "seed": seed})

    if axis in ("snr_s", "none"):
        hs = [static_amplitudes(derive_paths(scenario.scene, trial_streams(seed, 0, t)[1]), wf,
                                st.n_pairs) for t in range(draws)]
        p_s = scenario.static_power
        peak = np.mean([sync.static_spectrum_peak(h) for h in hs])
        row("sync.influence_ratio", sync.influence_ratio(peak, p_s, wf.n_subcarriers,
                                                         wf.n_symbols), None)
        for g in (grid if axis == "snr_s" else (None,)):
            sigma = scenario.noise_power(g)
            preds = [sync.predict_error(h, sigma) for h in hs]
            row("sync.refined.rtmo.theory",
                np.sqrt(np.mean([p.rtmo_seconds(wf.delta_f) ** 2 for p in preds])), g)
            rcfo_var = np.mean([p.rcfo_error_std**2 for p in preds])
            row("sync.refined.rcfo.theory", np.sqrt(rcfo_var), g)
    if axis in ("anchor_range_rmse", "anchor_aod_rmse"):
        scene = scenario.scene
        geometry = AnchorGeometry.from_points(scene.anchors, scene.bs_position)
        _, aods, dt = forward_measurements(scene.ue_position, scene.ue_rotation_rho, geometry)
        truth = np.r_[scene.ue_position.x, scene.ue_position.y, scene.ue_rotation_rho, dt]
        La = geometry.n_anchors
        for g in grid:
            r_sd = g if axis == "anchor_range_rmse" else fixed_range
            a_sd = np.deg2rad(g if axis == "anchor_aod_rmse" else fixed_aod_deg)
            cov = predict_covariance(truth, aods, geometry,
                                     np.r_[np.full(La, r_sd**2), np.full(La, a_sd**2)])
            row("ue.position.theory", np.sqrt(cov[0, 0] + cov[1, 1]), g)
            row("ue.rho.theory", np.sqrt(cov[2, 2]), g)
    return rows


def cmd_theory(args) -> int:
    scenario = load_scenario(args.config, _parse_sets(args.set) or None)
    if args.sweep == "reflectivity":
        raise SystemExit("no closed-form prediction for the reflectivity axis")
    grid = _parse_grid(args.grid)
    if args.sweep != "none" and not grid:
        raise SystemExit("--sweep needs --grid")
    rows = theory_rows(scenario, args.sweep, grid, args.trials, args.seed, 0.01, 0.1)
    out = Path(args.out) / "theory.csv"
    _write_rows(out, rows)
    for r in rows:
        print(f"{r['metric']} @ {r['grid_value'] or 'none'}: {float(r['value']):.4g}")
    print(f"wrote {out}")
    return 0


def _rtmo_rmse(est, truth) -> float:
    return float(np.sqrt(np.mean((np.asarray(est) - truth)[1:] ** 2)))


def cmd_demo(args) -> int:
    """One end-to-end trial on the reference scenario, with spectrum dumps."""
    scenario = load_scenario(args.config, _parse_sets(args.set) or None)
    scene, wf, st, es = scenario.scene, scenario.waveform, scenario.sync, scenario.estimate
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clock_rng, phase_rng, noise_rng = trial_streams(args.seed, 0, 0)
    paths = derive_paths(scene, phase_rng)
    clock = sample_clock(clock_rng, wf.n_symbols, scenario.tmo_max)
    if scenario.reference_tmo is not None:
        clock = clock.with_reference(scenario.reference_tmo, clock.cfo_phase[0])
    sigma = scenario.noise_power()
    csi = synthesize_csi(paths, clock, wf, NoiseModel(sigma), noise_rng)
    if args.dump_csi:
        write_csi(out / "csi.bin", csi, single=True)
    n_dyn = len(scene.dynamic_targets)
    coarse, total, comp = sync.run_sync(csi, st.n_pairs,
                                        cancel_dynamic=n_dyn if st.cancel_dynamic else 0,
                                        cancel_rounds=st.cancel_rounds,
                                        max_iters=st.max_iters, tol=st.tol)

    static = extract_zero_doppler(comp)
    proc = StaticProcessor.build(static, wf, es.subarray, sigma / wf.n_symbols)
    anchor_paths = [p for p in paths if p.kind == "anchor"]
    anchors = identify_anchors(proc, [p.aoa for p in anchor_paths], es.detection_db)
    for i, p in enumerate(anchor_paths):
        ranges, spec = proc.spectrum(p.aoa)
        with open(out / f"music_anchor{i}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["range_m", "pseudo_spectrum"])
            w.writerows(zip(ranges.tolist(), spec.tolist()))
    filtered = doppler_filter(comp)
    rd = range_doppler_map(filtered.values)
    N, K = rd.shape
    dopplers = np.fft.fftfreq(K, wf.symbol_interval)
    with open(out / "range_doppler.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["range_m", "doppler_hz", "power"])
        for q in range(N):
            for d in range(K):
                w.writerow([q * wf.max_range / N, dopplers[d], rd[q, d]])
    det = estimate_dynamic(filtered, n_dyn, es.guard, es.dynamic_threshold_db)
    dyn = refine_dynamic(filtered, det).measurements
    geometry = AnchorGeometry.from_points(scene.anchors, scene.bs_position)
    sol = solve([a.relative_range for a in anchors], [a.aod for a in anchors], geometry,
                range_period=wf.max_range)
    located = locate_dynamic(sol, [m.relative_range for m in dyn], [m.aoa for m in dyn],
                             range_period=wf.max_range)
    sol = type(sol)(**{**sol.__dict__, "target_positions": tuple(located)})

    summary = {
        "snr_s_db": scenario.snr_s_db,
        "c_tau_o0_true": clock.tmo[0] * C,
        "sync": {
            "coarse_rtmo_rmse_s": _rtmo_rmse(coarse.rtmo, clock.relative_tmo),
            "refined_rtmo_rmse_s": _rtmo_rmse(total.rtmo, clock.relative_tmo),
            "refined_iterations": total.iterations_used,
        },
        "anchors": [{"relative_range_m": a.relative_range, "true_relative_range_m":
                     p.delay * C + clock.tmo[0] * C, "aod_deg": float(np.rad2deg(a.aod)),
                     "true_aod_deg": float(np.rad2deg(p.aod)), "identified": a.identified}
                    for a, p in zip(anchors, anchor_paths)],
        "dynamic": [{"relative_range_m": m.relative_range, "aoa_deg": float(np.rad2deg(m.aoa)),
                     "doppler_hz": m.doppler} for m in dyn],
        "localization": sol.to_dict(),
        "truth": {"ue": [scene.ue_position.x, scene.ue_position.y],
                  "rho_deg": float(np.rad2deg(scene.ue_rotation_rho)),
                  "targets": [[t.position.x, t.position.y] for t in scene.dynamic_targets]},
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    ue = sol.ue_position
    print(f"UE estimate ({ue.x:.3f}, {ue.y:.3f}) m, truth ({scene.ue_position.x}, "
          f"{scene.ue_position.y}) m; c*tau_o0 {sol.tau_o0_hat * C:.3f} m")
    for i, p in enumerate(located):
        print(f"target {i}: " + ("unlocatable" if p is None else f"({p.x:.3f}, {p.y:.3f}) m"))
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchorsense",
                                     description="Anchor-assisted uplink sensing simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, trials_default):
        p.add_argument("--config", default=None, help="scenario YAML (default: shipped reference)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="runs")
        p.add_argument("--trials", type=int, default=trials_default)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scenario key, e.g. noise.snr_s_db=10")

    run = sub.add_parser("run", help="Monte-Carlo sweep")
    common(run, 200)
    run.add_argument("--sweep", choices=AXES, default="none")
    run.add_argument("--grid", default=None, help="comma-separated grid values")
    run.add_argument("--stages", default="full",
                     help="comma list of coarse,refined,estimate,locate,full,exact")
    run.add_argument("--low", type=float, default=0.8, help="lower ratio bound for theory checks")
    run.add_argument("--high", type=float, default=1.25)
    run.set_defaults(func=cmd_run)

    theory = sub.add_parser("theory", help="theoretical curves only")
    common(theory, 20)
    theory.add_argument("--sweep", choices=AXES, default="snr_s")
    theory.add_argument("--grid", default="-5,0,5,10,15,20")
    theory.set_defaults(func=cmd_theory)

    demo = sub.add_parser("demo", help="single end-to-end trial with spectrum dumps")
    common(demo, 1)
    demo.add_argument("--dump-csi", action="store_true", help="also write the raw CSI tensor")
    demo.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
