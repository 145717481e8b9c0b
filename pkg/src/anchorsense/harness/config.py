"""Scenario files: loading, validation and scene construction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from ..channel import K_BOLTZMANN, Waveform
from ..scene import (C, AnchorPoint, DynamicTarget, Position2D, Scene, StaticObject, aoa_of,
                     derive_paths)

DEFAULT_SCENARIO = "paper_scenario.yaml"


def _data_file(name: str):
    return resources.files("anchorsense").joinpath("data", name)


def load_schema() -> dict:
    return json.loads(_data_file("scenario.schema.json").read_text())


@dataclass(frozen=True)
class SyncSettings:
    n_pairs: int = 4
    max_iters: int = 50
    tol: float = 1e-10
    cancel_dynamic: bool = True
    cancel_rounds: int = 2


@dataclass(frozen=True)
class EstimateSettings:
    subarray: int | None = None
    detection_db: float = 20.0
    dynamic_threshold_db: float = 13.0
    guard: int = 2


@dataclass(frozen=True)
class Scenario:
    """Everything a trial needs besides its seeds."""

    scene: Scene
    waveform: Waveform
    tmo_max: float  # s
    reference_tmo: float | None  # s, pinned tau_{o,0}
    reference_cfo: float | None  # rad
    noise_figure: float = 10.0
    temperature: float = 290.0
    snr_s_db: float | None = None
    los: bool = False
    sync: SyncSettings = field(default_factory=SyncSettings)
    estimate: EstimateSettings = field(default_factory=EstimateSettings)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def physical_noise(self) -> float:
        return K_BOLTZMANN * self.noise_figure * self.temperature * self.waveform.bandwidth

    @property
    def static_power(self) -> float:
        """Incoherent static power per subcarrier, sum of |xi|^2 over static paths."""
        return float(sum(abs(p.coeff) ** 2 for p in derive_paths(self.scene) if p.doppler == 0))

    @property
    def dynamic_power(self) -> float:
        paths = derive_paths(self.scene)
        return float(sum(abs(p.coeff) ** 2 for p in paths if p.kind == "dynamic"))

    def noise_power(self, snr_s_db: float | None = None) -> float:
        """Noise variance for a target static SNR in dB, else the configured one."""
        snr = self.snr_s_db if snr_s_db is None else snr_s_db
        if snr is None:
            return self.physical_noise
        return self.static_power / 10 ** (snr / 10)

    def with_scene(self, scene: Scene) -> "Scenario":
        return replace(self, scene=scene)


def _position(xy) -> Position2D:
    return Position2D(float(xy[0]), float(xy[1]))


def random_statics(cfg: dict, anchors, ue: Position2D, bs: Position2D) -> list[StaticObject]:
    """Uniformly placed static reflectors in an annulus sector around the BS.

    Candidates too close to the BS/UE, or inside the guard window of an anchor
    (similar bistatic range and similar AOA), are redrawn so the anchors stay
    separable.
    """
    rng = np.random.default_rng(cfg.get("seed", 0))
    count = int(cfg.get("count", 0))
    r_lo, r_hi = cfg.get("range_min", 20.0), cfg.get("range_max", 90.0)
    a_lo, a_hi = np.deg2rad(cfg.get("aoa_min_deg", -80.0)), np.deg2rad(cfg.get("aoa_max_deg", 80.0))
    guard_r = cfg.get("anchor_guard_range", 10.0)
    guard_a = np.deg2rad(cfg.get("anchor_guard_aoa_deg", 20.0))
    min_sep = cfg.get("min_separation", 5.0)
    sigma = cfg.get("reflecting_factor", 1.0)

    def bistatic(p):
        return p.distance_to(ue) + p.distance_to(bs)

    out = []
    for _ in range(100000):
        if len(out) == count:
            break
        r = np.sqrt(rng.uniform(r_lo**2, r_hi**2))
        a = rng.uniform(a_lo, a_hi)
        p = Position2D(bs.x + r * np.sin(a), bs.y + r * np.cos(a))
        if p.distance_to(ue) < min_sep or any(p.distance_to(o.position) < min_sep for o in out):
            continue
        if any(abs(bistatic(p) - bistatic(an.position)) < guard_r
               and abs(a - aoa_of(an.position, bs)) < guard_a for an in anchors):
            continue
        out.append(StaticObject(p, sigma))
    if len(out) < count:
        raise ValueError("could not place the requested static objects")
    return out


def build_scenario(raw: dict) -> Scenario:
    jsonschema.validate(raw, load_schema())
    wf = Waveform(**raw.get("waveform", {}))
    geo = raw["geometry"]
    bs = _position(geo.get("bs", [0.0, 0.0]))
    ue = _position(geo["ue"])
    anchors = [AnchorPoint(_position(a["position"]), a.get("reflecting_factor", 2.0))
               for a in raw.get("anchors", [])]
    dynamics = []
    for d in raw.get("dynamics", []):
        vel = d.get("velocity")
        dynamics.append(DynamicTarget(_position(d["position"]), d.get("reflecting_factor", 1.0),
                                      doppler=d.get("doppler"),
                                      velocity=tuple(vel) if vel is not None else None))
    st_cfg = raw.get("statics", {})
    explicit = [StaticObject(_position(s["position"]), s.get("reflecting_factor", 1.0))
                for s in st_cfg.get("explicit", [])]
    randoms = random_statics(st_cfg.get("random", {}), anchors, ue, bs)
    scene = Scene(ue, np.deg2rad(geo.get("ue_rotation_deg", 0.0)), anchors, explicit + randoms,
                  dynamics, carrier_wavelength=wf.wavelength, tx_power=geo.get("tx_power", 0.1),
                  bs_position=bs)
    gap = st_cfg.get("static_dynamic_gap_db")
    if gap is not None and randoms:
        scene = calibrate_static_gap(scene, gap, n_fixed=len(explicit))

    clk = raw.get("clock", {})
    ref = clk.get("reference_tmo_m")
    noise = raw.get("noise", {})
    return Scenario(
        scene=scene,
        waveform=wf,
        tmo_max=clk.get("tmo_max_m", wf.max_range) / C,
        reference_tmo=None if ref is None else ref / C,
        reference_cfo=clk.get("reference_cfo"),
        noise_figure=noise.get("noise_figure", 10.0),
        temperature=noise.get("temperature", 290.0),
        snr_s_db=noise.get("snr_s_db"),
        los=raw.get("los", False),
        sync=SyncSettings(**raw.get("sync", {})),
        estimate=EstimateSettings(**raw.get("estimate", {})),
        raw=raw,
    )


def calibrate_static_gap(scene: Scene, gap_db: float, n_fixed: int = 0) -> Scene:
    """Scale the random statics so total static power exceeds dynamic power by ``gap_db``."""
    paths = derive_paths(scene)
    p_dyn = sum(abs(p.coeff) ** 2 for p in paths if p.kind == "dynamic")
    p_anchor = sum(abs(p.coeff) ** 2 for p in paths if p.kind == "anchor")
    statics = [abs(p.coeff) ** 2 for p in paths if p.kind == "static"]
    p_fixed, p_rand = sum(statics[:n_fixed]), sum(statics[n_fixed:])
    target = p_dyn * 10 ** (gap_db / 10)
    scale = (target - p_anchor - p_fixed) / p_rand
    if scale <= 0:
        raise ValueError(f"anchors alone exceed the requested {gap_db} dB static/dynamic gap")
    objs = list(scene.static_objects)
    objs[n_fixed:] = [StaticObject(o.position, o.reflecting_factor * scale) for o in objs[n_fixed:]]
    return scene.replace(static_objects=tuple(objs))


def load_scenario(path=None, overrides: dict | None = None) -> Scenario:
    """Load a YAML scenario (the shipped default when ``path`` is None)."""
    text = (_data_file(DEFAULT_SCENARIO).read_text() if path is None
            else Path(path).read_text())
    raw = yaml.safe_load(text)
    if overrides:
        raw = _merge(raw, overrides)
    return build_scenario(raw)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out
