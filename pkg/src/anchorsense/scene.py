"""Scenario geometry, ground-truth path parameters and clock offsets.

Angles follow a single convention everywhere in the package:

* AOA ``theta`` at the BS is measured from the +y axis, positive toward +x,
  so an object at BS range ``d`` sits at ``(d sin(theta), d cos(theta))``.
* AOD ``phi`` is measured in the UE array frame. With ``alpha`` the standard
  (counter-clockwise from +x) angle of the vector from the object to the UE,
  ``phi = rho - alpha``. This makes
  ``p_x = cos(rho - phi) d_t + sin(theta) d_r`` and
  ``p_y = sin(rho - phi) d_t + cos(theta) d_r`` hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

C = 3e8  # propagation speed (m/s); gives R_max = 625 m at 480 kHz spacing


def wrap_angle(x):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class Position2D:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"non-finite position ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    def distance_to(self, other: "Position2D") -> float:
        return float(np.hypot(self.x - other.x, self.y - other.y))

    @classmethod
    def from_array(cls, xy) -> "Position2D":
        return cls(float(xy[0]), float(xy[1]))


@dataclass(frozen=True)
class AnchorPoint:
    """Static reflector with exactly known position."""

    position: Position2D
    reflecting_factor: float = 2.0


@dataclass(frozen=True)
class StaticObject:
    position: Position2D
    reflecting_factor: float = 1.0


@dataclass(frozen=True)
class DynamicTarget:
    """Moving reflector. Give either ``doppler`` (Hz) or ``velocity`` (m/s)."""

    position: Position2D
    reflecting_factor: float = 1.0
    doppler: float | None = None
    velocity: tuple[float, float] | None = None

    def __post_init__(self):
        if (self.doppler is None) == (self.velocity is None):
            raise ValueError("specify exactly one of doppler or velocity")


class DegenerateScene(ValueError):
    """Raised when an object coincides with the BS or UE."""


@dataclass(frozen=True)
class Scene:
    ue_position: Position2D
    ue_rotation_rho: float
    anchors: tuple[AnchorPoint, ...] = ()
    static_objects: tuple[StaticObject, ...] = ()
    dynamic_targets: tuple[DynamicTarget, ...] = ()
    carrier_wavelength: float = 0.1
    tx_power: float = 0.1
    bs_position: Position2D = field(default_factory=lambda: Position2D(0.0, 0.0))

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple(self.anchors))
        object.__setattr__(self, "static_objects", tuple(self.static_objects))
        object.__setattr__(self, "dynamic_targets", tuple(self.dynamic_targets))
        for obj in self.anchors + self.static_objects + self.dynamic_targets:
            if not obj.reflecting_factor > 0:
                raise ValueError("reflecting factors must be positive")
        if self.carrier_wavelength <= 0 or self.tx_power <= 0:
            raise ValueError("wavelength and transmit power must be positive")

    def replace(self, **changes) -> "Scene":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class PathParams:
    delay: float
    doppler: float
    aoa: float
    aod: float
    coeff: complex
    kind: str = "static"
    index: int = 0


def aoa_of(point: Position2D, bs: Position2D) -> float:
    """AOA at the BS, measured from +y toward +x."""
    return float(np.arctan2(point.x - bs.x, point.y - bs.y))


def aod_of(point: Position2D, ue: Position2D, rho: float) -> float:
    """AOD in the UE array frame for a path leaving toward ``point``."""
    alpha = np.arctan2(ue.y - point.y, ue.x - point.x)
    return float(wrap_angle(rho - alpha))


def bistatic_doppler(velocity, target: Position2D, tx: Position2D, rx: Position2D,
                     wavelength: float) -> float:
    """Doppler of a moving reflector, f = v . (u_tx + u_rx) / lambda.

    The unit vectors point from the target toward the transmitter and the
    receiver, so a target approaching both ends has positive Doppler.
    """
    v = np.asarray(velocity, dtype=float)
    p = target.as_array()
    u_tx = tx.as_array() - p
    u_rx = rx.as_array() - p
    u_tx /= np.linalg.norm(u_tx)
    u_rx /= np.linalg.norm(u_rx)
    return float(v @ (u_tx + u_rx) / wavelength)


def path_power(scene: Scene, reflecting_factor: float, r_tx: float, r_rx: float) -> float:
    """Radar-equation power of a reflected path."""
    lam = scene.carrier_wavelength
    return scene.tx_power * lam**2 * reflecting_factor / ((4 * np.pi) ** 3 * r_tx**2 * r_rx**2)


def _reflected_path(scene, obj, kind, index, doppler, phase) -> PathParams:
    ue, bs = scene.ue_position, scene.bs_position
    r_tx = obj.position.distance_to(ue)
    r_rx = obj.position.distance_to(bs)
    if r_tx == 0 or r_rx == 0:
        raise DegenerateScene(f"{kind} {index} coincides with the BS or UE")
    amp = np.sqrt(path_power(scene, obj.reflecting_factor, r_tx, r_rx))
    return PathParams(
        delay=(r_tx + r_rx) / C,
        doppler=float(doppler),
        aoa=aoa_of(obj.position, bs),
        aod=aod_of(obj.position, ue, scene.ue_rotation_rho),
        coeff=complex(amp * np.exp(1j * phase)),
        kind=kind,
        index=index,
    )


def derive_paths(scene: Scene, rng: np.random.Generator | None = None,
                 phases=None) -> list[PathParams]:
    """Ground-truth paths, ordered anchors, statics, dynamic targets.

    Reflection phases are uniform on [-pi, pi) from ``rng``; pass ``phases``
    to fix them instead, or neither for zero phase.
    """
    objects = ([("anchor", o) for o in scene.anchors]
               + [("static", o) for o in scene.static_objects]
               + [("dynamic", o) for o in scene.dynamic_targets])
    if phases is None:
        phases = (rng.uniform(-np.pi, np.pi, len(objects)) if rng is not None
                  else np.zeros(len(objects)))
    phases = np.asarray(phases, dtype=float)
    if phases.shape != (len(objects),):
        raise ValueError("one phase per object required")

    paths, counters = [], {"anchor": 0, "static": 0, "dynamic": 0}
    for (kind, obj), phase in zip(objects, phases):
        doppler = 0.0
        if kind == "dynamic":
            doppler = obj.doppler
            if doppler is None:
                doppler = bistatic_doppler(obj.velocity, obj.position, scene.ue_position,
                                           scene.bs_position, scene.carrier_wavelength)
        paths.append(_reflected_path(scene, obj, kind, counters[kind], doppler, phase))
        counters[kind] += 1
    return paths


@dataclass(frozen=True)
class ClockSequence:
    """Per-snapshot timing offset (s) and combined phase/CFO term (rad)."""

    tmo: np.ndarray
    cfo_phase: np.ndarray

    def __post_init__(self):
        tmo = np.asarray(self.tmo, dtype=float).copy()
        cfo = np.asarray(self.cfo_phase, dtype=float).copy()
        if tmo.ndim != 1 or tmo.shape != cfo.shape:
            raise ValueError("tmo and cfo_phase must be equal-length vectors")
        tmo.flags.writeable = False
        cfo.flags.writeable = False
        object.__setattr__(self, "tmo", tmo)
        object.__setattr__(self, "cfo_phase", cfo)

    @property
    def n_snapshots(self) -> int:
        return self.tmo.size

    @property
    def relative_tmo(self) -> np.ndarray:
        return self.tmo - self.tmo[0]

    @property
    def relative_cfo(self) -> np.ndarray:
        return wrap_angle(self.cfo_phase - self.cfo_phase[0])

    def with_reference(self, tmo0: float, cfo0: float = 0.0) -> "ClockSequence":
        """Same relative offsets, different absolute reference values."""
        return ClockSequence(self.relative_tmo + tmo0, self.relative_cfo + cfo0)

    @classmethod
    def zeros(cls, K: int) -> "ClockSequence":
        return cls(np.zeros(K), np.zeros(K))


def sample_clock(rng: np.random.Generator, K: int, tmo_max: float = 625.0 / C,
                 pinned_tmo0: float | None = None, pinned_cfo0: float | None = None,
                 zero: bool = False) -> ClockSequence:
    """Independent uniform TMO on [0, tmo_max) and phase on [-pi, pi) per snapshot."""
    if K < 2:
        raise ValueError("need at least two snapshots")
    if zero:
        return ClockSequence.zeros(K)
    tmo = rng.uniform(0.0, tmo_max, K)
    cfo = rng.uniform(-np.pi, np.pi, K)
    if pinned_tmo0 is not None:
        tmo[0] = pinned_tmo0
    if pinned_cfo0 is not None:
        cfo[0] = pinned_cfo0
    return ClockSequence(tmo, cfo)
