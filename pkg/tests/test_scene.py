import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsense.scene import (C, ClockSequence, DegenerateScene, DynamicTarget, Position2D,
                               Scene, StaticObject, aoa_of, aod_of, bistatic_doppler,
                               derive_paths, path_power, sample_clock, wrap_angle)

coord = st.floats(-200, 200, allow_nan=False)


def test_aoa_convention():
    bs = Position2D(0.0, 0.0)
    assert aoa_of(Position2D(0.0, 10.0), bs) == pytest.approx(0.0)
    assert aoa_of(Position2D(10.0, 0.0), bs) == pytest.approx(np.pi / 2)
    assert aoa_of(Position2D(-10.0, 10.0), bs) == pytest.approx(-np.pi / 4)


@settings(max_examples=200, deadline=None)
@given(coord, coord, coord, coord, st.floats(-np.pi, np.pi))
def test_position_identities(ox, oy, ux, uy, rho):
    """Object position from (theta, d_r) and UE position from (phi, d_t) agree."""
    obj, ue, bs = Position2D(ox, oy), Position2D(ux, uy), Position2D(0.0, 0.0)
    d_r, d_t = obj.distance_to(bs), obj.distance_to(ue)
    if d_r < 1e-3 or d_t < 1e-3:
        return
    theta, phi = aoa_of(obj, bs), aod_of(obj, ue, rho)
    assert np.isclose(np.cos(rho - phi) * d_t + np.sin(theta) * d_r, ux, atol=1e-9)
    assert np.isclose(np.sin(rho - phi) * d_t + np.cos(theta) * d_r, uy, atol=1e-9)


def test_bistatic_doppler_sign():
    tx, rx = Position2D(100.0, 0.0), Position2D(0.0, 0.0)
    target = Position2D(50.0, 50.0)
    # moving straight toward the midpoint of tx and rx approaches both
    assert bistatic_doppler((0.0, -10.0), target, tx, rx, 0.1) > 0
    assert bistatic_doppler((0.0, 10.0), target, tx, rx, 0.1) < 0
    # motion along the bisector normal leaves the bistatic range unchanged
    assert bistatic_doppler((10.0, 0.0), target, tx, rx, 0.1) == pytest.approx(0.0, abs=1e-9)


def test_bistatic_doppler_matches_range_rate():
    tx, rx = Position2D(60.0, 40.0), Position2D(0.0, 0.0)
    p, v, lam, dt = np.array([30.0, 51.9]), np.array([3.0, -4.0]), 0.1, 1e-6

    def bistatic(q):
        return np.linalg.norm(q - tx.as_array()) + np.linalg.norm(q - rx.as_array())

    rate = (bistatic(p + v * dt) - bistatic(p - v * dt)) / (2 * dt)
    f = bistatic_doppler(v, Position2D(*p), tx, rx, lam)
    assert f == pytest.approx(-rate / lam, rel=1e-6)


def test_path_power_radar_equation():
    scene = Scene(Position2D(60.0, 40.0), 0.0)
    # 0.1 W * (0.1 m)^2 * 2 / ((4 pi)^3 * 10^2 * 50^2)
    expected = 0.1 * 0.01 * 2 / ((4 * np.pi) ** 3 * 100 * 2500)
    assert path_power(scene, 2.0, 10.0, 50.0) == pytest.approx(expected, rel=1e-12)


def test_derive_paths_order_and_delay(small_scene):
    paths = derive_paths(small_scene)
    assert [p.kind for p in paths] == ["anchor", "anchor", "static", "dynamic"]
    a0 = small_scene.anchors[0].position
    d = a0.distance_to(small_scene.ue_position) + a0.distance_to(small_scene.bs_position)
    assert paths[0].delay == pytest.approx(d / C)
    assert paths[3].doppler == -650.0
    assert all(p.doppler == 0 for p in paths[:3])


def test_derive_paths_phases(small_scene):
    rng = np.random.default_rng(1)
    paths = derive_paths(small_scene, rng)
    amps = [abs(p.coeff) for p in paths]
    assert np.allclose(amps, [abs(p.coeff) for p in derive_paths(small_scene)])
    with pytest.raises(ValueError):
        derive_paths(small_scene, phases=[0.0])


def test_degenerate_scene():
    ue = Position2D(10.0, 10.0)
    scene = Scene(ue, 0.0, static_objects=(StaticObject(ue),))
    with pytest.raises(DegenerateScene):
        derive_paths(scene)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        Position2D(np.nan, 0.0)
    with pytest.raises(ValueError):
        DynamicTarget(Position2D(1.0, 1.0))
    with pytest.raises(ValueError):
        DynamicTarget(Position2D(1.0, 1.0), doppler=1.0, velocity=(1.0, 0.0))
    with pytest.raises(ValueError):
        Scene(Position2D(1.0, 1.0), 0.0, static_objects=(StaticObject(Position2D(2, 2), 0.0),))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 600 / C), st.floats(-np.pi, np.pi))
def test_with_reference_keeps_relative_offsets(seed, tmo0, cfo0):
    clock = sample_clock(np.random.default_rng(seed), 12)
    moved = clock.with_reference(tmo0, cfo0)
    assert moved.tmo[0] == pytest.approx(tmo0)
    assert np.allclose(moved.relative_tmo, clock.relative_tmo, atol=1e-18)
    assert np.allclose(wrap_angle(moved.relative_cfo - clock.relative_cfo), 0, atol=1e-12)


def test_sample_clock_ranges():
    clock = sample_clock(np.random.default_rng(0), 1000, pinned_tmo0=1e-7, pinned_cfo0=0.5)
    assert clock.tmo[0] == 1e-7 and clock.cfo_phase[0] == 0.5
    assert np.all((clock.tmo >= 0) & (clock.tmo < 625 / C))
    assert np.all(np.abs(clock.cfo_phase) <= np.pi)
    assert np.all(sample_clock(None, 5, zero=True).tmo == 0)
    with pytest.raises(ValueError):
        sample_clock(np.random.default_rng(0), 1)
    with pytest.raises(ValueError):
        ClockSequence(np.zeros(3), np.zeros(4))


@given(st.floats(-100, 100))
def test_wrap_angle_range(x):
    w = wrap_angle(x)
    assert -np.pi <= w < np.pi
    assert np.isclose(np.exp(1j * w), np.exp(1j * x), atol=1e-9)
