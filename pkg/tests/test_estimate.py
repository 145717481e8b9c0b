import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsense import sync
from anchorsense.channel import CsiTensor, Waveform, complex_noise, synthesize_csi
from anchorsense.estimate import (StaticProcessor, doppler_filter, estimate_dynamic,
                                  extract_zero_doppler, fit_atoms, identify_anchors,
                                  music_range_spectrum, notch, notch_response,
                                  range_doppler_map, refine_dynamic, signal_subspace)
from anchorsense.estimate.dynamic import _atoms, detect_cells
from anchorsense.estimate.static import _sine_from_ula
from anchorsense.estimate.subspace import RankDeficientCovariance, mp_median
from anchorsense.scene import C, derive_paths, sample_clock, wrap_angle


def test_notch_kills_constant_and_is_linear():
    rng = np.random.default_rng(0)
    const = np.full((3, 40, 2), 1.5 - 0.5j)
    assert np.max(np.abs(notch(const))) < 1e-15
    a, b = complex_noise(rng, (3, 40, 2), 1), complex_noise(rng, (3, 40, 2), 1)
    assert np.allclose(notch(2 * a - 1j * b), 2 * notch(a) - 1j * notch(b))
    assert np.allclose(notch(a + const), notch(a))


def test_notch_response():
    T = 62.5e-6
    assert notch_response(0.0, T) == pytest.approx(0.0)
    assert notch_response(1 / (2 * T), T) == pytest.approx(2 / 1.9)
    # a long tone settles to the steady-state gain
    f = 650.0
    k = np.arange(2000)
    x = np.exp(2j * np.pi * f * k * T)
    y = notch(x[None, :], axis=1)[0]
    assert abs(y[-1]) == pytest.approx(notch_response(f, T), rel=1e-9)


def test_range_doppler_map_peak():
    N, K = 32, 16
    n, k = np.arange(N)[:, None], np.arange(K)[None, :]
    y = (np.exp(-2j * np.pi * n * 10 / N) * np.exp(2j * np.pi * k * 3 / K))[:, :, None]
    P = range_doppler_map(y)
    assert np.unravel_index(np.argmax(P), P.shape) == (10, 3)
    assert P.max() == pytest.approx((N * K) ** 2)
    P2 = range_doppler_map(y, oversample=2)
    assert np.unravel_index(np.argmax(P2), P2.shape) == (20, 6)


def test_detect_cells_refines_off_grid():
    N, K = 64, 32
    x, nu = 10.37 / N, 5.21 / K
    n, k = np.arange(N)[:, None], np.arange(K)[None, :]
    y = (np.exp(-2j * np.pi * n * x) * np.exp(2j * np.pi * k * nu))[:, :, None]
    (xe, nue), = detect_cells(y, 1)
    assert xe == pytest.approx(x, abs=0.01 / N)
    assert nue == pytest.approx(nu, abs=0.01 / K)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fit_atoms_noise_free(seed):
    rng = np.random.default_rng(seed)
    N, K, M = 32, 24, 3
    x = np.array([0.21, 0.63])
    nu = np.array([0.12, -0.27])
    B = complex_noise(rng, (2, M), 1.0)
    Phi, _, _ = _atoms(x, nu, N, K, filtered=True)
    y = (Phi @ B).reshape(N, K, M)
    fit = fit_atoms(y, x + rng.uniform(-0.1, 0.1, 2) / N, nu + rng.uniform(-0.1, 0.1, 2) / K)
    assert np.allclose(fit.x, x, atol=1e-10)
    assert np.allclose(fit.nu, nu, atol=1e-10)
    assert np.allclose(fit.amplitudes, B, atol=1e-8)


def test_fit_atoms_cost_matches_dense():
    rng = np.random.default_rng(3)
    N, K, M = 16, 12, 2
    y = complex_noise(rng, (N, K, M), 1.0)
    fit = fit_atoms(y, [0.3], [0.1], max_iters=1)
    Phi, _, _ = _atoms(fit.x, fit.nu, N, K, filtered=True)
    r = y.reshape(N * K, M) - Phi @ np.linalg.lstsq(Phi, y.reshape(N * K, M), rcond=None)[0]
    assert fit.cost == pytest.approx(np.sum(np.abs(r) ** 2), rel=1e-9)


def test_signal_subspace_order():
    rng = np.random.default_rng(1)
    A = complex_noise(rng, (40, 3), 1.0)
    S = complex_noise(rng, (3, 200), 1.0)
    Z = A @ S + complex_noise(rng, (40, 200), 1e-2)
    assert signal_subspace(Z, 1e-2).n_sources == 3
    assert signal_subspace(Z).n_sources == 3
    assert signal_subspace(A @ S).n_sources == 3
    with pytest.raises(RankDeficientCovariance):
        signal_subspace(A @ S, n_sources=3 + 37)


def test_mp_median_against_sampling():
    rng = np.random.default_rng(0)
    D, S = 200, 800
    Z = complex_noise(rng, (D, S), 1.0)
    eig = np.linalg.eigvalsh(Z @ Z.conj().T / S)
    assert np.median(eig) == pytest.approx(mp_median(D / S), rel=0.02)


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.99, 0.99), st.integers(2, 16))
def test_sine_from_ula(s, m):
    v = np.exp(1j * np.pi * np.arange(m) * s) * (0.3 - 2j)
    assert _sine_from_ula(v) == pytest.approx(s, abs=1e-9)


def _noise_free(scenario, seed=0):
    wf = scenario.waveform
    paths = derive_paths(scenario.scene, np.random.default_rng(seed))
    clock = sample_clock(np.random.default_rng(seed + 1), wf.n_symbols).with_reference(
        scenario.reference_tmo, 0.2)
    csi = synthesize_csi(paths, clock, wf)
    truth = sync.SyncEstimate(clock.relative_tmo, clock.relative_cfo)
    return paths, clock, sync.compensate(csi, truth)


@pytest.fixture(scope="module")
def noise_free(scenario):
    return _noise_free(scenario)


def test_anchor_estimation_noise_free(scenario, noise_free):
    paths, clock, comp = noise_free
    wf = scenario.waveform
    proc = StaticProcessor.build(extract_zero_doppler(comp), wf, scenario.estimate.subarray)
    anchors = [p for p in paths if p.kind == "anchor"]
    est = identify_anchors(proc, [p.aoa for p in anchors])
    for a, p in zip(est, anchors):
        expect = (p.delay + clock.tmo[0]) * C % wf.max_range
        assert a.identified
        assert a.relative_range == pytest.approx(expect, abs=1e-6)
        assert a.aod == pytest.approx(p.aod, abs=1e-8)


def test_music_spectrum_peaks_at_anchor(scenario, noise_free):
    paths, clock, comp = noise_free
    wf = scenario.waveform
    p = paths[0]
    ranges, spec = music_range_spectrum(extract_zero_doppler(comp), p.aoa, waveform=wf,
                                        subarray=scenario.estimate.subarray)
    expect = (p.delay + clock.tmo[0]) * C % wf.max_range
    assert abs(ranges[np.argmax(spec)] - expect) < 2 * (ranges[1] - ranges[0])
    with pytest.raises(ValueError):
        music_range_spectrum(extract_zero_doppler(comp), p.aoa, [700.0], waveform=wf)


def test_dynamic_estimation_noise_free(scenario, noise_free):
    paths, clock, comp = noise_free
    wf = scenario.waveform
    filtered = doppler_filter(comp)
    det = estimate_dynamic(filtered, 3)
    assert det.complete
    ref = refine_dynamic(filtered, det).measurements
    for p in (p for p in paths if p.kind == "dynamic"):
        expect = (p.delay + clock.tmo[0]) * C % wf.max_range
        m = min(ref, key=lambda m: abs(m.relative_range - expect))
        assert m.relative_range == pytest.approx(expect, abs=1e-6)
        assert m.aoa == pytest.approx(p.aoa, abs=1e-8)
        assert m.aod == pytest.approx(p.aod, abs=1e-8)
        assert m.doppler == pytest.approx(p.doppler, abs=1e-6)


def test_static_only_data_has_no_dynamic_targets(scenario):
    wf = Waveform(n_subcarriers=32, n_symbols=16, n_tx=2, n_rx=2)
    const = np.repeat(complex_noise(np.random.default_rng(0), (32, 1, 4), 1.0), 16, axis=1)
    det = estimate_dynamic(doppler_filter(CsiTensor(const, wf)), 2)
    assert not det.complete and det.measurements == []
