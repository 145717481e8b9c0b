import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsense.channel import (K_BOLTZMANN, CsiTensor, NoiseModel, Waveform, add_los_path,
                                 clock_rotation, complex_noise, noise_free_csi, pair_indices,
                                 read_csi, snr_static, static_amplitudes, steering,
                                 synthesize_csi, write_csi)
from anchorsense.scene import C, PathParams, Position2D, derive_paths, sample_clock


def test_waveform_constants():
    wf = Waveform()
    assert wf.max_range == pytest.approx(625.0)
    assert wf.wavelength == pytest.approx(0.1)
    assert wf.max_doppler == pytest.approx(8000.0)
    assert wf.bandwidth == pytest.approx(122.88e6)
    assert wf.shape == (256, 160, 32)
    with pytest.raises(ValueError):
        Waveform(n_subcarriers=0)


def test_thermal_noise_power():
    wf = Waveform()
    assert NoiseModel.thermal(wf).sigma_n_sq == pytest.approx(
        1.380649e-23 * 10 * 290 * 122.88e6)
    assert K_BOLTZMANN == 1.380649e-23


def test_pair_indexing():
    wf = Waveform(n_tx=2, n_rx=3)
    mt, mr = pair_indices(wf)
    assert list(mt) == [0, 0, 0, 1, 1, 1]
    assert list(mr) == [0, 1, 2, 0, 1, 2]
    A = steering([0.3], [-0.2], wf)
    assert A.shape == (6, 1)
    assert A[4, 0] == pytest.approx(np.exp(1j * np.pi * (np.sin(0.3) - np.sin(0.2))))


def test_single_path_elementwise(small_waveform):
    wf = small_waveform
    p = PathParams(delay=1e-6, doppler=300.0, aoa=0.4, aod=-0.7, coeff=0.5 - 0.2j)
    y = noise_free_csi([p], wf)
    n, k, m = 5, 7, 6
    mt, mr = divmod(m, wf.n_rx)
    expected = (p.coeff * np.exp(-2j * np.pi * n * wf.delta_f * p.delay)
                * np.exp(2j * np.pi * k * wf.symbol_interval * p.doppler)
                * np.exp(1j * np.pi * (mr * np.sin(p.aoa) + mt * np.sin(p.aod))))
    assert y[n, k, m] == pytest.approx(expected, rel=1e-12)


def test_clock_rotation_elementwise(small_waveform):
    clock = sample_clock(np.random.default_rng(3), small_waveform.n_symbols)
    rot = clock_rotation(clock, small_waveform)
    n, k = 9, 4
    expected = np.exp(1j * clock.cfo_phase[k]) * np.exp(
        -2j * np.pi * n * clock.tmo[k] * small_waveform.delta_f)
    assert rot[n, k] == pytest.approx(expected, rel=1e-12)


def test_path_validation(small_waveform):
    far = PathParams(delay=1.0 / small_waveform.delta_f, doppler=0, aoa=0, aod=0, coeff=1)
    fast = PathParams(delay=0, doppler=9000.0, aoa=0, aod=0, coeff=1)
    for p in (far, fast):
        with pytest.raises(ValueError):
            noise_free_csi([p], small_waveform)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_noise_is_rotated_with_signal(seed):
    """Changing only the absolute clock reference changes the CSI by a known rotation."""
    wf = Waveform(n_subcarriers=32, n_symbols=16, n_tx=2, n_rx=4)
    paths = [PathParams(2e-7, 0.0, 0.1, 0.2, 1e-3), PathParams(5e-7, 400.0, -0.3, 0.5, 2e-4j)]
    clock = sample_clock(np.random.default_rng(seed), wf.n_symbols)
    moved = clock.with_reference(3e-7, 0.4)
    a = synthesize_csi(paths, clock, wf, NoiseModel(1e-6), np.random.default_rng(1))
    b = synthesize_csi(paths, moved, wf, NoiseModel(1e-6), np.random.default_rng(1))
    ratio = clock_rotation(moved, wf) / clock_rotation(clock, wf)
    assert np.allclose(b.values, a.values * ratio[:, :, None], atol=1e-12)


def test_noise_statistics():
    z = complex_noise(np.random.default_rng(0), (200000,), 2.5)
    assert np.mean(np.abs(z) ** 2) == pytest.approx(2.5, rel=0.02)
    assert np.mean(z.real**2) == pytest.approx(np.mean(z.imag**2), rel=0.03)
    assert abs(np.mean(z.real * z.imag)) < 0.02


def test_synthesize_subset_of_pairs(small_waveform, small_scene):
    paths = derive_paths(small_scene, np.random.default_rng(0))
    clock = sample_clock(np.random.default_rng(1), small_waveform.n_symbols)
    full = synthesize_csi(paths, clock, small_waveform)
    part = synthesize_csi(paths, clock, small_waveform, n_pairs=3)
    assert part.values.shape[2] == 3
    assert np.allclose(part.values, full.values[:, :, :3])


def test_static_amplitudes_excludes_dynamic(small_waveform, small_scene):
    paths = derive_paths(small_scene)
    h = static_amplitudes(paths, small_waveform)
    statics = [p for p in paths if p.doppler == 0]
    assert np.allclose(h, noise_free_csi(statics, small_waveform)[:, 0, :])
    p_s = sum(abs(p.coeff) ** 2 for p in statics)
    # incoherent power: |h|^2 averages to the sum of path powers over many subcarriers
    assert snr_static(np.ones(4), 0.25) == pytest.approx(10 * np.log10(4))
    assert np.mean(np.abs(h) ** 2) == pytest.approx(p_s, rel=0.5)


def test_los_path(small_scene):
    paths = add_los_path([], small_scene.ue_position, small_scene.bs_position, 0.1, 0.1)
    assert paths[0].kind == "los"
    assert paths[0].delay == pytest.approx(np.hypot(60, 40) / C)


def test_csi_roundtrip(tmp_path, small_waveform):
    rng = np.random.default_rng(0)
    values = complex_noise(rng, small_waveform.shape, 1.0)
    csi = CsiTensor(values, small_waveform)
    write_csi(tmp_path / "a.bin", csi)
    back = read_csi(tmp_path / "a.bin", small_waveform)
    assert np.array_equal(back.values, csi.values)
    write_csi(tmp_path / "b.bin", csi, single=True)
    back = read_csi(tmp_path / "b.bin")
    assert back.waveform.delta_f == small_waveform.delta_f
    assert np.allclose(back.values, csi.values, atol=1e-6)
    assert (tmp_path / "b.bin").stat().st_size == 36 + 8 * values.size


def test_csi_tensor_validation(small_waveform):
    with pytest.raises(ValueError):
        CsiTensor(np.zeros((3, 3, 3)), small_waveform)
    bad = np.zeros(small_waveform.shape, complex)
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        CsiTensor(bad, small_waveform)
    csi = CsiTensor(np.zeros(small_waveform.shape), small_waveform)
    with pytest.raises(ValueError):
        csi.values[0, 0, 0] = 1
    assert csi.by_antenna().shape == (32, 16, 2, 4)
