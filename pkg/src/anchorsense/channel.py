"""CSI synthesis with clock asynchronism and thermal noise."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .scene import C, PathParams, Position2D, ClockSequence, DegenerateScene, aoa_of, aod_of

K_BOLTZMANN = 1.380649e-23


@dataclass(frozen=True)
class Waveform:
    delta_f: float = 480e3
    n_subcarriers: int = 256
    symbol_interval: float = 62.5e-6
    n_symbols: int = 160
    n_tx: int = 4
    n_rx: int = 8
    carrier_freq: float = 3e9

    def __post_init__(self):
        for name in ("delta_f", "n_subcarriers", "symbol_interval", "n_symbols",
                     "n_tx", "n_rx", "carrier_freq"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.delta_f

    @property
    def max_range(self) -> float:
        return C / self.delta_f

    @property
    def wavelength(self) -> float:
        return C / self.carrier_freq

    @property
    def n_pairs(self) -> int:
        return self.n_tx * self.n_rx

    @property
    def max_doppler(self) -> float:
        return 1.0 / (2 * self.symbol_interval)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_subcarriers, self.n_symbols, self.n_pairs)


@dataclass(frozen=True)
class NoiseModel:
    sigma_n_sq: float
    seed: int | None = None

    @classmethod
    def thermal(cls, waveform: Waveform, noise_figure: float = 10.0,
                temperature: float = 290.0, seed: int | None = None) -> "NoiseModel":
        """Noise power k_B F T B with the noise figure given as a linear factor."""
        return cls(K_BOLTZMANN * noise_figure * temperature * waveform.bandwidth, seed)


@dataclass(frozen=True)
class CsiTensor:
    """Complex CSI of shape (N, K, M_t*M_r); read-only after creation."""

    values: np.ndarray
    waveform: Waveform

    def __post_init__(self):
        v = np.array(self.values, dtype=complex)
        if v.ndim != 3 or v.shape[:2] != self.waveform.shape[:2]:
            raise ValueError(f"CSI shape {v.shape} does not match waveform {self.waveform.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("CSI contains non-finite entries")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n_pairs(self) -> int:
        return self.values.shape[2]

    def by_antenna(self) -> np.ndarray:
        """View as (N, K, M_t, M_r); requires all pairs present."""
        wf = self.waveform
        return self.values.reshape(wf.n_subcarriers, wf.n_symbols, wf.n_tx, wf.n_rx)


def pair_indices(waveform: Waveform, n_pairs: int | None = None):
    """Transmit and receive element index of each flattened pair m = m_t*M_r + m_r."""
    m = np.arange(waveform.n_pairs if n_pairs is None else n_pairs)
    return m // waveform.n_rx, m % waveform.n_rx


def steering(aoa, aod, waveform: Waveform, n_pairs: int | None = None) -> np.ndarray:
    """Joint array response, shape (M, L) for L paths, half-wavelength spacing."""
    mt, mr = pair_indices(waveform, n_pairs)
    aoa = np.atleast_1d(aoa)
    aod = np.atleast_1d(aod)
    return np.exp(1j * np.pi * (np.outer(mr, np.sin(aoa)) + np.outer(mt, np.sin(aod))))


def check_paths(paths, waveform: Waveform):
    for p in paths:
        if not 0 <= p.delay < 1.0 / waveform.delta_f:
            raise ValueError(f"path delay {p.delay:.3e} s outside the unambiguous range")
        if abs(p.doppler) >= waveform.max_doppler:
            raise ValueError(f"Doppler {p.doppler} Hz is ambiguous")


def noise_free_csi(paths, waveform: Waveform, clock: ClockSequence | None = None,
                   n_pairs: int | None = None) -> np.ndarray:
    """Noise-free CSI array of shape (N, K, M)."""
    check_paths(paths, waveform)
    N, K = waveform.n_subcarriers, waveform.n_symbols
    M = waveform.n_pairs if n_pairs is None else n_pairs
    if not paths:
        return np.zeros((N, K, M), dtype=complex)
    n = np.arange(N)
    k = np.arange(K)
    delay = np.array([p.delay for p in paths])
    dop = np.array([p.doppler for p in paths])
    coeff = np.array([p.coeff for p in paths])
    U = np.exp(-2j * np.pi * np.outer(n, delay) * waveform.delta_f)
    V = np.exp(2j * np.pi * np.outer(k, dop) * waveform.symbol_interval) * coeff
    A = steering([p.aoa for p in paths], [p.aod for p in paths], waveform, M)
    y = ((U[:, None, :] * V[None, :, :]).reshape(N * K, -1) @ A.T).reshape(N, K, M)
    if clock is not None:
        y *= clock_rotation(clock, waveform)[:, :, None]
    return y


def clock_rotation(clock: ClockSequence, waveform: Waveform) -> np.ndarray:
    """Multiplicative clock term e^{j f_k} e^{-j 2 pi n tau_k df}, shape (N, K)."""
    if clock.n_snapshots != waveform.n_symbols:
        raise ValueError("clock length does not match the number of symbols")
    n = np.arange(waveform.n_subcarriers)
    # only tau mod 1/df matters; reducing first keeps the phase argument small
    frac = np.mod(clock.tmo * waveform.delta_f, 1.0)
    return np.exp(1j * clock.cfo_phase)[None, :] * np.exp(-2j * np.pi * np.outer(n, frac))


def synthesize_csi(paths: list[PathParams], clock: ClockSequence, waveform: Waveform,
                   noise: NoiseModel | None = None, rng: np.random.Generator | None = None,
                   n_pairs: int | None = None) -> CsiTensor:
    """CSI with clock offsets and circularly symmetric Gaussian noise.

    Noise is drawn in the offset-free frame and rotated with the signal. The
    clock term has unit modulus so the noise distribution is unchanged, and the
    same noise draw is reused when only the absolute clock reference changes.
    ``n_pairs`` synthesizes only the first antenna pairs.
    """
    y = noise_free_csi(paths, waveform, None, n_pairs)
    if noise is not None and noise.sigma_n_sq > 0:
        if rng is None:
            rng = np.random.default_rng(noise.seed)
        y += complex_noise(rng, y.shape, noise.sigma_n_sq)
    y *= clock_rotation(clock, waveform)[:, :, None]
    return CsiTensor(y, waveform)


def complex_noise(rng: np.random.Generator, shape, sigma_sq: float) -> np.ndarray:
    z = rng.standard_normal(tuple(shape) + (2,))
    return np.sqrt(sigma_sq / 2) * (z[..., 0] + 1j * z[..., 1])


def static_amplitudes(paths, waveform: Waveform, n_pairs: int | None = None) -> np.ndarray:
    """Offset-free noise-free static sum h_{s,n}^{(m)}, shape (N, M)."""
    statics = [p for p in paths if p.doppler == 0.0]
    return noise_free_csi(statics, replace(waveform, n_symbols=1), None, n_pairs)[:, 0, :]


def snr_static(h_static, sigma_n_sq: float) -> float:
    """SNR of the static sum in dB, averaged over antenna pairs if 2-D."""
    h = np.asarray(h_static)
    if h.ndim == 1:
        h = h[:, None]
    if h.size == 0:
        return -np.inf
    p_s = np.mean(np.abs(h) ** 2)
    with np.errstate(divide="ignore"):
        return float(10 * np.log10(p_s / sigma_n_sq))


def add_los_path(paths, ue_position: Position2D, bs_position: Position2D, wavelength: float,
                 tx_power: float, rho: float = 0.0, phase: float = 0.0) -> list[PathParams]:
    """Append the direct UE-to-BS path with free-space attenuation."""
    r = ue_position.distance_to(bs_position)
    if r == 0:
        raise DegenerateScene("UE coincides with the BS")
    amp = np.sqrt(tx_power) * wavelength / (4 * np.pi * r)
    los = PathParams(delay=r / C, doppler=0.0, aoa=aoa_of(ue_position, bs_position),
                     aod=aod_of(bs_position, ue_position, rho),
                     coeff=complex(amp * np.exp(1j * phase)), kind="los", index=0)
    return list(paths) + [los]


_MAGIC = b"CSIT"


def write_csi(path, csi: CsiTensor, single: bool = False):
    """Dump CSI: 36-byte header then samples, n fastest, then k, then m."""
    dtype = np.dtype("<c8" if single else "<c16")
    N, K, M = csi.values.shape
    wf = csi.waveform
    header = _MAGIC + struct.pack("<BxxxIII", 8 if single else 16, N, K, M)
    header += struct.pack("<dd", wf.delta_f, wf.symbol_interval)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(csi.values.astype(dtype).ravel(order="F").tobytes())


def read_csi(path, waveform: Waveform | None = None) -> CsiTensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a CSI dump")
    width, N, K, M = struct.unpack_from("<BxxxIII", raw, 4)
    delta_f, t0 = struct.unpack_from("<dd", raw, 20)
    data = np.frombuffer(raw, dtype="<c8" if width == 8 else "<c16", offset=36)
    values = data.reshape((N, K, M), order="F")
    if waveform is None:
        waveform = Waveform(delta_f=delta_f, n_subcarriers=N, symbol_interval=t0, n_symbols=K)
    return CsiTensor(values, waveform)
