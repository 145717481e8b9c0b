"""Zero-Doppler processing: range MUSIC on known AOA cuts and anchor identification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from ..channel import CsiTensor, Waveform
from .subspace import Subspace, signal_subspace


@dataclass(frozen=True)
class AnchorMeasurement:
    anchor_index: int
    relative_range: float  # m, includes the common clock bias
    aod: float  # rad, UE array frame
    peak_power: float
    identified: bool = True


def extract_zero_doppler(csi: CsiTensor) -> np.ndarray:
    """Zero-Doppler bin (mean over symbols), shape (N, M_t, M_r)."""
    return csi.values.mean(axis=1).reshape(csi.values.shape[0], csi.waveform.n_tx,
                                           csi.waveform.n_rx)


def range_steering(x, n: np.ndarray) -> np.ndarray:
    """e^{-j 2 pi n x} with x = range / R_max (cycles per subcarrier); shape (len(n), len(x))."""
    return np.exp(-2j * np.pi * np.outer(n, np.atleast_1d(x)))


def array_steering(s, m: int) -> np.ndarray:
    """Half-wavelength ULA response for direction sine(s); shape (m, len(s))."""
    return np.exp(1j * np.pi * np.outer(np.arange(m), np.atleast_1d(s)))


def smoothed_snapshots(static: np.ndarray, subarray: int, joint_tx: bool = False) -> np.ndarray:
    """Forward-smoothed data matrix over subcarrier subvectors.

    Rows index (subcarrier, [tx,] rx) of one subvector; columns index
    (shift, tx) or just shift when the transmit axis is kept in the vector.
    """
    N, Mt, Mr = static.shape
    shifts = N - subarray + 1
    idx = np.arange(subarray)[None, :] + np.arange(shifts)[:, None]  # (shifts, subarray)
    blocks = static[idx]  # (shifts, subarray, Mt, Mr)
    if joint_tx:
        return blocks.reshape(shifts, -1).T
    return blocks.transpose(1, 3, 0, 2).reshape(subarray * Mr, shifts * Mt)


@dataclass(frozen=True)
class StaticProcessor:
    """Subspaces of the zero-Doppler data shared by all anchor cuts."""

    waveform: Waveform
    subarray: int
    range_space: Subspace  # rows (n, r), transmit antennas as snapshots
    joint_space: Subspace  # rows (n, t, r)

    @classmethod
    def build(cls, static: np.ndarray, waveform: Waveform, subarray: int | None = None,
              noise_var: float | None = None) -> "StaticProcessor":
        """``noise_var`` is the per-element variance of the zero-Doppler data."""
        N = static.shape[0]
        L = N // 2 if subarray is None else subarray
        range_space = signal_subspace(smoothed_snapshots(static, L), noise_var)
        joint_space = signal_subspace(smoothed_snapshots(static, L, joint_tx=True), noise_var)
        return cls(waveform, L, range_space, joint_space)

    def _cut_vector(self, aoa: float, x: float) -> np.ndarray:
        n = np.arange(self.subarray)
        w = array_steering(np.sin(aoa), self.waveform.n_rx)[:, 0]
        return np.kron(range_steering(x, n)[:, 0], w)

    def null_depth(self, aoa: float, x: float) -> float:
        """Normalized noise-subspace energy of the joint steering vector."""
        a = self._cut_vector(aoa, x)
        r = self.range_space.residual(a)
        return float(np.real(np.vdot(r, r)) / np.real(np.vdot(a, a)))

    def _null_slope(self, aoa: float, x: float) -> float:
        n = np.arange(self.subarray)
        a = self._cut_vector(aoa, x)
        da = a * np.repeat(-2j * np.pi * n, self.waveform.n_rx)
        return float(2 * np.real(np.vdot(da, self.range_space.residual(a))))

    def spectrum(self, aoa: float, range_grid=None, oversample: int = 8):
        """MUSIC pseudo-spectrum on an AOA cut; returns (ranges, values).

        Without ``range_grid`` a uniform grid over [0, R_max) is evaluated by FFT.
        """
        R_max = self.waveform.max_range
        L, Mr = self.subarray, self.waveform.n_rx
        E = self.range_space.basis.reshape(L, Mr, -1)
        w = array_steering(np.sin(aoa), Mr)[:, 0]
        e = np.einsum("nrp,r->np", E.conj(), w)  # E^H a = sum_n e[n] e^{-j2pi n x}
        norm = L * Mr
        if range_grid is None:
            Q = oversample * self.waveform.n_subcarriers
            proj = np.sum(np.abs(np.fft.fft(e, Q, axis=0)) ** 2, axis=1)
            ranges = np.arange(Q) * R_max / Q
        else:
            ranges = np.asarray(range_grid, dtype=float)
            if np.any(ranges < 0) or np.any(ranges >= R_max):
                raise ValueError("range grid must lie in [0, R_max)")
            U = range_steering(ranges / R_max, np.arange(L))
            proj = np.sum(np.abs(U.T @ e) ** 2, axis=1)
        depth = np.maximum(1.0 - proj / norm, np.finfo(float).eps * 1e-3)
        return ranges, 1.0 / depth

    def refine_range(self, aoa: float, x0: float, step: float) -> float:
        """Continuous minimizer of the null depth near ``x0`` (cycles)."""
        f = lambda x: self._null_slope(aoa, x)
        lo, hi = x0 - step, x0 + step
        for _ in range(6):
            if f(lo) < 0 < f(hi):
                return optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
            lo, hi = lo - step, hi + step
        res = optimize.minimize_scalar(lambda x: self.null_depth(aoa, x),
                                       bounds=(x0 - step, x0 + step), method="bounded",
                                       options={"xatol": 1e-13})
        return float(res.x)

    def tx_signature(self, aoa: float, x: float) -> np.ndarray:
        """Transmit-array vector best explained by the signal subspace at a cell."""
        Mt, Mr, L = self.waveform.n_tx, self.waveform.n_rx, self.subarray
        u = range_steering(x, np.arange(L))[:, 0]
        w = array_steering(np.sin(aoa), Mr)[:, 0]
        B = np.kron(u[:, None], np.kron(np.eye(Mt), w[:, None]))  # (L*Mt*Mr, Mt)
        Q = self.joint_space.residual(B)
        _, _, vh = np.linalg.svd(Q, full_matrices=False)
        return vh[-1].conj()


def _sine_from_ula(v: np.ndarray) -> float:
    """Direction sine maximizing |a(s)^H v|^2 for a half-wavelength ULA vector."""
    m = np.arange(v.size)
    G = 64 * v.size
    grid = np.abs(np.fft.fft(v, G)) ** 2  # sum v e^{-j2pi m q/G}, s = 2q/G
    q = int(np.argmax(grid))
    s0 = 2 * q / G
    s0 = s0 - 2 if s0 >= 1 else s0

    def slope(s):
        a = np.exp(-1j * np.pi * m * s)
        val = np.sum(v * a)
        dval = np.sum(-1j * np.pi * m * v * a)
        return float(2 * np.real(np.conj(val) * dval))

    h = 2.0 / G
    lo, hi = s0 - h, s0 + h
    if slope(lo) > 0 > slope(hi):
        s0 = optimize.brentq(slope, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return float(np.clip(s0, -1.0, 1.0))


def identify_anchors(processor: StaticProcessor, anchor_aoas, detection_db: float = 20.0,
                     candidates: int = 3) -> list[AnchorMeasurement]:
    """Per anchor AOA cut: strongest MUSIC peak gives the range, subspace fit the AOD."""
    R_max = processor.waveform.max_range
    out = []
    for i, aoa in enumerate(anchor_aoas):
        ranges, spec = processor.spectrum(aoa)
        step = ranges[1] - ranges[0]
        peaks = np.flatnonzero((spec > np.roll(spec, 1)) & (spec >= np.roll(spec, -1)))
        peaks = peaks[np.argsort(spec[peaks])[::-1][:candidates]]
        best_x, best_val = None, -np.inf
        for p in peaks:
            x = processor.refine_range(aoa, ranges[p] / R_max, step / R_max)
            val = 1.0 / max(processor.null_depth(aoa, x), np.finfo(float).tiny)
            if val > best_val:
                best_x, best_val = x, val
        floor = np.median(spec)
        x = best_x % 1.0
        identified = bool(best_val > floor * 10 ** (detection_db / 10))
        sig = processor.tx_signature(aoa, x)
        aod = float(np.arcsin(_sine_from_ula(sig)))
        out.append(AnchorMeasurement(i, float(x * R_max), aod, float(best_val), identified))
    return out
