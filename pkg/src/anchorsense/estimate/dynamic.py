"""Dynamic-target processing: clutter notch, range-Doppler detection, parametric refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, signal

from ..channel import CsiTensor, Waveform
from .static import _sine_from_ula

NOTCH_B = np.array([1.0, -1.0])
NOTCH_A = np.array([1.0, -0.9])


@dataclass(frozen=True)
class DynamicMeasurement:
    target_index: int
    relative_range: float  # m in [0, R_max), includes the common clock bias
    aoa: float  # rad
    doppler: float  # Hz
    aod: float = float("nan")
    power: float = float("nan")


@dataclass(frozen=True)
class DynamicDetections:
    measurements: list
    requested: int

    @property
    def complete(self) -> bool:
        return len(self.measurements) == self.requested


def notch(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """First-order DC notch along ``axis``, started in the DC steady state.

    Starting from the steady state of the first sample makes a constant input
    produce exactly zero output, so no settling symbols need to be dropped.
    The map is linear in ``x``.
    """
    x = np.asarray(x)
    zi_shape = [1] * x.ndim
    zi_shape[axis] = 1
    first = np.take(x, [0], axis=axis)
    zi = signal.lfilter_zi(NOTCH_B, NOTCH_A).reshape(zi_shape) * first
    y, _ = signal.lfilter(NOTCH_B, NOTCH_A, x, axis=axis, zi=zi)
    return y


def notch_response(freq, symbol_interval: float) -> np.ndarray:
    """Steady-state magnitude response of the notch at Doppler ``freq``."""
    z = np.exp(-2j * np.pi * np.asarray(freq) * symbol_interval)
    return np.abs((1 - z) / (1 - 0.9 * z))


def doppler_filter(csi: CsiTensor) -> CsiTensor:
    """Remove zero-Doppler (static) components along the symbol axis."""
    return CsiTensor(notch(csi.values, axis=1), csi.waveform)


# ------------------------------------------------------------- detection

def range_doppler_map(values: np.ndarray, oversample: int = 1) -> np.ndarray:
    """Non-coherent (summed over pairs) range-Doppler power map.

    Row q is range q * R_max / (oversample N); column d is Doppler bin d with
    d >= K*oversample/2 wrapping to negative Doppler.
    """
    N, K, _ = values.shape
    spec = np.fft.fft(np.fft.ifft(values, oversample * N, axis=0) * oversample * N,
                      oversample * K, axis=1)
    return np.sum(np.abs(spec) ** 2, axis=2)


def _pick_peaks(P: np.ndarray, count: int, guard: int, threshold_db: float):
    mask = np.ones_like(P, dtype=bool)
    for dq in (-1, 0, 1):
        for dd in (-1, 0, 1):
            if dq or dd:
                mask &= P >= np.roll(np.roll(P, dq, 0), dd, 1)
    cand = np.flatnonzero(mask)
    cand = cand[np.argsort(P.flat[cand])[::-1]]
    floor = np.median(P) * 10 ** (threshold_db / 10)
    Q, D = P.shape
    chosen = []
    for c in cand:
        if P.flat[c] <= floor or len(chosen) == count:
            break
        q, d = divmod(int(c), D)
        near = any(min(abs(q - a) % Q, Q - abs(q - a) % Q) <= guard
                   and min(abs(d - b) % D, D - abs(d - b) % D) <= guard for a, b in chosen)
        if not near:
            chosen.append((q, d))
    return chosen


def _range_power(t_nu, x):
    """sum_m |sum_n t[n, m] e^{j2pi n x}|^2 for a Doppler-contracted slice."""
    return float(np.sum(np.abs(np.exp(2j * np.pi * x * np.arange(t_nu.shape[0])) @ t_nu) ** 2))


def _doppler_power(t_x, nu):
    return float(np.sum(np.abs(np.exp(-2j * np.pi * nu * np.arange(t_x.shape[0])) @ t_x) ** 2))


def _quadratic_refine(f, x, step, iters=3):
    for _ in range(iters):
        f0, f1, f2 = np.log(f(x - step)), np.log(f(x)), np.log(f(x + step))
        den = f0 - 2 * f1 + f2
        if den < 0:
            x = x + np.clip(0.5 * (f0 - f2) / den, -1, 1) * step
        step /= 4
    return x


def _cell_vector(Y, x, nu):
    N, K, _ = Y.shape
    return np.einsum("nkm,n,k->m", Y, np.exp(2j * np.pi * x * np.arange(N)),
                     np.exp(-2j * np.pi * nu * np.arange(K)))


def _angles(b: np.ndarray, waveform: Waveform):
    """AOA and AOD sines from one pair-indexed vector b[m_t * M_r + m_r]."""
    B = b.reshape(waveform.n_tx, waveform.n_rx)
    # the dominant singular pair separates the receive and transmit signatures
    u, s, vh = np.linalg.svd(B)
    s_rx = _sine_from_ula(vh[0])
    s_tx = _sine_from_ula(u[:, 0])
    return s_rx, s_tx


def detect_cells(values: np.ndarray, n_targets: int, guard: int = 2,
                 threshold_db: float = 13.0, oversample: int = 1):
    """Strongest range-Doppler cells, refined by iterated quadratic interpolation.

    Returns a list of (x, nu): delay in cycles per subcarrier and Doppler in
    cycles per symbol.
    """
    N, K, _ = values.shape
    P = range_doppler_map(values, oversample)
    cells = []
    for q, d in _pick_peaks(P, n_targets, guard, threshold_db):
        x = q / (oversample * N)
        nu = d / (oversample * K)
        for _ in range(2):
            t_nu = np.einsum("nkm,k->nm", values, np.exp(-2j * np.pi * nu * np.arange(K)))
            x = _quadratic_refine(lambda t: _range_power(t_nu, t), x, 1 / (oversample * N) / 2)
            t_x = np.einsum("nkm,n->km", values, np.exp(2j * np.pi * x * np.arange(N)))
            nu = _quadratic_refine(lambda t: _doppler_power(t_x, t), nu, 1 / (oversample * K) / 2)
        cells.append((x, nu))
    return cells


def estimate_dynamic(dynamic: CsiTensor, n_targets: int, guard: int = 2,
                     threshold_db: float = 13.0, oversample: int = 1) -> DynamicDetections:
    """DFT-based detection and estimation of dynamic targets.

    Peaks of the non-coherent range-Doppler map are refined by iterated
    quadratic interpolation in log-power; the AOA comes from the receive-array
    response at the refined cell. Fewer peaks than requested above the
    threshold gives a partial list (``complete`` is False).
    """
    Y = dynamic.values
    wf = dynamic.waveform
    out = []
    for i, (x, nu) in enumerate(detect_cells(Y, n_targets, guard, threshold_db, oversample)):
        b = _cell_vector(Y, x, nu)
        s_rx, s_tx = _angles(b, wf)
        out.append(_measurement(i, x, nu, s_rx, s_tx, float(np.vdot(b, b).real), wf))
    return DynamicDetections(out, n_targets)


def dynamic_component(values: np.ndarray, n_targets: int, guard: int = 2,
                      threshold_db: float = 13.0, start: AtomFit | None = None):
    """Fitted dynamic-path contribution to unfiltered CSI of shape (N, K, M).

    Targets are detected and fitted on the notch-filtered data; the fitted
    atoms are then rebuilt without the filter. ``start`` skips detection and
    warm-starts from a previous fit. Returns (component, fit).
    """
    filtered = notch(values, axis=1)
    if start is None:
        cells = detect_cells(filtered, n_targets, guard, threshold_db)
        if not cells:
            return np.zeros_like(values), None
        x0, nu0 = [c[0] for c in cells], [c[1] for c in cells]
    else:
        x0, nu0 = start.x, start.nu
    fit = fit_atoms(filtered, x0, nu0, filtered=True)
    N, K, _ = values.shape
    u, _, g, _ = _factors(fit.x, fit.nu, N, K, filtered=False)
    return np.einsum("nd,kd,dm->nkm", u, g, fit.amplitudes), fit


def _measurement(i, x, nu, s_rx, s_tx, power, wf):
    nu = (nu + 0.5) % 1.0 - 0.5
    return DynamicMeasurement(i, float((x % 1.0) * wf.max_range), float(np.arcsin(s_rx)),
                              float(nu / wf.symbol_interval), float(np.arcsin(s_tx)), power)


# ------------------------------------------------------------ refinement

@dataclass(frozen=True)
class AtomFit:
    x: np.ndarray  # delay in cycles per subcarrier (range / R_max)
    nu: np.ndarray  # Doppler in cycles per symbol
    amplitudes: np.ndarray  # (D, M) complex, one free array vector per atom
    cost: float
    iterations: int
    converged: bool


def _atoms(x, nu, N, K, filtered):
    n = np.arange(N)[:, None]
    k = np.arange(K)[:, None]
    u = np.exp(-2j * np.pi * n * x[None, :])
    du = -2j * np.pi * n * u
    g = np.exp(2j * np.pi * k * nu[None, :])
    dg = 2j * np.pi * k * g
    if filtered:
        g, dg = notch(g, axis=0), notch(dg, axis=0)
    outer = lambda a, b: (a[:, None, :] * b[None, :, :]).reshape(N * K, -1)
    return outer(u, g), outer(du, g), outer(u, dg)


def _factors(x, nu, N, K, filtered):
    """Range and Doppler factors of the atoms and their parameter derivatives."""
    n = np.arange(N)[:, None]
    k = np.arange(K)[:, None]
    u = np.exp(-2j * np.pi * n * x[None, :])
    g = np.exp(2j * np.pi * k * nu[None, :])
    du = -2j * np.pi * n * u
    dg = 2j * np.pi * k * g
    if filtered:
        g, dg = notch(g, axis=0), notch(dg, axis=0)
    return u, du, g, dg


def _gram(a, b):
    return a.conj().T @ b


def fit_atoms(values: np.ndarray, x0, nu0, filtered: bool = True, max_iters: int = 60,
              tol: float = 1e-14) -> AtomFit:
    """Least-squares fit of delay-Doppler atoms with free per-pair amplitudes.

    Model: values[n, k, m] = sum_d e^{-j2pi n x_d} g_d[k] b_d[m], where g_d is
    the Doppler tone, passed through the clutter notch when ``filtered``.
    The amplitudes are projected out (variable projection) and (x, nu) are
    updated by Levenberg-Marquardt with the Kaufman Jacobian. Every inner
    product of the separable atoms is formed from their factors, so the
    N*K-long atoms are never built.
    """
    N, K, M = values.shape
    Y = values.reshape(N, K * M)
    energy = float(np.real(np.vdot(Y, Y)))
    x = np.array(x0, dtype=float)
    nu = np.array(nu0, dtype=float)
    D = x.size

    def project(u, g):
        # Phi^H Y as (D, M) and the (D, K, M) range-compressed data
        T = (u.conj().T @ Y).reshape(D, K, M)
        return np.einsum("kd,dkm->dm", g.conj(), T), T

    def solve(x, nu):
        u, du, g, dg = _factors(x, nu, N, K, filtered)
        F = _gram(u, u) * _gram(g, g)
        Z, T = project(u, g)
        B = linalg.solve(F, Z, assume_a="pos")
        cost = energy - float(np.real(np.vdot(Z, B)))
        return (u, du, g, dg, F, Z, T, B), max(cost, 0.0)

    state, cost = solve(x, nu)
    mu = 1e-3
    converged, it = False, 0
    for it in range(max_iters):
        u, du, g, dg, F, Z, T, B = state
        Guu, Gdu, Gdd = _gram(u, u), _gram(du, u), _gram(du, du)
        Hgg, Hdg, Hdd = _gram(g, g), _gram(dg, g), _gram(dg, dg)
        # derivative atoms: columns x_0..x_{D-1}, nu_0..nu_{D-1}
        dP_Phi = np.concatenate([Gdu * Hgg, Guu * Hdg], axis=0)
        dP_dP = np.block([[Gdd * Hgg, Gdu * Hdg.conj().T],
                          [Gdu.conj().T * Hdg, Guu * Hdd]])
        Tdu = (du.conj().T @ Y).reshape(D, K, M)
        dP_Y = np.concatenate([np.einsum("kd,dkm->dm", g.conj(), Tdu),
                               np.einsum("kd,dkm->dm", dg.conj(), T)], axis=0)
        VV = dP_dP - dP_Phi @ linalg.solve(F, dP_Phi.conj().T, assume_a="pos")
        dP_r = dP_Y - dP_Phi @ B
        Bi = np.concatenate([B, B], axis=0)
        A = np.real(VV * (Bi.conj() @ Bi.T))
        grad = -np.real(np.sum(dP_r * Bi.conj(), axis=1))
        diag = np.diag(A).copy()
        if not np.all(diag > 0):
            break
        accepted = False
        for _ in range(30):
            step = np.linalg.solve(A + mu * np.diag(diag), -grad)
            trial, trial_cost = solve(x + step[:D], nu + step[D:])
            if trial_cost <= cost:
                x, nu, state, cost = x + step[:D], nu + step[D:], trial, trial_cost
                mu = max(mu / 10, 1e-12)
                accepted = True
                break
            mu *= 10
        if not accepted or np.max(np.abs(step)) < tol:
            converged = True
            break
    B = state[7]
    return AtomFit(x, nu, B, cost, it, converged)


def refine_dynamic(dynamic: CsiTensor, detections: DynamicDetections) -> DynamicDetections:
    """Joint parametric refinement of all detected targets on the filtered CSI."""
    ms = detections.measurements
    if not ms:
        return detections
    wf = dynamic.waveform
    x0 = [m.relative_range / wf.max_range for m in ms]
    nu0 = [m.doppler * wf.symbol_interval for m in ms]
    fit = fit_atoms(dynamic.values, x0, nu0, filtered=True)
    out = []
    for i, m in enumerate(ms):
        b = fit.amplitudes[i]
        s_rx, s_tx = _angles(b, wf)
        out.append(_measurement(m.target_index, fit.x[i], fit.nu[i], s_rx, s_tx,
                                float(np.vdot(b, b).real), wf))
    return DynamicDetections(out, detections.requested)
