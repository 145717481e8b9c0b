"""Relative timing/carrier offset estimation and compensation.

Two stages: a coarse per-snapshot single-tone search on the conjugate
product against snapshot 0, then a joint Newton refinement that maximizes the
coherent static energy across snapshots. Error oracles for the refined stage
live at the bottom of the module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .channel import CsiTensor
from .scene import wrap_angle


class SyncError(RuntimeError):
    """Raised when the offsets cannot be estimated at all."""


@dataclass(frozen=True)
class SyncEstimate:
    """Relative offsets per snapshot: rtmo in seconds, rcfo in radians."""

    rtmo: np.ndarray
    rcfo: np.ndarray
    stage: str = "coarse"
    iterations_used: int = 0
    converged: bool = True

    def __post_init__(self):
        rtmo = np.asarray(self.rtmo, dtype=float).copy()
        rcfo = np.asarray(self.rcfo, dtype=float).copy()
        if rtmo.shape != rcfo.shape or rtmo.ndim != 1:
            raise ValueError("rtmo and rcfo must be equal-length vectors")
        if rtmo[0] != 0 or rcfo[0] != 0:
            raise ValueError("offsets are relative to snapshot 0")
        if not (np.all(np.isfinite(rtmo)) and np.all(np.isfinite(rcfo))):
            raise ValueError("non-finite offset estimate")
        rtmo.flags.writeable = False
        rcfo.flags.writeable = False
        object.__setattr__(self, "rtmo", rtmo)
        object.__setattr__(self, "rcfo", rcfo)

    def __add__(self, other: "SyncEstimate") -> "SyncEstimate":
        return SyncEstimate(self.rtmo + other.rtmo, wrap_angle(self.rcfo + other.rcfo),
                            stage=other.stage,
                            iterations_used=self.iterations_used + other.iterations_used,
                            converged=self.converged and other.converged)

    @classmethod
    def zeros(cls, K: int, stage: str = "coarse") -> "SyncEstimate":
        return cls(np.zeros(K), np.zeros(K), stage)


def _circular_mean(phases, axis=0):
    return np.angle(np.sum(np.exp(1j * phases), axis=axis))


def _wrapped_mean(x, period, axis=0):
    """Arithmetic mean of values defined modulo ``period``, unwrapped to the first."""
    x = np.asarray(x)
    ref = np.take(x, [0], axis=axis)
    d = (x - ref + period / 2) % period - period / 2
    m = ref.squeeze(axis) + d.mean(axis=axis)
    return (m + period / 2) % period - period / 2


def _dtft(w, x):
    """sum_n w[..., n] e^{j 2 pi n x[...]} with x in cycles per subcarrier."""
    n = np.arange(w.shape[-1])
    return np.sum(w * np.exp(2j * np.pi * x[..., None] * n), axis=-1)


def coarse_estimate(csi: CsiTensor, n_pairs: int = 4, oversample: int = 8,
                    interp_iters: int = 3) -> SyncEstimate:
    """Per-snapshot single-tone search on the unit-modulus conjugate product."""
    y = csi.values
    N, K, M = y.shape
    if K < 2:
        raise ValueError("need at least two snapshots")
    if not 1 <= n_pairs <= M:
        raise ValueError(f"n_pairs must be in [1, {M}]")
    y = np.moveaxis(y[:, :, :n_pairs], 0, -1)  # (K, M, N)
    prod = np.conj(y[:1]) * y[1:]
    mag = np.abs(prod)
    valid = mag > 0
    if not np.all(np.any(valid, axis=-1)):
        raise SyncError("conjugate product vanishes on every subcarrier")
    w = np.where(valid, prod / np.where(valid, mag, 1.0), 0.0)

    P = oversample * N
    spec = np.abs(np.fft.ifft(w, P, axis=-1))
    x = np.argmax(spec, axis=-1) / P  # cycles per subcarrier, = tau * df
    step = 1.0 / P
    for _ in range(interp_iters):
        f0 = np.abs(_dtft(w, x - step))
        f1 = np.abs(_dtft(w, x))
        f2 = np.abs(_dtft(w, x + step))
        den = f0 - 2 * f1 + f2
        with np.errstate(invalid="ignore", divide="ignore"):
            off = np.where(den < 0, 0.5 * (f0 - f2) / den, 0.0)
        x = x + np.clip(off, -1, 1) * step
        step /= 4
    peak = _dtft(w, x)
    x = (x + 0.5) % 1.0 - 0.5

    rtmo = np.zeros(K)
    rcfo = np.zeros(K)
    rtmo[1:] = _wrapped_mean(x, 1.0, axis=1) / csi.waveform.delta_f
    rcfo[1:] = _circular_mean(np.angle(peak), axis=1)
    return SyncEstimate(rtmo, rcfo, "coarse")


def compensate(csi: CsiTensor, estimate: SyncEstimate) -> CsiTensor:
    """Remove estimated relative offsets: y * e^{-j f_k} e^{j 2 pi n tau_k df}."""
    N, K, _ = csi.values.shape
    if estimate.rtmo.size != K:
        raise ValueError("estimate length does not match the number of snapshots")
    n = np.arange(N)
    frac = estimate.rtmo * csi.waveform.delta_f
    rot = np.exp(-1j * estimate.rcfo)[None, :] * np.exp(2j * np.pi * np.outer(n, frac))
    return CsiTensor(csi.values * rot[:, :, None], csi.waveform)


def realign(csi: CsiTensor, n_pairs: int = 4, oversample: int = 8,
            min_shift: float = 1.0) -> SyncEstimate:
    """Correct snapshots whose coarse delay landed on a wrong peak.

    Each snapshot is correlated against the sum of all other snapshots, in
    which moving-target terms average out. The correlation is combined
    non-coherently over pairs. A snapshot is moved only if the peak lies at
    least ``min_shift`` subcarrier bins from zero, i.e. outside the main
    lobe, so well-aligned snapshots are left to the Newton refinement.
    """
    y = csi.values[:, :, :n_pairs]
    N, K, _ = y.shape
    P = oversample * N
    others = y.sum(axis=1, keepdims=True) - y
    spec = np.fft.fft(np.conj(others) * y, P, axis=0)  # (P, K, pairs)
    p = np.argmax(np.sum(np.abs(spec) ** 2, axis=2), axis=0)
    shift = (p / P + 0.5) % 1.0 - 0.5  # cycles per subcarrier
    move = np.abs(shift) * N >= min_shift
    move[0] = False
    peak = spec[p, np.arange(K), :].sum(axis=1)
    rtmo = np.where(move, -shift / csi.waveform.delta_f, 0.0)
    rcfo = np.where(move, np.angle(peak), 0.0)
    return SyncEstimate(rtmo, rcfo, "coarse")


@dataclass(frozen=True)
class CostTerms:
    value: float
    grad_c: np.ndarray
    grad_kappa: np.ndarray
    hess_c: np.ndarray
    hess_kappa: np.ndarray


def refined_cost(y: np.ndarray, c: np.ndarray, kappa: np.ndarray, derivatives: bool = True,
                 center: float = 0.0):
    """Coherent energy L = sum_n |sum_k e^{-j(c_k - (n - center) kappa_k)} y[n, k]|^2.

    ``y`` is one antenna pair, shape (N, K). Derivatives are with respect to
    the full vectors c and kappa; element 0 is held fixed by the caller. A
    nonzero ``center`` only moves the phase reference along the subcarriers.
    """
    N = y.shape[0]
    n = np.arange(N)[:, None] - center
    z = y * np.exp(-1j * (c[None, :] - n * kappa[None, :]))
    S = z.sum(axis=1)
    value = float(np.sum(np.abs(S) ** 2))
    if not derivatives:
        return value
    cross = np.conj(S)[:, None] * z  # conj(S_n) z_nk
    grad_c = 2 * np.sum(cross.imag, axis=0)
    grad_kappa = -2 * np.sum(n * cross.imag, axis=0)
    G = np.real(z.T @ np.conj(z))  # G[k, l] = Re sum_n z_nk conj(z_nl)
    hess_c = 2 * (G - np.diag(np.sum(cross.real, axis=0)))
    zn = n * z
    Gn = np.real(zn.T @ np.conj(zn))
    hess_kappa = 2 * (Gn - np.diag(np.sum(n**2 * cross.real, axis=0)))
    return CostTerms(value, grad_c, grad_kappa, hess_c, hess_kappa)


def _real_gram(z):
    """Re(z^T conj(z)) as one real symmetric product."""
    X = np.concatenate([z.real, z.imag])
    return X.T @ X


def _block_terms(z, n, block):
    """Value, gradient and Hessian of L in one block at rotated data ``z``."""
    S = z.sum(axis=1)
    cross = np.conj(S)[:, None] * z
    if block == "c":
        grad = 2 * np.sum(cross.imag, axis=0)
        hess = 2 * (_real_gram(z) - np.diag(np.sum(cross.real, axis=0)))
    else:
        grad = -2 * np.sum(n * cross.imag, axis=0)
        hess = 2 * (_real_gram(n * z) - np.diag(np.sum(n**2 * cross.real, axis=0)))
    return float(np.sum(np.abs(S) ** 2)), grad[1:], hess[1:, 1:]


def _ascent_step(grad, hess, rotate, current, radius=np.inf):
    """Newton ascent step, Levenberg-damped until the cost does not drop.

    ``rotate(step)`` returns the rotated data and its cost for a candidate.
    Steps longer than ``radius`` (infinity norm) are damped further so the
    iterate cannot jump across a sidelobe of the cost.
    """
    A = -hess
    mu = 0.0
    scale = max(np.max(np.abs(np.diag(A)), initial=0.0), 1e-300)
    eye = np.eye(A.shape[0])
    for _ in range(60):
        try:
            step = cho_solve(cho_factor(A + mu * eye), grad)
            if np.max(np.abs(step), initial=0.0) <= radius:
                z, value = rotate(step)
                # tolerate roundoff-level changes near the optimum
                if value >= current - 1e-13 * abs(current):
                    return step, z, value
        except LinAlgError:
            pass
        mu = scale * 1e-8 if mu == 0 else mu * 10
    return np.zeros_like(grad), None, current


def _cost_of(z):
    return float(np.sum(np.abs(z.sum(axis=1)) ** 2))


def _refine_pair(y, max_iters, tol):
    # Alternating updates converge slowly when c and kappa are coupled through
    # the mean subcarrier index, so iterate with the phase referenced to the
    # band centre and map back to subcarrier 0 at the end.
    N, K = y.shape
    mid = (N - 1) / 2
    n = np.arange(N)[:, None] - mid
    c = np.zeros(K)
    kappa = np.zeros(K)
    z = y.copy()
    history = [_cost_of(z)]
    converged, it = False, 0

    def rot_c(step):
        zz = z * np.exp(-1j * np.r_[0.0, step])[None, :]
        return zz, _cost_of(zz)

    def rot_k(step):
        zz = z * np.exp(1j * n * np.r_[0.0, step][None, :])
        return zz, _cost_of(zz)

    for it in range(max_iters):
        value, grad, hess = _block_terms(z, n, "c")
        dc, zc, value = _ascent_step(grad, hess, rot_c, value, np.pi / 4)
        if zc is not None:
            z = zc
        c[1:] += dc
        value, grad, hess = _block_terms(z, n, "kappa")
        dk, zk, value = _ascent_step(grad, hess, rot_k, value, np.pi / N)
        if zk is not None:
            z = zk
        kappa[1:] += dk
        history.append(value)
        if max(np.max(np.abs(dc), initial=0), np.max(np.abs(dk), initial=0)) < tol:
            converged = True
            break
    return c + mid * kappa, kappa, (it if converged else max_iters), converged, history


def refine_estimate(csi: CsiTensor, n_pairs: int = 4, max_iters: int = 50,
                    tol: float = 1e-10) -> SyncEstimate:
    """Residual offsets after coarse compensation, by alternating Newton ascent.

    Returns the residual correction; add it to the coarse estimate (or apply
    ``compensate`` twice) for the total. ``iterations_used`` is the largest
    count over the antenna pairs; non-convergence is flagged, not raised.
    """
    y = csi.values
    K = y.shape[1]
    if not 1 <= n_pairs <= y.shape[2]:
        raise ValueError(f"n_pairs must be in [1, {y.shape[2]}]")
    cs, ks, iters, ok = [], [], 0, True
    for m in range(n_pairs):
        c, kappa, it, conv, _ = _refine_pair(y[:, :, m], max_iters, tol)
        cs.append(c)
        ks.append(kappa)
        iters = max(iters, it)
        ok = ok and conv
    c = _circular_mean(np.array(cs), axis=0)
    kappa = np.mean(ks, axis=0)
    c[0] = 0.0
    kappa[0] = 0.0
    rtmo = kappa / (2 * np.pi * csi.waveform.delta_f)
    return SyncEstimate(rtmo, c, "refined", iters, ok)


def run_sync(csi: CsiTensor, n_pairs: int = 4, refine: bool = True,
             cancel_dynamic: int = 0, cancel_rounds: int = 2, **kwargs):
    """Coarse then refined estimation; returns (coarse, total, compensated).

    With ``cancel_dynamic`` > 0 that many dynamic paths are fitted on the
    compensated pairs and subtracted before each refinement pass, so the
    residual offsets are estimated without their interference. Each of the
    ``cancel_rounds`` rounds refits the paths in the improved frame. Before
    refinement, snapshots whose coarse delay is off by a bin or more are
    moved by ``realign``.
    """
    from .estimate.dynamic import dynamic_component

    coarse = coarse_estimate(csi, n_pairs)
    out = compensate(csi, coarse)
    total = coarse
    if not refine:
        return coarse, total, out
    fix = realign(out, n_pairs)
    if np.any(fix.rtmo):
        out = compensate(out, fix)
        total = total + fix
    rounds = cancel_rounds if cancel_dynamic else 0
    fit = None
    for _ in range(rounds):
        y = out.values[:, :, :n_pairs]
        component, fit = dynamic_component(y, cancel_dynamic, start=fit)
        if fit is None:
            break
        extra = refine_estimate(CsiTensor(y - component, csi.waveform), n_pairs, **kwargs)
        out = compensate(out, extra)
        total = total + extra
    if fit is None:
        fine = refine_estimate(out, n_pairs, **kwargs)
        out = compensate(out, fine)
        total = total + fine
    return coarse, total, out


# ---------------------------------------------------------------- oracles

@dataclass(frozen=True)
class TheoreticalErrorPrediction:
    """Standard deviations of the refined errors; rtmo in kappa units (rad/subcarrier)."""

    rcfo_error_std: float
    rtmo_error_std: float

    def rtmo_seconds(self, delta_f: float) -> float:
        return self.rtmo_error_std / (2 * np.pi * delta_f)

    def rtmo_meters(self, delta_f: float, c: float = 3e8) -> float:
        return c * self.rtmo_seconds(delta_f)


def _static_power_terms(h_static):
    h = np.asarray(h_static)
    if h.ndim == 1:
        h = h[:, None]
    n = np.arange(h.shape[0])[:, None]
    p0 = np.sum(np.abs(h) ** 2, axis=0)
    p2 = np.sum(n**2 * np.abs(h) ** 2, axis=0)
    if np.any(p0 <= 0):
        raise ValueError("static power is zero; the estimator is undefined")
    return h, n, p0, p2


def predict_error(h_static, sigma_n_sq: float) -> TheoreticalErrorPrediction:
    """Closed-form refined-stage error: var c = s2/sum|h|^2, var kappa = s2/sum n^2|h|^2.

    ``h_static`` is (N,) or (N, M); with several pairs the per-pair variances
    are averaged.
    """
    _, _, p0, p2 = _static_power_terms(h_static)
    return TheoreticalErrorPrediction(float(np.sqrt(np.mean(sigma_n_sq / p0))),
                                      float(np.sqrt(np.mean(sigma_n_sq / p2))))


def predict_error_joint(h_static, sigma_n_sq: float) -> TheoreticalErrorPrediction:
    """First-order error of the joint fit including the reference snapshot noise.

    The per-snapshot errors are a weighted regression of (noise_k - noise_0)
    phases on [1, -n] with weights |h_n|^2; the mean over M pairs divides the
    variance by M. Reduces to the closed form above only approximately.
    """
    _, n, p0, _ = _static_power_terms(h_static)
    h = np.asarray(h_static).reshape(len(n), -1)
    w = np.abs(h) ** 2
    nbar = np.sum(n * w, axis=0) / p0
    sxx = np.sum((n - nbar) ** 2 * w, axis=0)
    # factor 2 from differencing against snapshot 0
    var_c = 2 * (sigma_n_sq / 2) * (1 / p0 + nbar**2 / sxx)
    var_k = 2 * (sigma_n_sq / 2) * (1 / sxx)
    M = h.shape[1]
    return TheoreticalErrorPrediction(float(np.sqrt(np.sum(var_c) / M**2)),
                                      float(np.sqrt(np.sum(var_k) / M**2)))


def first_order_bias(h_static, noise_ref, noise_k):
    """Small-noise error of one snapshot given noise realizations.

    ``noise_ref`` and ``noise_k`` are length-N noise vectors for snapshot 0
    and snapshot k (offset-free frame). The reference term is the one kept
    when the snapshot-0 noise is folded into the static sum. Returns
    (delta_c, delta_kappa) from the phase of (h + z_k) relative to (h + z_0),
    linearized and fitted by the same weighted regression.
    """
    h = np.asarray(h_static)
    n = np.arange(h.size)
    w = np.abs(h) ** 2
    diff = np.asarray(noise_k) - np.asarray(noise_ref)
    eps = np.imag(diff * np.conj(h)) / np.where(w > 0, w, 1)
    X = np.stack([np.ones_like(n, dtype=float), -n.astype(float)], axis=1)
    WX = X * w[:, None]
    coef = np.linalg.solve(X.T @ WX, WX.T @ eps)
    return float(coef[0]), float(coef[1])


def influence_ratio(static_peak: float, p_s: float, N: int, K: int) -> float:
    """Ratio of the compensation-induced map error to the noise level.

    ``static_peak`` is max over tau of |(1/N) sum_n h_n e^{j 2 pi n tau df}|
    and ``p_s`` the static power per subcarrier.
    """
    if static_peak < 0 or p_s <= 0:
        raise ValueError("need a non-negative peak and positive static power")
    return float(np.sqrt(7.0 / (N * K)) * static_peak / (2 * np.sqrt(p_s)))


def static_spectrum_peak(h_static, oversample: int = 16) -> float:
    """max over delay of |(1/N) sum_n h_n e^{j 2 pi n x}| on a fine FFT grid."""
    h = np.asarray(h_static)
    if h.ndim == 1:
        h = h[:, None]
    N = h.shape[0]
    spec = np.abs(np.fft.ifft(h, oversample * N, axis=0)) * oversample
    return float(np.max(spec))
