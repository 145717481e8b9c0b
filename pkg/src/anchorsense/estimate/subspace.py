"""Signal-subspace estimation with automatic model order."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize


class RankDeficientCovariance(ValueError):
    """Too few smoothing snapshots for the number of sources present."""


@lru_cache(maxsize=64)
def mp_median(ratio: float) -> float:
    """Median of the Marchenko-Pastur law (unit variance) for aspect ratio <= 1."""
    lo, hi = (1 - np.sqrt(ratio)) ** 2, (1 + np.sqrt(ratio)) ** 2

    def pdf(x):
        return np.sqrt(max((hi - x) * (x - lo), 0.0)) / (2 * np.pi * ratio * x)

    def cdf(t):
        return integrate.quad(pdf, lo, t, limit=200)[0]

    return optimize.brentq(lambda t: cdf(t) - 0.5, lo, hi, xtol=1e-10)


@dataclass(frozen=True)
class Subspace:
    basis: np.ndarray  # orthonormal columns spanning the signal subspace
    n_sources: int
    noise_var: float  # per-element noise variance used for the order decision
    singular_values: np.ndarray

    def residual(self, a: np.ndarray) -> np.ndarray:
        """Noise-subspace component a - E E^H a, computed without cancellation."""
        E = self.basis
        return a - E @ (E.conj().T @ a)


def signal_subspace(Z: np.ndarray, noise_var: float | None = None,
                    n_sources: int | None = None, margin: float = 1.5,
                    rel_tol: float = 1e-9) -> Subspace:
    """Signal subspace of a data matrix with snapshots in columns.

    The order is the number of singular values above the largest one that
    white noise of variance ``noise_var`` would produce (with ``margin``), and
    above ``rel_tol`` times the largest singular value. Without ``noise_var``
    the level is estimated from the median eigenvalue.
    """
    D, S = Z.shape
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    short, long_ = min(D, S), max(D, S)
    if noise_var is None:
        ratio = short / long_
        noise_var = float(np.median(s**2) / long_ / mp_median(ratio))
    if n_sources is None:
        edge = noise_var * (np.sqrt(D) + np.sqrt(S)) ** 2 * margin
        keep = (s**2 > edge) & (s > rel_tol * s[0])
        n_sources = int(np.sum(keep))
    if n_sources >= short:
        raise RankDeficientCovariance(
            f"{n_sources} sources need at least {n_sources + 1} smoothing snapshots "
            f"and dimensions, have {S} snapshots of length {D}")
    return Subspace(U[:, :n_sources], n_sources, noise_var, s)
