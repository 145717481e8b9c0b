"""UE and dynamic-target localization from anchor-point measurements.

The unknown vector is ``[p_x, p_y, rho, d_0, ..., d_{La-1}]`` with ``d_a`` the
UE-to-anchor range. Residuals are model minus measurement:

* range differences ``(d_a + r_a) - (d_0 + r_0) - (R_a - R_0)`` for a >= 1,
  where ``r_a`` is the known anchor-to-BS range and ``R_a`` the measured
  relative range (the common clock bias cancels);
* per anchor, the two UE coordinates implied by the anchor geometry minus
  ``(p_x, p_y)``, interleaved as (x, y) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .scene import C, Position2D, wrap_angle

COND_LIMIT = 1e12


class CollinearGeometry(ValueError):
    """The UE and all anchors lie on one line, so H^T H is singular."""

    def __init__(self, cond: float):
        super().__init__(
            f"UE and anchors are (nearly) collinear: cond(H^T H) = {cond:.3g}; "
            "the anchor AODs coincide and the position is unobservable")
        self.cond = cond


@dataclass(frozen=True)
class AnchorGeometry:
    """Known anchor layout relative to the BS."""

    positions: np.ndarray  # (La, 2)
    bs_position: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "bs_position", np.asarray(self.bs_position, dtype=float))
        if pos.shape[0] < 2:
            raise ValueError("at least two anchors are needed")

    @classmethod
    def from_points(cls, anchors, bs=(0.0, 0.0)) -> "AnchorGeometry":
        pts = [a.as_array() if hasattr(a, "as_array") else
               a.position.as_array() if hasattr(a, "position") else np.asarray(a, float)
               for a in anchors]
        bs = bs.as_array() if hasattr(bs, "as_array") else np.asarray(bs, float)
        return cls(np.array(pts), bs)

    @property
    def n_anchors(self) -> int:
        return self.positions.shape[0]

    @property
    def bs_ranges(self) -> np.ndarray:
        """d^{(r,a)}: anchor-to-BS distances."""
        return np.linalg.norm(self.positions - self.bs_position, axis=1)

    @property
    def aoas(self) -> np.ndarray:
        """Anchor AOAs at the BS, measured from +y towards +x."""
        d = self.positions - self.bs_position
        return np.arctan2(d[:, 0], d[:, 1])


@dataclass(frozen=True)
class ResidualSystem:
    g: np.ndarray  # (3La - 1,)
    H: np.ndarray  # (3La - 1, La + 3)


def _unpack(varsigma):
    v = np.asarray(varsigma, dtype=float)
    return v[0], v[1], v[2], v[3:]


def build_residuals(varsigma, ranges, aods, geometry: AnchorGeometry,
                    range_period: float | None = None) -> ResidualSystem:
    """Residual vector and its analytic Jacobian at ``varsigma``."""
    px, py, rho, dt = _unpack(varsigma)
    ranges = np.asarray(ranges, dtype=float)
    aods = np.asarray(aods, dtype=float)
    La = geometry.n_anchors
    if ranges.size != La or aods.size != La or dt.size != La:
        raise ValueError("measurement and unknown sizes must match the anchor count")
    dr, theta = geometry.bs_ranges, geometry.aoas
    bistatic = dt + dr
    meas_diff = ranges[1:] - ranges[0]
    if range_period is not None:
        meas_diff = (meas_diff + range_period / 2) % range_period - range_period / 2
    gR = (bistatic[1:] - bistatic[0]) - meas_diff
    s, c = np.sin(rho - aods), np.cos(rho - aods)
    gx = c * dt + np.sin(theta) * dr - px
    gy = s * dt + np.cos(theta) * dr - py
    g = np.concatenate([gR, np.column_stack([gx, gy]).ravel()])

    H = np.zeros((3 * La - 1, La + 3))
    H[:La - 1, 3] = -1.0
    H[np.arange(La - 1), 4 + np.arange(La - 1)] = 1.0
    rows = La - 1 + 2 * np.arange(La)
    H[rows, 0] = -1.0
    H[rows + 1, 1] = -1.0
    H[rows, 2] = -s * dt
    H[rows + 1, 2] = c * dt
    H[rows, 3 + np.arange(La)] = c
    H[rows + 1, 3 + np.arange(La)] = s
    return ResidualSystem(g, H)


def measurement_jacobian(varsigma, aods, geometry: AnchorGeometry) -> np.ndarray:
    """dg/de for e = [R_0..R_{La-1}, phi_0..phi_{La-1}]."""
    _, _, rho, dt = _unpack(varsigma)
    aods = np.asarray(aods, dtype=float)
    La = geometry.n_anchors
    G = np.zeros((3 * La - 1, 2 * La))
    G[:La - 1, 0] = 1.0
    G[np.arange(La - 1), 1 + np.arange(La - 1)] = -1.0
    rows = La - 1 + 2 * np.arange(La)
    G[rows, La + np.arange(La)] = np.sin(rho - aods) * dt
    G[rows + 1, La + np.arange(La)] = -np.cos(rho - aods) * dt
    return G


def normal_condition(H: np.ndarray) -> float:
    """cond(H^T H), infinite when H is rank deficient."""
    sv = np.linalg.svd(H, compute_uv=False)
    if sv[-1] <= sv[0] * np.finfo(float).eps:
        return float("inf")
    return float((sv[0] / sv[-1]) ** 2)


def _pinv_step(H: np.ndarray, g: np.ndarray):
    """Least-norm solution of H x = g via pivoted QR; returns (x, rank)."""
    Q, R, piv = linalg.qr(H, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > diag[0] * max(H.shape) * np.finfo(float).eps)) if diag.size else 0
    if rank == H.shape[1]:
        x = np.empty(H.shape[1])
        x[piv] = linalg.solve_triangular(R, Q.T @ g)
        return x, rank
    return np.linalg.pinv(H) @ g, rank


@dataclass(frozen=True)
class LocalizationSolution:
    ue_position: Position2D
    rho_hat: float  # rad, wrapped to (-pi, pi]
    tau_o0_hat: float  # s
    anchor_ranges: np.ndarray  # d^{(t,a)}, m
    iterations: int
    converged: bool
    condition: float
    rank: int
    covariance: np.ndarray | None = None
    target_positions: tuple = ()

    @property
    def varsigma(self) -> np.ndarray:
        return np.r_[self.ue_position.x, self.ue_position.y, self.rho_hat, self.anchor_ranges]

    def to_dict(self) -> dict:
        out = {
            "ue_position": [self.ue_position.x, self.ue_position.y],
            "rho_hat": self.rho_hat,
            "c_tau_o0_hat": self.tau_o0_hat * C,
            "iterations": self.iterations,
            "converged": self.converged,
            "condition": self.condition,
            "target_positions": [None if p is None else [p.x, p.y] for p in self.target_positions],
        }
        if self.covariance is not None:
            out["covariance_diag"] = np.diag(self.covariance).tolist()
        return out


def _gauss_newton(x, ranges, aods, geometry, tol, max_iters, range_period):
    converged, it, rank = False, 0, 0
    for it in range(1, max_iters + 1):
        sys_ = build_residuals(x, ranges, aods, geometry, range_period)
        step, rank = _pinv_step(sys_.H, sys_.g)
        x = x - step
        if not np.all(np.isfinite(x)):
            break
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    return x, it, rank, converged


def ray_init(ranges, aods, geometry: AnchorGeometry, range_period: float | None = None,
             n_grid: int = 1440) -> np.ndarray | None:
    """Starting point from intersecting the anchor AOD rays over a grid of rho.

    For each candidate rotation the rays A_a + d_a u(rho - phi_a) are
    intersected in the least-squares sense; the candidate with all d_a > 0
    that best fits the range differences is returned (None if there is none).
    """
    P, La = geometry.positions, geometry.n_anchors
    aods = np.asarray(aods, dtype=float)
    meas = np.asarray(ranges, dtype=float)
    meas_diff = meas[1:] - meas[0]
    if range_period is not None:
        meas_diff = (meas_diff + range_period / 2) % range_period - range_period / 2
    b = P.ravel()
    best, best_cost = None, np.inf
    for rho in np.linspace(-np.pi, np.pi, n_grid, endpoint=False):
        # unknowns [px, py, d_0..]: p - d_a u_a = A_a
        A = np.zeros((2 * La, 2 + La))
        A[0::2, 0] = 1.0
        A[1::2, 1] = 1.0
        A[2 * np.arange(La), 2 + np.arange(La)] = -np.cos(rho - aods)
        A[2 * np.arange(La) + 1, 2 + np.arange(La)] = -np.sin(rho - aods)
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        d = sol[2:]
        if np.any(d <= 0):
            continue
        bistatic = d + geometry.bs_ranges
        cost = (np.sum((bistatic[1:] - bistatic[0] - meas_diff) ** 2)
                + np.sum((A @ sol - b) ** 2))
        if cost < best_cost:
            best, best_cost = np.r_[sol[:2], rho, d], cost
    return best


def solve(ranges, aods, geometry: AnchorGeometry, init=None, tol: float = 1e-10,
          max_iters: int = 100, range_period: float | None = None,
          measurement_cov=None) -> LocalizationSolution:
    """Gauss-Newton fit of the anchor constraint system.

    ``ranges`` are relative bistatic ranges (m, including c*tau_o0) and
    ``aods`` the anchor AODs in the UE array frame. The default start is
    ``[0, 0, 0, R_0, ..., R_{La-1}]``. The constraint system can also be met
    with negative anchor ranges; such a root is discarded and the fit is
    restarted from ``ray_init``. Raises CollinearGeometry when cond(H^T H)
    exceeds 1e12 at the returned iterate.
    """
    ranges = np.asarray(ranges, dtype=float)
    aods = np.asarray(aods, dtype=float)
    x0 = np.r_[0.0, 0.0, 0.0, ranges] if init is None else np.array(init, dtype=float)
    x, it, rank, converged = _gauss_newton(x0, ranges, aods, geometry, tol, max_iters,
                                           range_period)
    if np.all(np.isfinite(x)) and np.any(x[3:] <= 0):
        start = ray_init(ranges, aods, geometry, range_period)
        if start is not None:
            x2, it2, rank2, conv2 = _gauss_newton(start, ranges, aods, geometry, tol,
                                                  max_iters, range_period)
            if np.all(np.isfinite(x2)) and np.all(x2[3:] > 0):
                x, rank, converged = x2, rank2, conv2
                it += it2
    final = build_residuals(x, ranges, aods, geometry, range_period)
    cond = normal_condition(final.H)
    if not cond <= COND_LIMIT:
        raise CollinearGeometry(cond)
    x[2] = wrap_angle(x[2])
    ue = Position2D(float(x[0]), float(x[1]))
    tau = reference_tmo(ue, ranges, geometry, range_period)
    cov = None
    if measurement_cov is not None:
        cov = predict_covariance(x, aods, geometry, measurement_cov)
    return LocalizationSolution(ue, float(x[2]), tau, x[3:].copy(), it, converged, cond, rank, cov)


def reference_tmo(ue: Position2D, ranges, geometry: AnchorGeometry,
                  range_period: float | None = None) -> float:
    """Common clock bias (s) averaged over anchors."""
    bistatic = np.linalg.norm(geometry.positions - ue.as_array(), axis=1) + geometry.bs_ranges
    bias = np.asarray(ranges, dtype=float) - bistatic
    if range_period is not None:
        # average on the circle so wrapped measurements stay consistent
        ang = np.angle(np.mean(np.exp(2j * np.pi * bias / range_period)))
        return float((ang % (2 * np.pi)) * range_period / (2 * np.pi) / C)
    return float(np.mean(bias) / C)


def target_range(c_tau: float, aoa: float, ue: Position2D) -> float:
    """Target-to-BS range d solving c_tau = |d u(aoa) - p| + d, in closed form.

    Returns NaN when the measurement is inconsistent with the UE position.
    """
    p = ue.as_array()
    u = np.array([np.sin(aoa), np.cos(aoa)])
    den = 2 * (c_tau - p @ u)
    if den == 0 or not np.isfinite(den):
        return float("nan")
    d = (c_tau**2 - p @ p) / den
    # the squared relation also admits solutions with |.| = d - c_tau < 0
    if not np.isfinite(d) or d <= 0 or d > c_tau:
        return float("nan")
    return float(d)


def locate_dynamic(solution: LocalizationSolution, relative_ranges, aoas,
                   range_period: float | None = None) -> list:
    """Absolute target positions; None marks a target that cannot be located."""
    out = []
    for R, theta in zip(np.atleast_1d(relative_ranges), np.atleast_1d(aoas)):
        c_tau = float(R) - solution.tau_o0_hat * C
        if range_period is not None:
            c_tau %= range_period
        d = target_range(c_tau, float(theta), solution.ue_position)
        out.append(None if np.isnan(d) else Position2D(d * np.sin(theta), d * np.cos(theta)))
    return out


def predict_covariance(varsigma, aods, geometry: AnchorGeometry, measurement_cov) -> np.ndarray:
    """First-order covariance of the unknown vector for measurement covariance.

    ``measurement_cov`` is (2La, 2La) or the (2La,) variances of
    [R_0..R_{La-1}, phi_0..phi_{La-1}].
    """
    sys_ = build_residuals(varsigma, np.zeros(geometry.n_anchors), aods, geometry)
    Sigma = np.asarray(measurement_cov, dtype=float)
    if Sigma.ndim == 1:
        Sigma = np.diag(Sigma)
    A = np.linalg.pinv(sys_.H) @ measurement_jacobian(varsigma, aods, geometry)
    return A @ Sigma @ A.T


@dataclass(frozen=True)
class Feasibility:
    condition: float
    feasible: bool
    aods: np.ndarray


def forward_measurements(ue: Position2D, rho: float, geometry: AnchorGeometry,
                         c_tau_o0: float = 0.0):
    """Noise-free (relative ranges, AODs) the anchors would produce."""
    p = ue.as_array()
    v = p - geometry.positions  # anchor toward UE
    dt = np.linalg.norm(v, axis=1)
    ranges = c_tau_o0 + dt + geometry.bs_ranges
    aods = wrap_angle(rho - np.arctan2(v[:, 1], v[:, 0]))
    return ranges, aods, dt


def feasibility_check(ue: Position2D, rho: float, geometry: AnchorGeometry,
                      limit: float = COND_LIMIT) -> Feasibility:
    """Conditioning of the normal equations at a candidate UE pose."""
    _, aods, dt = forward_measurements(ue, rho, geometry)
    H = build_residuals(np.r_[ue.x, ue.y, rho, dt], np.zeros(dt.size), aods, geometry).H
    cond = normal_condition(H)
    return Feasibility(cond, bool(cond <= limit), aods)
