"""Continuous-time extended Kalman filter for leak position and size.

The filter runs on the pipe model extended with constant leak states,
``[Q_1, H_2, Q_2, dz_1, sigma_1]`` for one leak (two-leak variant:
``[Q_1, H_2, Q_2, H_3, Q_3, dz_1, sigma_1, dz_2, sigma_2]``), driven by the
end heads and observing the end flows. The covariance follows the
alpha-shifted Riccati equation

    P' = (A + alpha I) P + P (A + alpha I)^T - P C^T R^-1 C P + W
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ContractError, DomainError, FilterDivergenceError
from .hydraulics import PipelineParams, derive_coefficients, extended_jacobian, extended_rhs
from .simulator import TimeSeries

log = logging.getLogger(__name__)

POSITION_BOUNDS = (0.01, 0.99)
SIGMA_MAX = 1e-2


def _check_sym(name, M, strict):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise DomainError(f"{name} must be a symmetric square matrix")
    ev = np.linalg.eigvalsh(M)
    if strict and ev[0] <= 0:
        raise DomainError(f"{name} must be positive definite")
    if not strict and ev[0] < -1e-14 * max(1.0, abs(ev[-1])):
        raise DomainError(f"{name} must be positive semidefinite")
    return M


@dataclass
class EkfTuning:
    alpha: float
    W: np.ndarray
    R: np.ndarray
    P0: np.ndarray

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError("alpha must be > 0")
        self.W = _check_sym("W", self.W, strict=False)
        self.R = _check_sym("R", self.R, strict=True)
        self.P0 = _check_sym("P0", self.P0, strict=True)
        if self.W.shape != self.P0.shape:
            raise ContractError("W and P0 must have the same size")


def state_scales(params: PipelineParams, n_leaks: int) -> np.ndarray:
    """Typical magnitudes: flows 1e-2 m^3/s, heads 10 m, sections L, coefficients 1e-3."""
    nh = 2 * n_leaks + 1
    s = np.empty(nh + 2 * n_leaks)
    s[0:nh:2] = 1e-2
    s[1:nh:2] = 10.0
    s[nh::2] = params.L
    s[nh + 1 :: 2] = 1e-3
    return s


def default_tuning(params: PipelineParams, n_leaks: int = 1, alpha: float = 0.3,
                   meas_std: float = 1e-5) -> EkfTuning:
    nh = 2 * n_leaks + 1
    scale = state_scales(params, n_leaks)
    P0 = np.diag(1e-4 * scale**2)
    w = np.full(scale.size, 1e-8)
    w[nh:] = 1e-6
    W = np.diag(w)
    return EkfTuning(alpha=alpha, W=W, R=np.eye(2) * meas_std**2, P0=P0)


def kalman_gain(P, C, R):
    """``K = P C^T R^-1``."""
    return np.asarray(P) @ np.asarray(C).T @ np.linalg.inv(np.atleast_2d(R))


def riccati_rhs(P, A, C, R, W, alpha):
    """Right-hand side of the alpha-shifted Riccati equation."""
    P = np.atleast_2d(P)
    As = np.atleast_2d(A) + alpha * np.eye(P.shape[0])
    K = kalman_gain(P, np.atleast_2d(C), R)
    return As @ P + P @ As.T - K @ np.atleast_2d(C) @ P + np.atleast_2d(W)


class ExtendedLeakModel:
    """Extended pipe model seen by the filter; outputs are ``(Q_in, Q_out)``."""

    def __init__(self, params: PipelineParams, n_leaks: int = 1, fd_jacobian: bool = False):
        if n_leaks not in (1, 2):
            raise DomainError("the filter supports one or two leaks")
        self.params = params
        self.n_leaks = n_leaks
        self.fd_jacobian = fd_jacobian
        self.n_hyd = 2 * n_leaks + 1
        self.dim = self.n_hyd + 2 * n_leaks
        self.C = np.zeros((2, self.dim))
        self.C[0, 0] = 1.0
        self.C[1, self.n_hyd - 1] = 1.0

    def f(self, x, u):
        return extended_rhs(self.params, self.n_leaks, x, u)

    def h(self, x):
        return self.C @ x

    def jacobian(self, x, u):
        if not self.fd_jacobian:
            return extended_jacobian(self.params, self.n_leaks, x, u)
        J = np.empty((self.dim, self.dim))
        for j in range(self.dim):
            step = 1e-7 * max(abs(x[j]), 1e-3)
            e = np.zeros(self.dim)
            e[j] = step
            J[:, j] = (self.f(x + e, u) - self.f(x - e, u)) / (2 * step)
        return J

    def project(self, x):
        """Clamp leak states into the admissible box; returns (x, clamped?)."""
        x = np.array(x, dtype=float)
        hit = _kernels._project(x, self.n_leaks, self.params.L, POSITION_BOUNDS[0], POSITION_BOUNDS[1], SIGMA_MAX)
        return x, bool(hit)


@dataclass
class EkfState:
    x_hat: np.ndarray
    P: np.ndarray
    t: float = 0.0


def ekf_rhs(state: EkfState, u, y, tuning: EkfTuning, model):
    """Time derivatives ``(x_hat', P')`` of the continuous filter.

    ``model`` supplies ``f(x, u)``, ``jacobian(x, u)`` and an output matrix
    ``C``; Jacobians are evaluated at the current estimate.
    """
    P = np.asarray(state.P, dtype=float)
    if np.linalg.eigvalsh(0.5 * (P + P.T))[0] <= 0:
        raise FilterDivergenceError(f"covariance lost positive definiteness at t = {state.t:g} s", state.t)
    x = np.asarray(state.x_hat, dtype=float)
    C = model.C
    K = kalman_gain(P, C, tuning.R)
    dx = model.f(x, u) + K @ (np.asarray(y, dtype=float) - C @ x)
    dP = riccati_rhs(P, model.jacobian(x, u), C, tuning.R, tuning.W, tuning.alpha)
    return dx, dP


@dataclass
class EstimateTrajectory:
    t: np.ndarray
    x_hat: np.ndarray
    P_diag: np.ndarray
    innovations: np.ndarray
    innovation_var: np.ndarray
    projected: np.ndarray
    n_leaks: int
    L: float

    @property
    def positions(self) -> np.ndarray:
        """Leak positions along the pipe over time (cumulative section lengths)."""
        nh = 2 * self.n_leaks + 1
        return np.cumsum(self.x_hat[:, nh::2], axis=1)

    @property
    def sigmas(self) -> np.ndarray:
        nh = 2 * self.n_leaks + 1
        return self.x_hat[:, nh + 1 :: 2]

    def _tail(self, arr, frac=0.1):
        n = max(1, int(math.ceil(frac * arr.shape[0])))
        return arr[-n:].mean(axis=0)

    @property
    def final_positions(self) -> np.ndarray:
        return self._tail(self.positions)

    @property
    def final_sigmas(self) -> np.ndarray:
        return self._tail(self.sigmas)

    @property
    def projection_fraction(self) -> float:
        return float(self.projected.mean())

    def innovation_stats(self, R=None):
        """Mean, std and lag-1 autocorrelation of the normalised innovations per channel."""
        var = self.innovation_var.copy()
        if R is not None:
            var = var + np.diag(np.atleast_2d(R))[None, :]
        z = self.innovations / np.sqrt(np.maximum(var, 1e-300))
        out = []
        for c in range(z.shape[1]):
            zc = z[:, c] - z[:, c].mean()
            denom = float(zc @ zc)
            rho = float(zc[1:] @ zc[:-1]) / denom if denom > 0 else 0.0
            out.append({"mean": float(z[:, c].mean()), "std": float(z[:, c].std()), "lag1": rho})
        return out


def default_substeps(params: PipelineParams, dt: float) -> int:
    """Substeps keeping RK4 stable down to the smallest admissible section."""
    h = 0.5 * POSITION_BOUNDS[0] * params.L / params.b
    return max(1, math.ceil(dt / h - 1e-12))


def initial_estimate(params, measurements: TimeSeries, positions, n_leaks=1):
    """Hydraulic states from the first sample, leak sizes split from the flow imbalance."""
    positions = np.atleast_1d(np.asarray(positions, dtype=float))
    if positions.size != n_leaks:
        raise ContractError(f"need {n_leaks} initial position(s)")
    h_in, h_out, q_in, q_out = (float(measurements[c][0]) for c in ("H_in", "H_out", "Q_in", "Q_out"))
    nh = 2 * n_leaks + 1
    x = np.empty(nh + 2 * n_leaks)
    flows = np.linspace(q_in, q_out, n_leaks + 1)
    x[0:nh:2] = flows
    heads = h_in + (h_out - h_in) * positions / params.L
    x[1:nh:2] = heads
    dz = np.diff(np.concatenate(([0.0], positions)))
    r1 = max(q_in - q_out, 0.0)
    x[nh::2] = dz
    x[nh + 1 :: 2] = r1 / n_leaks / np.sqrt(np.maximum(heads, 1e-6))
    return x


def run_ekf(measurements: TimeSeries, x0_hat, tuning: EkfTuning, params: PipelineParams,
            n_leaks: int = 1, substeps=None, engine: str = "compiled") -> EstimateTrajectory:
    """Filter a record holding ``H_in, H_out`` (inputs) and ``Q_in, Q_out`` (measurements).

    ``engine="python"`` runs the reference implementation (finite-difference
    Jacobians available through ``ExtendedLeakModel``) and is meant for short
    cross-checks only.
    """
    u = measurements.columns(["H_in", "H_out"])
    y = measurements.columns(["Q_in", "Q_out"])
    model = ExtendedLeakModel(params, n_leaks, fd_jacobian=(engine == "python-fd"))
    x0 = np.asarray(x0_hat, dtype=float)
    if x0.shape != (model.dim,):
        raise ContractError(f"initial estimate must have {model.dim} entries")
    if tuning.P0.shape != (model.dim, model.dim):
        raise ContractError("tuning matrices do not match the extended state size")
    nh = model.n_hyd
    if np.any(x0[nh::2] <= 0) or x0[nh::2].sum() >= params.L:
        raise DomainError("initial leak position outside the pipe")
    dt = measurements.dt
    if substeps is None:
        substeps = default_substeps(params, dt)
    if engine == "compiled":
        c = derive_coefficients(params)
        xs, pd, innov, svar, proj, fail = _kernels.run_ekf_loop(
            x0.copy(), tuning.P0.copy(), n_leaks, params.L, c.a1, c.a2, c.mu,
            np.ascontiguousarray(u), np.ascontiguousarray(y), dt, int(substeps), tuning.alpha,
            tuning.W, np.linalg.inv(tuning.R), POSITION_BOUNDS[0], POSITION_BOUNDS[1], SIGMA_MAX,
        )
        if fail >= 0:
            raise FilterDivergenceError(f"filter diverged at t = {fail * dt:g} s", fail * dt)
    elif engine in ("python", "python-fd"):
        xs, pd, innov, svar, proj = _run_python(model, x0, tuning, u, y, dt, substeps)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    traj = EstimateTrajectory(measurements.t[: xs.shape[0]], xs, pd, innov, svar, proj, n_leaks, params.L)
    if traj.projection_fraction > 0.1:
        msg = f"leak states were clamped on {100 * traj.projection_fraction:.0f}% of steps; estimate may not have converged"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return traj


def _run_python(model, x0, tuning, u, y, dt, substeps):
    N = u.shape[0]
    n = model.dim
    nh = model.n_hyd
    xs = np.empty((N, n))
    pd = np.empty((N, n))
    innov = np.empty((N, 2))
    svar = np.empty((N, 2))
    proj = np.zeros(N, dtype=bool)
    x, P = x0.copy(), tuning.P0.copy()
    h = dt / substeps

    def deriv(x, P, uu, yy, t):
        xc, _ = model.project(x)
        return ekf_rhs(EkfState(xc, P, t), uu, yy, tuning, model)

    for k in range(N):
        xs[k], pd[k] = x, np.diag(P)
        innov[k] = y[k] - model.C @ x
        svar[k] = [P[0, 0], P[nh - 1, nh - 1]]
        if k == N - 1:
            break
        for j in range(substeps):
            w = np.array([j, j + 0.5, j + 1.0]) / substeps
            us = [u[k] + wi * (u[k + 1] - u[k]) for wi in w]
            ys = [y[k] + wi * (y[k + 1] - y[k]) for wi in w]
            t = (k + w[0]) * dt
            d1 = deriv(x, P, us[0], ys[0], t)
            d2 = deriv(x + 0.5 * h * d1[0], P + 0.5 * h * d1[1], us[1], ys[1], t)
            d3 = deriv(x + 0.5 * h * d2[0], P + 0.5 * h * d2[1], us[1], ys[1], t)
            d4 = deriv(x + h * d3[0], P + h * d3[1], us[2], ys[2], t)
            x = x + h / 6 * (d1[0] + 2 * d2[0] + 2 * d3[0] + d4[0])
            P = P + h / 6 * (d1[1] + 2 * d2[1] + 2 * d3[1] + d4[1])
            P = 0.5 * (P + P.T)
            x, hit = model.project(x)
            proj[k + 1] |= hit
        if not np.all(np.isfinite(x)) or np.linalg.eigvalsh(P)[0] <= 0:
            raise FilterDivergenceError(f"filter diverged at t = {(k + 1) * dt:g} s", (k + 1) * dt)
    return xs, pd, innov, svar, proj
