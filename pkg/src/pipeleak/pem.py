"""Off-line prediction-error identification of leak parameters.

The predictor is the linear leak model driven by measured inputs, started
from zero deviation, and the criterion is the integrated squared prediction
error. By default the predictor gain is zero (output-error form).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractError, DomainError, InfeasibleThetaError, StallError, TotalFailureError
from .hydraulics import PipelineParams, derive_coefficients
from .linear_models import (
    LinearStateSpace,
    ThetaDouble,
    ThetaSingle,
    build_single_leak,
    build_two_leak,
    positions_from_theta,
)
from .optimize import minimize_box
from .simulator import TimeSeries

CHANNELS = {
    "single": (["H_in", "H_out"], ["Q_in", "Q_out"]),
    "double": (["H_in", "Q_out"], ["Q_in", "H_out"]),
}


def default_bounds(kind: str, L: float):
    n_s = 2 if kind == "single" else 3
    pos = (1.01 / L, 10.0 * n_s / L)
    if kind == "single":
        return np.array([pos[0], 0.0]), np.array([pos[1], 1e-2])
    return (np.array([pos[0], 0.0, pos[0], 0.0, 0.0]),
            np.array([pos[1], 1e-2, pos[1], 1.0, 1e-2]))


def rk4_transition(A, B, h, substeps=1):
    """Exact one-sample map of classical RK4 for ``x' = A x + B u``.

    The input is interpolated linearly between samples, so the map is
    ``x+ = Phi x + G0 u_k + G1 u_k+1``.
    """
    n, m = B.shape
    sub = h / substeps
    I = np.eye(n)
    A2 = A @ A
    A3 = A2 @ A
    phi = I + sub * A + sub**2 / 2 * A2 + sub**3 / 6 * A3 + sub**4 / 24 * (A3 @ A)
    # input weights of one RK4 step for u at the start, midpoint and end of the step
    w_start = sub / 6 * (I + sub * A + sub**2 / 2 * A2 + sub**3 / 4 * A3) @ B
    w_mid = (sub * (2.0 / 3.0) * I + sub**2 / 3 * A + sub**3 / 12 * A2) @ B
    w_end = sub / 6 * B
    Phi = np.eye(n)
    G0 = np.zeros((n, m))
    G1 = np.zeros((n, m))
    for j in range(substeps):
        a, b = j / substeps, (j + 1) / substeps
        c = 0.5 * (a + b)
        # u(s) = (1 - s) u_k + s u_k+1 on the sample interval
        Phi, G0, G1 = (
            phi @ Phi,
            phi @ G0 + w_start * (1 - a) + w_mid * (1 - c) + w_end * (1 - b),
            phi @ G1 + w_start * a + w_mid * c + w_end * b,
        )
    return Phi, G0, G1


def default_theta0(kind: str, steady: dict, L: float) -> np.ndarray:
    """Evenly spaced leaks sharing the measured steady flow imbalance."""
    n_leaks = 1 if kind == "single" else 2
    h_in, h_out = steady["H_in"], steady["H_out"]
    q_in, q_out = steady["Q_in"], steady["Q_out"]
    share = max(q_in - q_out, 0.0) / n_leaks
    heads = [h_in + (h_out - h_in) * (j + 1) / (n_leaks + 1) for j in range(n_leaks)]
    loss = [max(share / max(h, 1e-3), 1e-6) for h in heads]
    inv_dz = (n_leaks + 1) / L
    if kind == "single":
        return np.array([inv_dz, loss[0]])
    return np.array([inv_dz, loss[0], inv_dz, q_in - share, loss[1]])


@dataclass
class PemProblem:
    """Identification data and model structure.

    ``kind`` is ``"single"`` (three-state model, inputs ``H_in, H_out``,
    outputs ``Q_in, Q_out``) or ``"double"`` (six-state model, inputs
    ``H_in, Q_out``, outputs ``Q_in, H_out``). Signals are converted to
    deviations from the pre-excitation steady level: the mean of the first
    ``steady_samples`` samples. Without ``theta0`` the start is
    :func:`default_theta0` evaluated at those levels.
    """

    data: TimeSeries
    kind: str
    params: PipelineParams
    theta0: np.ndarray | None = None
    bounds: tuple = None
    gain: np.ndarray | None = None
    steady_samples: int = 1
    output_weights: np.ndarray | None = None
    u: np.ndarray = field(init=False, repr=False)
    y: np.ndarray = field(init=False, repr=False)
    eq_flows: tuple = field(init=False)
    steady: dict = field(init=False)

    def __post_init__(self):
        if self.kind not in CHANNELS:
            raise DomainError(f"kind must be 'single' or 'double', got {self.kind!r}")
        ins, outs = CHANNELS[self.kind]
        u = self.data.columns(ins)
        y = self.data.columns(outs)
        n0 = max(1, min(int(self.steady_samples), u.shape[0]))
        ubar, ybar = u[:n0].mean(axis=0), y[:n0].mean(axis=0)
        self.u = u - ubar
        self.y = y - ybar
        self.steady = dict(zip(ins + outs, np.concatenate([ubar, ybar]).tolist()))
        self.eq_flows = (self.steady["Q_in"], self.steady["Q_out"])
        if self.theta0 is None:
            levels = {ch: float(np.mean(self.data[ch][:n0])) for ch in ("H_in", "H_out", "Q_in", "Q_out")
                      if ch in self.data.labels}
            levels.update(self.steady)
            self.theta0 = default_theta0(self.kind, levels, self.params.L)
        self.theta0 = np.asarray(self.theta0, dtype=float)
        if self.theta0.shape != ((2,) if self.kind == "single" else (5,)):
            raise ContractError("theta0 does not match the model kind")
        if self.bounds is None:
            self.bounds = default_bounds(self.kind, self.params.L)
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        self.bounds = (lo, hi)
        if np.any(self.theta0 < lo) or np.any(self.theta0 > hi):
            raise DomainError("theta0 lies outside the bounds")
        if self.gain is not None:
            self.gain = np.asarray(self.gain, dtype=float)

    @property
    def dt(self):
        return self.data.dt

    @property
    def theta_scale(self):
        lo, hi = self.bounds
        return np.maximum(np.abs(self.theta0), 1e-3 * (hi - lo))

    def theta(self, values):
        return ThetaSingle(*values) if self.kind == "single" else ThetaDouble(*values)

    def build(self, values) -> LinearStateSpace:
        try:
            if self.kind == "single":
                return build_single_leak(self.theta(values), self.eq_flows, self.params)
            return build_two_leak(self.theta(values), self.eq_flows, self.params)
        except DomainError as exc:
            raise InfeasibleThetaError(str(exc)) from exc

    def leak_heads(self, values):
        """Steady heads at the leak sites implied by the momentum balance."""
        c = derive_coefficients(self.params)
        th = np.asarray(values, dtype=float)
        h_in = self.steady["H_in"]
        q1 = self.steady["Q_in"]
        h2 = h_in - c.mu * q1 * abs(q1) / c.a1 / th[0]
        if self.kind == "single":
            return (h2,)
        q2 = th[3]
        return (h2, h2 - c.mu * q2 * abs(q2) / c.a1 / th[2])


def prediction_error(theta, problem: PemProblem) -> TimeSeries:
    """Prediction errors ``y - C xhat - D u`` of the linear predictor at ``theta``."""
    theta = np.asarray(theta, dtype=float)
    lo, hi = problem.bounds
    if np.any(theta < lo) or np.any(theta > hi):
        raise InfeasibleThetaError("theta outside the bounds")
    ss = problem.build(theta)
    A, B, C, D = ss.A, ss.B, ss.C, ss.D
    u = problem.u
    if problem.gain is not None:
        K = problem.gain
        A = A - K @ C
        B = np.hstack([B - K @ D, K])
        D = np.hstack([D, np.zeros((D.shape[0], K.shape[1]))])
        u = np.hstack([u, problem.y])
    rho = float(np.max(np.abs(np.linalg.eigvals(A))))
    substeps = max(1, math.ceil(2.0 * rho * problem.dt))
    Phi, G0, G1 = rk4_transition(A, B, problem.dt, substeps)
    e = _kernels.linear_predictor(Phi, G0, G1, C, D, np.ascontiguousarray(u), np.ascontiguousarray(problem.y))
    labels = [f"e_{name}" for name in ss.output_labels]
    return TimeSeries(problem.data.t0, problem.dt, labels, e)


def integrated_square(e: np.ndarray, dt: float, weights=None) -> float:
    """Trapezoidal ``integral ||e||^2 dt``."""
    sq = e**2
    if weights is not None:
        sq = sq * np.asarray(weights, dtype=float)[None, :]
    sq = sq.sum(axis=1)
    if sq.size < 2:
        return 0.0
    return float(dt * (sq.sum() - 0.5 * (sq[0] + sq[-1])))


def cost(theta, problem: PemProblem) -> float:
    e = prediction_error(theta, problem).data
    V = integrated_square(e, problem.dt, problem.output_weights)
    return V if math.isfinite(V) else math.inf


@dataclass
class PemResult:
    theta_hat: np.ndarray
    V: float
    V0: float
    cost_history: list
    grad_norm: float
    exit_reason: str
    n_iter: int
    theta0: np.ndarray


def _scaled_cost(problem):
    scale = problem.theta_scale

    def fun(z):
        try:
            return cost(z * scale, problem)
        except InfeasibleThetaError:
            return math.inf

    return fun, scale


def minimize(problem: PemProblem, theta0=None, max_iter=500) -> PemResult:
    """Box-constrained quasi-Newton fit of ``theta`` in scaled coordinates."""
    fun, scale = _scaled_cost(problem)
    theta0 = problem.theta0 if theta0 is None else np.asarray(theta0, dtype=float)
    lo, hi = problem.bounds
    V0 = fun(theta0 / scale)
    if not math.isfinite(V0):
        raise InfeasibleThetaError("the model cannot be built at the starting point")
    try:
        res = minimize_box(fun, theta0 / scale, lo / scale, hi / scale, max_iter=max_iter)
    except StallError as exc:
        if exc.result is None:
            raise
        res = exc.result
    return PemResult(res.x * scale, res.fun, V0, res.history, res.grad_norm, res.exit_reason, res.n_iter, theta0)


def perturbed_starts(problem: PemProblem, count: int, seed=None, spread: float = 1.0):
    """``theta0`` plus ``count - 1`` log-uniform perturbations (within ``10**spread``) that stay feasible."""
    if count < 1:
        raise DomainError("multistart count must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = problem.bounds
    base = np.maximum(problem.theta0, problem.theta_scale)
    starts = [problem.theta0.copy()]
    while len(starts) < count:
        for _ in range(1000):
            cand = np.clip(base * 10.0 ** rng.uniform(-spread, spread, size=base.size), lo, hi)
            try:
                problem.build(cand)
                break
            except InfeasibleThetaError:
                continue
        starts.append(cand)
    return starts


@dataclass
class LocateResult:
    best: PemResult
    estimate: object
    runs: list
    failures: int


def locate(problem: PemProblem, multistart: int = 1, seed=None, spread: float = 1.0, max_iter=500) -> LocateResult:
    """Multistart fit; the lowest final cost wins (ties broken by start order)."""
    runs = []
    failures = 0
    for i, th0 in enumerate(perturbed_starts(problem, multistart, seed, spread)):
        try:
            runs.append((i, minimize(problem, th0, max_iter=max_iter)))
        except (InfeasibleThetaError, StallError):
            failures += 1
    if not runs:
        raise TotalFailureError("every start was infeasible or stalled")
    runs.sort(key=lambda ir: (ir[1].V, ir[0]))
    best = runs[0][1]
    theta = problem.theta(best.theta_hat)
    estimate = positions_from_theta(theta, heads=problem.leak_heads(best.theta_hat))
    return LocateResult(best, estimate, [r for _, r in sorted(runs, key=lambda ir: ir[0])], failures)


def gauss_newton_matrix(theta, problem: PemProblem, rel_step=1e-6) -> np.ndarray:
    """``J^T J`` of the stacked prediction errors w.r.t. scaled parameters."""
    scale = problem.theta_scale
    z = np.asarray(theta, dtype=float) / scale
    cols = []
    w = np.ones(2) if problem.output_weights is None else np.asarray(problem.output_weights, dtype=float)
    for j in range(z.size):
        h = rel_step * max(abs(z[j]), 1.0)
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        ep = prediction_error(zp * scale, problem).data
        em = prediction_error(zm * scale, problem).data
        cols.append(((ep - em) / (2 * h) * np.sqrt(w)[None, :]).ravel() * math.sqrt(problem.dt))
    J = np.column_stack(cols)
    return J.T @ J


def condition_number(M) -> float:
    """2-norm condition number; ``inf`` for a singular (including all-zero) matrix."""
    s = np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)
    if s[-1] <= 0.0:
        return math.inf
    return float(s[0] / s[-1])
