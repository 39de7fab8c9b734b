"""Linearised pipe models and the parametric leak-identification models."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SingularLinearizationError
from .hydraulics import BoundaryMode, Equilibrium, GridModel, PipelineParams, derive_coefficients


@dataclass
class LinearStateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    state_labels: list = field(default_factory=list)
    input_labels: list = field(default_factory=list)
    output_labels: list = field(default_factory=list)

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.C.shape[1] != n:
            raise ValueError("inconsistent state-space dimensions")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise ValueError("D must be p x m")

    @property
    def n_states(self):
        return self.A.shape[0]


def _boundary_selector(n):
    C = np.zeros((2, n))
    C[0, 0] = 1.0
    C[1, n - 1] = 1.0
    return C


def linearize_full(model: GridModel, eq: Equilibrium) -> LinearStateSpace:
    """Tridiagonal deviation model around ``eq``.

    Flow rows carry ``-2 mu Qbar`` on the diagonal and ``+-a1/dz`` beside it;
    head rows carry ``+-a2/dz`` and the leak damping
    ``-a2 sigma / (2 dz sqrt(Hbar))``. Outputs are the first and last states:
    ``(Q_in, Q_out)`` for head-head, ``(Q_in, H_out)`` for head-flow.
    """
    c = model.coeffs
    dz = model.dz
    n_s = model.n_s
    Qbar = eq.x_bar[0::2]
    Hbar = eq.x_bar[1::2]
    full = 2 * n_s
    A = np.zeros((full, full))
    B = np.zeros((full, 2))
    for i in range(n_s):
        q, h = 2 * i, 2 * i + 1
        A[q, q] = -2.0 * c.mu * abs(Qbar[i])
        A[q, h] = -c.a1 / dz[i]
        if i > 0:
            A[q, q - 1] = c.a1 / dz[i]
        A[h, q] = c.a2 / dz[i]
        if i < n_s - 1:
            A[h, q + 2] = -c.a2 / dz[i]
            sigma = model.sigma_at_node[i]
            if sigma > 0:
                if Hbar[i] <= 0:
                    raise SingularLinearizationError(f"zero head at leaking node {i + 2}")
                A[h, h] = -c.a2 * sigma / (2.0 * dz[i] * math.sqrt(Hbar[i]))
    B[0, 0] = c.a1 / dz[0]
    B[full - 1, 1] = -c.a2 / dz[-1]
    if model.mode is BoundaryMode.HEAD_HEAD:
        # outlet head becomes an input: drop its row/column and move the coupling into B
        B[full - 2, 1] = A[full - 2, full - 1]
        A = A[:-1, :-1]
        B = B[:-1]
        inputs = ["H_in", "H_out"]
        outputs = ["Q_in", "Q_out"]
    else:
        inputs = ["H_in", "Q_out"]
        outputs = ["Q_in", "H_out"]
    n = A.shape[0]
    return LinearStateSpace(
        A, B, _boundary_selector(n), np.zeros((2, 2)), model.state_labels(), inputs, outputs
    )


@dataclass(frozen=True)
class ThetaSingle:
    """``theta1 = 1/dz_1``, ``theta2 = sigma_1/sqrt(Hbar_2)``."""

    theta1: float
    theta2: float

    @classmethod
    def from_physical(cls, dz1, sigma1, H2):
        return cls(1.0 / dz1, sigma1 / math.sqrt(H2))

    def as_array(self):
        return np.array([self.theta1, self.theta2])

    def check(self, L):
        if not self.theta1 > 1.0 / L:
            raise DomainError(f"theta1 = {self.theta1} puts the leak beyond the pipe end")
        if self.theta2 < 0:
            raise DomainError("theta2 must be >= 0")


@dataclass(frozen=True)
class ThetaDouble:
    """``[1/dz_1, sigma_1/sqrt(H_2), 1/dz_2, Qbar_2, sigma_2/sqrt(H_3)]``."""

    theta1: float
    theta2: float
    theta3: float
    theta4: float
    theta5: float

    @classmethod
    def from_physical(cls, dz1, sigma1, H2, dz2, Q2, sigma2, H3):
        return cls(1.0 / dz1, sigma1 / math.sqrt(H2), 1.0 / dz2, Q2, sigma2 / math.sqrt(H3))

    def as_array(self):
        return np.array([self.theta1, self.theta2, self.theta3, self.theta4, self.theta5])

    def check(self, L):
        if self.theta1 <= 0 or self.theta3 <= 0:
            raise DomainError("theta1 and theta3 must be positive")
        if 1.0 / self.theta1 + 1.0 / self.theta3 >= L:
            raise DomainError("leak sections leave no room for the third section")
        if self.theta2 < 0 or self.theta5 < 0:
            raise DomainError("theta2 and theta5 must be >= 0")
        if self.theta4 <= 0:
            raise DomainError("theta4 (middle-section flow) must be > 0")


def theta_from_array(values):
    values = [float(v) for v in values]
    if len(values) == 2:
        return ThetaSingle(*values)
    if len(values) == 5:
        return ThetaDouble(*values)
    raise DomainError(f"theta must have 2 or 5 entries, got {len(values)}")


def build_single_leak(theta: ThetaSingle, eq_flows, params: PipelineParams) -> LinearStateSpace:
    """Three-state model ``[Q_1, H_2, Q_2]`` with inputs ``(H_in, H_out)``."""
    theta.check(params.L)
    c = derive_coefficients(params)
    gamma = params.L - 1.0 / theta.theta1
    if gamma <= 0:
        raise DomainError("second section length is not positive")
    t1, t2 = theta.theta1, theta.theta2
    q1, q2 = eq_flows
    A = np.array([
        [-2 * c.mu * q1, -c.a1 * t1, 0.0],
        [c.a2 * t1, -c.a2 * t1 * t2 / 2.0, -c.a2 * t1],
        [0.0, c.a1 / gamma, -2 * c.mu * q2],
    ])
    B = np.array([[c.a1 * t1, 0.0], [0.0, 0.0], [0.0, -c.a1 / gamma]])
    C = _boundary_selector(3)
    return LinearStateSpace(A, B, C, np.zeros((2, 2)), ["Q_1", "H_2", "Q_2"], ["H_in", "H_out"], ["Q_in", "Q_out"])


def build_two_leak(theta: ThetaDouble, eq_flows, params: PipelineParams) -> LinearStateSpace:
    """Six-state model ``[Q_1, H_2, Q_2, H_3, Q_3, H_4]`` with inputs ``(H_in, Q_out)``.

    ``eq_flows`` holds the inlet and outlet equilibrium flows; the middle
    one is ``theta4``.
    """
    theta.check(params.L)
    c = derive_coefficients(params)
    t1, t2, t3, t4, t5 = theta.as_array()
    alpha = params.L - 1.0 / t1 - 1.0 / t3
    if alpha <= 0:
        raise DomainError("third section length is not positive")
    q1, q5 = eq_flows
    A = np.zeros((6, 6))
    A[0, 0:2] = [-2 * c.mu * q1, -c.a1 * t1]
    A[1, 0:3] = [c.a2 * t1, -0.5 * c.a2 * t1 * t2, -c.a2 * t1]
    A[2, 1:4] = [c.a1 * t3, -2 * c.mu * t4, -c.a1 * t3]
    A[3, 2:5] = [c.a2 * t3, -0.5 * c.a2 * t3 * t5, -c.a2 * t3]
    A[4, 3:6] = [c.a1 / alpha, -2 * c.mu * q5, -c.a1 / alpha]
    A[5, 4] = c.a2 / alpha
    B = np.zeros((6, 2))
    B[0, 0] = c.a1 * t1
    B[5, 1] = -c.a2 / alpha
    C = _boundary_selector(6)
    labels = ["Q_1", "H_2", "Q_2", "H_3", "Q_3", "H_4"]
    return LinearStateSpace(A, B, C, np.zeros((2, 2)), labels, ["H_in", "Q_out"], ["Q_in", "H_out"])


@dataclass(frozen=True)
class LeakEstimate:
    """Leak positions recovered from a parameter vector.

    ``theta_loss`` holds the raw loss-of-flow parameters. When the heads at
    the leak sites are known, ``sigma`` (= theta * sqrt(H)) and ``outflow``
    (= theta * H) are filled in as well.
    """

    positions: tuple
    theta_loss: tuple
    sigma: tuple | None = None
    outflow: tuple | None = None


def positions_from_theta(theta, heads=None, L=None) -> LeakEstimate:
    if isinstance(theta, ThetaSingle):
        if theta.theta1 <= 0:
            raise DomainError("theta1 must be positive")
        positions = (1.0 / theta.theta1,)
        loss = (theta.theta2,)
    elif isinstance(theta, ThetaDouble):
        if theta.theta1 <= 0 or theta.theta3 <= 0:
            raise DomainError("theta1 and theta3 must be positive")
        z1 = 1.0 / theta.theta1
        positions = (z1, z1 + 1.0 / theta.theta3)
        loss = (theta.theta2, theta.theta5)
    else:
        raise TypeError(f"unsupported parameter type {type(theta).__name__}")
    if L is not None and positions[-1] >= L:
        raise DomainError("recovered position lies beyond the pipe end")
    sigma = outflow = None
    if heads is not None:
        heads = tuple(float(h) for h in heads)
        sigma = tuple(t * math.sqrt(max(h, 0.0)) for t, h in zip(loss, heads))
        outflow = tuple(t * h for t, h in zip(loss, heads))
    return LeakEstimate(positions, loss, sigma, outflow)
