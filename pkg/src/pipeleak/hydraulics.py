"""Finite-difference pipeline model with leaks.

The pipe is split into ``n_s`` sections. States are interleaved flows and
heads ``[Q_1, H_2, Q_2, H_3, ..., Q_ns(, H_ns+1)]``; the inlet head is always
imposed, the outlet is either a head (``HEAD_HEAD``) or a flow
(``HEAD_FLOW``). In head-head mode the outlet head is an input, so the state
vector is one element shorter.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ConvergenceError, DomainError

# Below this head the square-root leak law is replaced by a linear ramp.
SQRT_EPS = 1e-6


class BoundaryMode(str, enum.Enum):
    HEAD_HEAD = "head-head"
    HEAD_FLOW = "head-flow"


@dataclass(frozen=True)
class PipelineParams:
    """Physical constants of a single pipe (SI units)."""

    g: float = 9.81
    L: float = 87.0
    b: float = 376.0
    phi: float = 0.0654
    f: float = 0.0181076

    def __post_init__(self):
        for name in ("g", "L", "b", "phi", "f"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise DomainError(f"pipeline parameter {name} must be > 0, got {value!r}")

    @property
    def area(self) -> float:
        return math.pi * self.phi**2 / 4.0


@dataclass(frozen=True)
class Coefficients:
    a1: float
    a2: float
    mu: float


@dataclass(frozen=True)
class LeakSpec:
    z_f: float
    sigma: float

    def check(self, L: float) -> None:
        if not 0.0 < self.z_f < L:
            raise DomainError(f"leak position {self.z_f} outside (0, {L})")
        if self.sigma < 0:
            raise DomainError(f"leak coefficient must be >= 0, got {self.sigma}")


def derive_coefficients(params: PipelineParams) -> Coefficients:
    """Return ``a1 = g A_r``, ``a2 = b^2 / (g A_r)`` and ``mu = f / (2 phi A_r)``."""
    area = params.area
    a1 = params.g * area
    return Coefficients(a1=a1, a2=params.b**2 / a1, mu=params.f / (2.0 * params.phi * area))


def _root_head(H):
    """Square root of the head, linearised below ``SQRT_EPS`` and zero for H <= 0."""
    H = np.asarray(H, dtype=float)
    Hc = np.maximum(H, 0.0)
    return np.where(Hc < SQRT_EPS, Hc / math.sqrt(SQRT_EPS), np.sqrt(np.maximum(Hc, SQRT_EPS)))


def _root_head_slope(H):
    H = np.asarray(H, dtype=float)
    slope = np.where(H < SQRT_EPS, 1.0 / math.sqrt(SQRT_EPS), 0.5 / np.sqrt(np.maximum(H, SQRT_EPS)))
    return np.where(H <= 0.0, 0.0, slope)


def leak_outflow(sigma, H):
    """Leak discharge ``sigma * sqrt(H)`` [m^3/s].

    Heads below ``SQRT_EPS`` use a linear ramp so the law stays Lipschitz;
    negative heads give zero outflow.
    """
    if np.any(np.asarray(sigma) < 0):
        raise DomainError("leak coefficient must be >= 0")
    out = np.asarray(sigma, dtype=float) * _root_head(H)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GridModel:
    """Discretised pipe: section lengths plus a leak coefficient per interior node.

    ``sigma_at_node[j]`` is the leak at the node between section ``j`` and
    section ``j + 1`` (zero-based), i.e. at ``z = dz[0] + ... + dz[j]``.
    """

    params: PipelineParams
    dz: np.ndarray
    sigma_at_node: np.ndarray
    mode: BoundaryMode = BoundaryMode.HEAD_HEAD
    coeffs: Coefficients = field(init=False)

    def __post_init__(self):
        dz = np.atleast_1d(np.asarray(self.dz, dtype=float))
        sigma = np.atleast_1d(np.asarray(self.sigma_at_node, dtype=float))
        if dz.ndim != 1 or dz.size < 1:
            raise DomainError("need at least one section")
        if np.any(~np.isfinite(dz)) or np.any(dz <= 0):
            raise DomainError("section lengths must be positive")
        if abs(dz.sum() - self.params.L) > 1e-9 * self.params.L:
            raise DomainError(f"section lengths sum to {dz.sum()}, expected L = {self.params.L}")
        if sigma.size == 0 and dz.size == 1:
            sigma = np.zeros(0)
        if sigma.shape != (dz.size - 1,):
            raise ContractError(f"expected {dz.size - 1} interior leak coefficients, got {sigma.size}")
        if np.any(sigma < 0):
            raise DomainError("leak coefficients must be >= 0")
        object.__setattr__(self, "dz", dz)
        object.__setattr__(self, "sigma_at_node", sigma)
        object.__setattr__(self, "mode", BoundaryMode(self.mode))
        object.__setattr__(self, "coeffs", derive_coefficients(self.params))

    @classmethod
    def uniform(cls, params, n_s, leaks=(), mode=BoundaryMode.HEAD_HEAD):
        """Uniform grid with each leak moved to the nearest interior node.

        Positions are therefore quantised to multiples of ``L / n_s``.
        """
        if n_s < 1:
            raise DomainError("n_s must be >= 1")
        dz = np.full(n_s, params.L / n_s)
        sigma = np.zeros(n_s - 1)
        for leak in leaks:
            leak.check(params.L)
            if n_s < 2:
                raise DomainError("a single-section grid has no interior node for a leak")
            node = min(max(int(round(leak.z_f / (params.L / n_s))), 1), n_s - 1)
            sigma[node - 1] += leak.sigma
        return cls(params, dz, sigma, mode)

    @classmethod
    def from_leaks(cls, params, leaks, mode=BoundaryMode.HEAD_HEAD):
        """Grid whose section boundaries are exactly the leak positions."""
        leaks = sorted(leaks, key=lambda lk: lk.z_f)
        for leak in leaks:
            leak.check(params.L)
        edges = [0.0] + [lk.z_f for lk in leaks] + [params.L]
        return cls(params, np.diff(edges), np.array([lk.sigma for lk in leaks]), mode)

    @property
    def n_s(self) -> int:
        return self.dz.size

    @property
    def state_dim(self) -> int:
        return 2 * self.n_s if self.mode is BoundaryMode.HEAD_FLOW else 2 * self.n_s - 1

    @property
    def node_positions(self) -> np.ndarray:
        """Positions of the interior nodes (leak sites)."""
        return np.cumsum(self.dz)[:-1]

    def state_labels(self) -> list[str]:
        labels = []
        for i in range(1, self.n_s + 1):
            labels.append(f"Q_{i}")
            labels.append(f"H_{i + 1}")
        return labels[: self.state_dim]

    def split(self, x):
        """Return ``(Q, H_interior)``; in head-flow mode the outlet head is appended to H."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.state_dim,):
            raise ContractError(f"state has shape {x.shape}, model expects ({self.state_dim},)")
        return x[0::2], x[1::2]

    def outputs(self, x, u):
        """Boundary quantities ``(H_in, H_out, Q_in, Q_out)`` for state ``x``."""
        Q, H = self.split(x)
        if self.mode is BoundaryMode.HEAD_HEAD:
            return float(u[0]), float(u[1]), float(Q[0]), float(Q[-1])
        return float(u[0]), float(H[-1]), float(Q[0]), float(u[1])


def nonlinear_rhs(model: GridModel, x, u) -> np.ndarray:
    """Time derivative of the discretised momentum/continuity equations.

    ``u`` is ``(H_in, H_out)`` in head-head mode and ``(H_in, Q_out)`` in
    head-flow mode.
    """
    c = model.coeffs
    Q, H = model.split(x)
    dz = model.dz
    n = model.n_s
    if model.mode is BoundaryMode.HEAD_HEAD:
        heads = np.concatenate(([u[0]], H, [u[1]]))
    else:
        heads = np.concatenate(([u[0]], H))
    dQ = c.a1 / dz * (heads[:-1] - heads[1:]) - c.mu * Q * np.abs(Q)
    out = np.empty(model.state_dim)
    out[0::2] = dQ
    if n > 1:
        H_int = heads[1:n]
        out[1 : 2 * n - 1 : 2] = c.a2 / dz[:-1] * (
            Q[:-1] - Q[1:] - model.sigma_at_node * _root_head(H_int)
        )
    if model.mode is BoundaryMode.HEAD_FLOW:
        out[-1] = c.a2 / dz[-1] * (Q[-1] - u[1])
    return out


def rhs_jacobian(model: GridModel, x, u):
    """Analytic ``(df/dx, df/du)`` of :func:`nonlinear_rhs`."""
    c = model.coeffs
    Q, H = model.split(x)
    dz = model.dz
    n = model.n_s
    m = model.state_dim
    A = np.zeros((m, m))
    B = np.zeros((m, 2))
    for i in range(n):
        r = 2 * i
        A[r, r] = -2.0 * c.mu * abs(Q[i])
        if r - 1 >= 0:
            A[r, r - 1] = c.a1 / dz[i]
        if r + 1 < m:
            A[r, r + 1] = -c.a1 / dz[i]
    B[0, 0] = c.a1 / dz[0]
    if model.mode is BoundaryMode.HEAD_HEAD:
        B[m - 1, 1] = -c.a1 / dz[-1]
    for j in range(n - 1):
        r = 2 * j + 1
        A[r, r - 1] = c.a2 / dz[j]
        A[r, r + 1] = -c.a2 / dz[j]
        A[r, r] = -c.a2 / dz[j] * model.sigma_at_node[j] * _root_head_slope(H[j])
    if model.mode is BoundaryMode.HEAD_FLOW:
        A[m - 1, m - 2] = c.a2 / dz[-1]
        B[m - 1, 1] = -c.a2 / dz[-1]
    return A, B


# -- parameter-extended models ------------------------------------------------

def extended_split(x_ext, n_leaks: int):
    """Split an extended state into hydraulic part, section lengths and leak coefficients."""
    x_ext = np.asarray(x_ext, dtype=float)
    nh = 2 * n_leaks + 1
    if x_ext.shape != (nh + 2 * n_leaks,):
        raise ContractError(f"extended state for {n_leaks} leak(s) must have {nh + 2 * n_leaks} entries")
    p = x_ext[nh:]
    return x_ext[:nh], p[0::2], p[1::2]


def extended_grid(params: PipelineParams, dz_leaks, sigmas) -> GridModel:
    dz_leaks = np.asarray(dz_leaks, dtype=float)
    if np.any(dz_leaks <= 0) or np.any(dz_leaks >= params.L) or dz_leaks.sum() >= params.L:
        raise DomainError(f"section lengths {dz_leaks.tolist()} leave no room in a pipe of length {params.L}")
    if np.any(np.asarray(sigmas) < 0):
        raise DomainError("leak coefficients must be >= 0")
    dz = np.append(dz_leaks, params.L - dz_leaks.sum())
    return GridModel(params, dz, np.asarray(sigmas, dtype=float), BoundaryMode.HEAD_HEAD)


def extended_rhs(params: PipelineParams, n_leaks: int, x_ext, u) -> np.ndarray:
    """Right-hand side of the pipe model with leak sites appended as constant states.

    The extended state is ``[Q_1, H_2, Q_2, (H_3, Q_3,) dz_1, sigma_1(, dz_2, sigma_2)]``;
    section lengths and coefficients have zero time derivative.
    """
    if n_leaks not in (1, 2):
        raise DomainError("extended models exist for one or two leaks")
    xh, dzs, sigmas = extended_split(x_ext, n_leaks)
    grid = extended_grid(params, dzs, sigmas)
    return np.concatenate((nonlinear_rhs(grid, xh, u), np.zeros(2 * n_leaks)))


def extended_jacobian(params: PipelineParams, n_leaks: int, x_ext, u) -> np.ndarray:
    """Analytic state Jacobian of :func:`extended_rhs`."""
    xh, dzs, sigmas = extended_split(x_ext, n_leaks)
    grid = extended_grid(params, dzs, sigmas)
    c = grid.coeffs
    nh = xh.size
    J = np.zeros((nh + 2 * n_leaks, nh + 2 * n_leaks))
    J[:nh, :nh] = rhs_jacobian(grid, xh, u)[0]
    Q, H = xh[0::2], xh[1::2]
    heads = np.concatenate(([u[0]], H, [u[1]]))
    dz = grid.dz
    last = n_leaks  # index of the final section
    for k in range(n_leaks):
        col_dz = nh + 2 * k
        col_sig = col_dz + 1
        # momentum of section k and continuity at node k+1 scale with 1/dz_k
        J[2 * k, col_dz] = -c.a1 / dz[k] ** 2 * (heads[k] - heads[k + 1])
        cont = Q[k] - Q[k + 1] - sigmas[k] * _root_head(H[k])
        J[2 * k + 1, col_dz] = -c.a2 / dz[k] ** 2 * cont
        J[2 * k + 1, col_sig] = -c.a2 / dz[k] * _root_head(H[k])
        # the final section shrinks as any dz_k grows
        J[2 * last, col_dz] = c.a1 / dz[last] ** 2 * (heads[last] - heads[last + 1])
    return J


# -- equilibria -----------------------------------------------------------------

@dataclass(frozen=True)
class Equilibrium:
    x_bar: np.ndarray
    u_bar: np.ndarray

    def flows(self):
        return self.x_bar[0::2]

    def heads(self):
        return self.x_bar[1::2]


def _initial_guess(model: GridModel, u_bar):
    c = model.coeffs
    L = model.params.L
    z_nodes = np.cumsum(model.dz)
    if model.mode is BoundaryMode.HEAD_HEAD:
        dH = u_bar[0] - u_bar[1]
        q = math.copysign(math.sqrt(abs(dH) * c.a1 / (c.mu * L)), dH) if c.mu > 0 else 0.0
    else:
        q = u_bar[1]
    x = np.empty(model.state_dim)
    x[0::2] = q
    x[1::2] = (u_bar[0] - c.mu * q * abs(q) / c.a1 * z_nodes)[: x[1::2].size]
    return x


def _balance_residual(model, x, u):
    """RHS rescaled to head units (momentum rows) and flow units (continuity rows)."""
    r = nonlinear_rhs(model, x, u)
    scale = np.empty_like(r)
    scale[0::2] = model.dz / model.coeffs.a1
    scale[1::2] = (model.dz / model.coeffs.a2)[: scale[1::2].size]
    return r * scale


def steady_state(model: GridModel, u_bar, max_iter: int = 100, tol: float = 1e-13) -> Equilibrium:
    """Solve ``nonlinear_rhs(model, x, u_bar) = 0`` by damped Newton.

    Starts from the leak-free closed form; if Newton stalls, relaxes the
    system in pseudo-time and polishes the result with Newton again.
    """
    u_bar = np.asarray(u_bar, dtype=float)
    if model.mode is BoundaryMode.HEAD_FLOW and u_bar[1] < 0:
        raise DomainError("outlet flow must be non-negative")
    x = _initial_guess(model, u_bar)
    try:
        x = _newton(model, x, u_bar, max_iter, tol)
    except ConvergenceError:
        x = _pseudo_time(model, _initial_guess(model, u_bar), u_bar)
        x = _newton(model, x, u_bar, max_iter, tol)
    return Equilibrium(x_bar=x, u_bar=u_bar)


def _newton(model, x, u, max_iter, tol):
    res = _balance_residual(model, x, u)
    norm = np.max(np.abs(res))
    scale = np.empty(model.state_dim)
    scale[0::2] = model.dz / model.coeffs.a1
    scale[1::2] = (model.dz / model.coeffs.a2)[: scale[1::2].size]
    for _ in range(max_iter):
        if norm < tol:
            return x
        J = rhs_jacobian(model, x, u)[0] * scale[:, None]
        try:
            step = np.linalg.solve(J, -res)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError("singular Jacobian in steady-state Newton", norm) from exc
        t = 1.0
        while t > 1e-6:
            x_new = x + t * step
            res_new = _balance_residual(model, x_new, u)
            norm_new = np.max(np.abs(res_new))
            if norm_new < (1 - 1e-4 * t) * norm or norm_new < tol:
                break
            t *= 0.5
        else:
            # rounding floor reached: accept if already tight
            if norm < 1e3 * tol:
                return x
            raise ConvergenceError("steady-state line search failed", norm)
        x, res, norm = x_new, res_new, norm_new
    if norm < tol:
        return x
    raise ConvergenceError(f"Newton did not converge in {max_iter} iterations", norm)


def _pseudo_time(model, x, u, t_max=300.0):
    h = 0.2 * model.dz.min() / model.params.b
    f = lambda z: nonlinear_rhs(model, z, u)  # noqa: E731
    t = 0.0
    while t < t_max:
        k1 = f(x)
        if np.max(np.abs(k1)) < 1e-8:
            break
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return x


def natural_frequency(params: PipelineParams, mode: BoundaryMode) -> float:
    """First resonance of the pipe column [rad/s]."""
    mode = BoundaryMode(mode)
    if mode is BoundaryMode.HEAD_HEAD:
        return math.pi * params.b / params.L
    return math.pi * params.b / (2.0 * params.L)
