"""Box-constrained BFGS with finite-difference gradients.

Written for costs that may return ``inf`` on part of the box (infeasible
model parameters), which rules out most off-the-shelf bounded solvers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StallError


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    n_iter: int
    exit_reason: str
    history: list = field(default_factory=list)


def fd_gradient(fun, x, lower, upper, f0=None, rel_step=1e-6, scale=None):
    """Central differences with step ``rel_step * max(|x_j|, scale_j)``.

    Falls back to a one-sided difference next to a bound or where one side
    is infeasible (non-finite cost).
    """
    x = np.asarray(x, dtype=float)
    scale = np.ones_like(x) if scale is None else np.asarray(scale, dtype=float)
    g = np.zeros_like(x)
    if f0 is None:
        f0 = fun(x)
    for j in range(x.size):
        h = rel_step * max(abs(x[j]), scale[j])
        xp = x.copy()
        xm = x.copy()
        xp[j] = min(x[j] + h, upper[j])
        xm[j] = max(x[j] - h, lower[j])
        fp = fun(xp) if xp[j] > x[j] else np.inf
        fm = fun(xm) if xm[j] < x[j] else np.inf
        if np.isfinite(fp) and np.isfinite(fm):
            g[j] = (fp - fm) / (xp[j] - xm[j])
        elif np.isfinite(fp):
            g[j] = (fp - f0) / (xp[j] - x[j])
        elif np.isfinite(fm):
            g[j] = (f0 - fm) / (x[j] - xm[j])
    return g


def _projected_grad(x, g, lower, upper):
    pg = g.copy()
    pg[(x <= lower) & (g > 0)] = 0.0
    pg[(x >= upper) & (g < 0)] = 0.0
    return pg


def minimize_box(fun, x0, lower, upper, grad=None, max_iter=500, ftol=1e-10, gtol=1e-8,
                 patience=3, callback=None) -> OptimResult:
    """Minimise ``fun`` over ``lower <= x <= upper``.

    Stops when the relative decrease stays below ``ftol`` for ``patience``
    iterations, when the projected gradient norm drops below ``gtol`` times
    the starting cost (so the test does not depend on the cost's units), or
    after ``max_iter`` iterations. Accepted iterates
    never increase the cost.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    if grad is None:
        grad = lambda z, fz: fd_gradient(fun, z, lower, upper, fz)  # noqa: E731
    f = fun(x)
    if not np.isfinite(f):
        raise StallError("cost is not finite at the starting point")
    g = grad(x, f)
    n = x.size
    H = np.eye(n)
    history = [float(f)]
    g_floor = gtol * abs(f)
    small = 0
    exit_reason = "max-iter"
    it = 0
    for it in range(1, max_iter + 1):
        pg = _projected_grad(x, g, lower, upper)
        gnorm = float(np.linalg.norm(pg))
        if gnorm <= g_floor:
            exit_reason = "converged"
            it -= 1
            break
        free = ~(((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0)))
        d = np.zeros(n)
        d[free] = -(H[np.ix_(free, free)] @ g[free])
        if d @ g >= 0:
            H = np.eye(n)
            d = -pg
        accepted = False
        for attempt in range(2):
            t = 1.0
            for _ in range(40):
                x_new = np.clip(x + t * d, lower, upper)
                step = x_new - x
                if not np.any(step):
                    break
                f_new = fun(x_new)
                if np.isfinite(f_new) and f_new <= f + 1e-4 * (g @ step):
                    accepted = True
                    break
                t *= 0.5
            if accepted or attempt == 1:
                break
            H = np.eye(n)
            d = -pg
        if not accepted:
            result = OptimResult(x, float(f), gnorm, it - 1, "stalled", history)
            if it == 1:
                raise StallError("no descent step found from the starting point", result)
            raise StallError(f"line search failed at iteration {it}", result)
        g_new = grad(x_new, f_new)
        s = x_new - x
        yv = g_new - g
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, yv)
            H = V @ H @ V.T + rho * np.outer(s, s)
        rel = (f - f_new) / max(abs(f), 1e-300)
        x, f, g = x_new, f_new, g_new
        history.append(float(f))
        if callback is not None:
            callback(x, f)
        small = small + 1 if rel < ftol else 0
        if small >= patience:
            exit_reason = "converged"
            break
    pg = _projected_grad(x, g, lower, upper)
    if exit_reason == "converged" and np.any((x <= lower) | (x >= upper)):
        exit_reason = "bound-hit"
    return OptimResult(x, float(f), float(np.linalg.norm(pg)), it, exit_reason, history)
