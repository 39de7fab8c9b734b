"""Compiled inner loops.

These are independent re-implementations of the reference Python models in
``hydraulics``; the test-suite cross-checks them entry by entry.
"""
import math

import numpy as np
from numba import njit

SQRT_EPS = 1e-6
_INV_ROOT_EPS = 1.0 / math.sqrt(SQRT_EPS)


@njit(cache=True)
def root_head(h):
    if h <= 0.0:
        return 0.0
    if h < SQRT_EPS:
        return h * _INV_ROOT_EPS
    return math.sqrt(h)


@njit(cache=True)
def root_head_slope(h):
    if h <= 0.0:
        return 0.0
    if h < SQRT_EPS:
        return _INV_ROOT_EPS
    return 0.5 / math.sqrt(h)


@njit(cache=True)
def signal_value(p, t):
    """Boundary signal: ``base + amp*sin((w0 + pi*k*tau)*tau) + step*[t >= t_step]``.

    ``p = [base, amp, w0, k, start, step, t_step]`` with ``tau = t - start``.
    """
    v = p[0]
    tau = t - p[4]
    if tau >= 0.0 and p[1] != 0.0:
        v += p[1] * math.sin((p[2] + math.pi * p[3] * tau) * tau)
    if p[5] != 0.0 and t >= p[6]:
        v += p[5]
    return v


# -- truth simulator -------------------------------------------------------------

@njit(cache=True)
def _node_sigma(out, leak_node, leak_sigma, leak_onset, t):
    out[:] = 0.0
    for j in range(leak_node.size):
        if t >= leak_onset[j]:
            out[leak_node[j]] += leak_sigma[j]


@njit(cache=True)
def pipe_rhs(x, dz, sig, a1, a2, mu, head_flow, h_in, bc_out, out):
    n = dz.size
    for i in range(n):
        q = x[2 * i]
        h_up = h_in if i == 0 else x[2 * i - 1]
        if i == n - 1 and not head_flow:
            h_dn = bc_out
        else:
            h_dn = x[2 * i + 1]
        out[2 * i] = a1 / dz[i] * (h_up - h_dn) - mu * q * abs(q)
        if i < n - 1:
            hj = x[2 * i + 1]
            out[2 * i + 1] = a2 / dz[i] * (q - x[2 * i + 2] - sig[i] * root_head(hj))
    if head_flow:
        out[2 * n - 1] = a2 / dz[n - 1] * (x[2 * n - 2] - bc_out)


@njit(cache=True)
def simulate_pipe(x0, dz, a1, a2, mu, head_flow, leak_node, leak_sigma, leak_onset,
                  sig_in, sig_out, dt, n_samples, substeps):
    """RK4 trajectory sampled every ``dt``; returns (states, index of first non-finite sample or -1)."""
    m = x0.size
    n = dz.size
    xs = np.empty((n_samples + 1, m))
    xs[0] = x0
    x = x0.copy()
    h = dt / substeps
    sig = np.zeros(max(n - 1, 1))
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    tmp = np.empty(m)
    for s in range(n_samples):
        for j in range(substeps):
            t = s * dt + j * h
            tm = t + 0.5 * h
            te = t + h
            _node_sigma(sig, leak_node, leak_sigma, leak_onset, t)
            pipe_rhs(x, dz, sig, a1, a2, mu, head_flow, signal_value(sig_in, t), signal_value(sig_out, t), k1)
            _node_sigma(sig, leak_node, leak_sigma, leak_onset, tm)
            hin = signal_value(sig_in, tm)
            bout = signal_value(sig_out, tm)
            for i in range(m):
                tmp[i] = x[i] + 0.5 * h * k1[i]
            pipe_rhs(tmp, dz, sig, a1, a2, mu, head_flow, hin, bout, k2)
            for i in range(m):
                tmp[i] = x[i] + 0.5 * h * k2[i]
            pipe_rhs(tmp, dz, sig, a1, a2, mu, head_flow, hin, bout, k3)
            _node_sigma(sig, leak_node, leak_sigma, leak_onset, te)
            for i in range(m):
                tmp[i] = x[i] + h * k3[i]
            pipe_rhs(tmp, dz, sig, a1, a2, mu, head_flow, signal_value(sig_in, te), signal_value(sig_out, te), k4)
            for i in range(m):
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        for i in range(m):
            if not math.isfinite(x[i]):
                return xs[: s + 1], s + 1
        xs[s + 1] = x
    return xs, -1


# -- extended models for the filter ----------------------------------------------

@njit(cache=True)
def ext_rhs_jac(x, n_leaks, L, a1, a2, mu, h_in, h_out, f, A):
    """Extended right-hand side ``f`` and Jacobian ``A`` (head-head boundaries)."""
    nh = 2 * n_leaks + 1
    ns = n_leaks + 1
    dz = np.empty(ns)
    rest = L
    for k in range(n_leaks):
        dz[k] = x[nh + 2 * k]
        rest -= dz[k]
    dz[ns - 1] = rest
    f[:] = 0.0
    A[:, :] = 0.0
    for i in range(ns):
        q = x[2 * i]
        h_up = h_in if i == 0 else x[2 * i - 1]
        h_dn = h_out if i == ns - 1 else x[2 * i + 1]
        f[2 * i] = a1 / dz[i] * (h_up - h_dn) - mu * q * abs(q)
        A[2 * i, 2 * i] = -2.0 * mu * abs(q)
        if i > 0:
            A[2 * i, 2 * i - 1] = a1 / dz[i]
        if i < ns - 1:
            A[2 * i, 2 * i + 1] = -a1 / dz[i]
        if i < ns - 1:
            col = nh + 2 * i
            A[2 * i, col] = -a1 / (dz[i] * dz[i]) * (h_up - h_dn)
        else:
            for k in range(n_leaks):
                A[2 * i, nh + 2 * k] = a1 / (dz[i] * dz[i]) * (h_up - h_dn)
    for k in range(n_leaks):
        r = 2 * k + 1
        hk = x[r]
        sk = x[nh + 2 * k + 1]
        rh = root_head(hk)
        cont = x[2 * k] - x[2 * k + 2] - sk * rh
        f[r] = a2 / dz[k] * cont
        A[r, 2 * k] = a2 / dz[k]
        A[r, 2 * k + 2] = -a2 / dz[k]
        A[r, r] = -a2 / dz[k] * sk * root_head_slope(hk)
        A[r, nh + 2 * k] = -a2 / (dz[k] * dz[k]) * cont
        A[r, nh + 2 * k + 1] = -a2 / dz[k] * rh


@njit(cache=True)
def _project(x, n_leaks, L, lo_frac, hi_frac, sigma_max):
    nh = 2 * n_leaks + 1
    hit = False
    total = 0.0
    for k in range(n_leaks):
        i = nh + 2 * k
        if x[i] < lo_frac * L:
            x[i] = lo_frac * L
            hit = True
        elif x[i] > hi_frac * L:
            x[i] = hi_frac * L
            hit = True
        total += x[i]
        if x[i + 1] < 0.0:
            x[i + 1] = 0.0
            hit = True
        elif x[i + 1] > sigma_max:
            x[i + 1] = sigma_max
            hit = True
    if total > hi_frac * L:
        scale = hi_frac * L / total
        for k in range(n_leaks):
            x[nh + 2 * k] *= scale
        hit = True
    return hit


@njit(cache=True)
def _ekf_deriv(x, P, n_leaks, L, a1, a2, mu, hin, hout, y, alpha, W, Rinv, lo, hi, smax, dx, dP):
    n = x.size
    nh = 2 * n_leaks + 1
    xc = x.copy()
    _project(xc, n_leaks, L, lo, hi, smax)
    f = np.empty(n)
    A = np.empty((n, n))
    ext_rhs_jac(xc, n_leaks, L, a1, a2, mu, hin, hout, f, A)
    # C selects Q_in (state 0) and Q_out (state nh-1)
    PCt = np.empty((n, 2))
    for i in range(n):
        PCt[i, 0] = P[i, 0]
        PCt[i, 1] = P[i, nh - 1]
    K = PCt @ Rinv
    e0 = y[0] - x[0]
    e1 = y[1] - x[nh - 1]
    for i in range(n):
        dx[i] = f[i] + K[i, 0] * e0 + K[i, 1] * e1
    As = A.copy()
    for i in range(n):
        As[i, i] += alpha
    AP = As @ P
    dP[:, :] = AP + AP.T - K @ PCt.T + W


@njit(cache=True)
def run_ekf_loop(x0, P0, n_leaks, L, a1, a2, mu, u, y, dt, substeps, alpha, W, Rinv,
                 lo, hi, smax):
    """Continuous-discrete sweep of the filter over sampled inputs/measurements.

    Returns (x trajectory, P diagonals, innovations, innovation variances,
    projection flags, failure index or -1).
    """
    N = u.shape[0]
    n = x0.size
    nh = 2 * n_leaks + 1
    xs = np.empty((N, n))
    pdiag = np.empty((N, n))
    innov = np.empty((N, 2))
    s_var = np.empty((N, 2))
    proj = np.zeros(N, dtype=np.bool_)
    x = x0.copy()
    P = P0.copy()
    h = dt / substeps
    dx1 = np.empty(n)
    dx2 = np.empty(n)
    dx3 = np.empty(n)
    dx4 = np.empty(n)
    dP1 = np.empty((n, n))
    dP2 = np.empty((n, n))
    dP3 = np.empty((n, n))
    dP4 = np.empty((n, n))
    ym = np.empty(2)
    for k in range(N):
        xs[k] = x
        for i in range(n):
            pdiag[k, i] = P[i, i]
        innov[k, 0] = y[k, 0] - x[0]
        innov[k, 1] = y[k, 1] - x[nh - 1]
        s_var[k, 0] = P[0, 0]
        s_var[k, 1] = P[nh - 1, nh - 1]
        if k == N - 1:
            break
        for j in range(substeps):
            w0 = j / substeps
            wm = (j + 0.5) / substeps
            w1 = (j + 1.0) / substeps
            hin0 = u[k, 0] + w0 * (u[k + 1, 0] - u[k, 0])
            hout0 = u[k, 1] + w0 * (u[k + 1, 1] - u[k, 1])
            hinm = u[k, 0] + wm * (u[k + 1, 0] - u[k, 0])
            houtm = u[k, 1] + wm * (u[k + 1, 1] - u[k, 1])
            hin1 = u[k, 0] + w1 * (u[k + 1, 0] - u[k, 0])
            hout1 = u[k, 1] + w1 * (u[k + 1, 1] - u[k, 1])
            for c in range(2):
                ym[c] = y[k, c] + w0 * (y[k + 1, c] - y[k, c])
            _ekf_deriv(x, P, n_leaks, L, a1, a2, mu, hin0, hout0, ym, alpha, W, Rinv, lo, hi, smax, dx1, dP1)
            for c in range(2):
                ym[c] = y[k, c] + wm * (y[k + 1, c] - y[k, c])
            _ekf_deriv(x + 0.5 * h * dx1, P + 0.5 * h * dP1, n_leaks, L, a1, a2, mu, hinm, houtm, ym,
                       alpha, W, Rinv, lo, hi, smax, dx2, dP2)
            _ekf_deriv(x + 0.5 * h * dx2, P + 0.5 * h * dP2, n_leaks, L, a1, a2, mu, hinm, houtm, ym,
                       alpha, W, Rinv, lo, hi, smax, dx3, dP3)
            for c in range(2):
                ym[c] = y[k, c] + w1 * (y[k + 1, c] - y[k, c])
            _ekf_deriv(x + h * dx3, P + h * dP3, n_leaks, L, a1, a2, mu, hin1, hout1, ym,
                       alpha, W, Rinv, lo, hi, smax, dx4, dP4)
            x = x + h / 6.0 * (dx1 + 2.0 * dx2 + 2.0 * dx3 + dx4)
            P = P + h / 6.0 * (dP1 + 2.0 * dP2 + 2.0 * dP3 + dP4)
            P = 0.5 * (P + P.T)
            if _project(x, n_leaks, L, lo, hi, smax):
                proj[k + 1] = True
        ok = True
        for i in range(n):
            if not math.isfinite(x[i]):
                ok = False
        if ok:
            ev = np.linalg.eigvalsh(P)
            if not (ev[0] > 0.0):
                ok = False
        if not ok:
            return xs[: k + 1], pdiag[: k + 1], innov[: k + 1], s_var[: k + 1], proj[: k + 1], k + 1
    return xs, pdiag, innov, s_var, proj, -1


# -- linear predictor --------------------------------------------------------------

@njit(cache=True)
def linear_predictor(Phi, G0, G1, C, D, u, y):
    """Run ``x+ = Phi x + G0 u_k + G1 u_k+1`` from ``x = 0``; return ``y - C x - D u``."""
    N = u.shape[0]
    n = Phi.shape[0]
    p = C.shape[0]
    e = np.empty((N, p))
    m = u.shape[1]
    x = np.zeros(n)
    xn = np.zeros(n)
    for k in range(N):
        for r in range(p):
            acc = y[k, r]
            for i in range(n):
                acc -= C[r, i] * x[i]
            for j in range(u.shape[1]):
                acc -= D[r, j] * u[k, j]
            e[k, r] = acc
        if k == N - 1:
            break
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += Phi[i, j] * x[j]
            for j in range(m):
                acc += G0[i, j] * u[k, j] + G1[i, j] * u[k + 1, j]
            xn[i] = acc
        x, xn = xn, x
    return e
