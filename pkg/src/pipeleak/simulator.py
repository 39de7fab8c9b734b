"""Time integration, boundary excitation and frequency-response extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import find_peaks

from . import _kernels
from .errors import ContractError, DivergenceError, DomainError, UndefinedRatioError
from .hydraulics import BoundaryMode, GridModel, LeakSpec, leak_outflow, steady_state


@dataclass(frozen=True)
class ChirpSignal:
    """``base + amp * sin((omega0 + pi*k*tau) * tau)`` with ``tau = t - start``.

    The instantaneous frequency is ``omega0 + 2*pi*k*tau``. Before ``start``
    the signal sits at ``base``. ``amp = 0`` gives a constant boundary value.
    An optional step of size ``step`` is added from ``t_step`` on.
    """

    base: float
    amp: float = 0.0
    omega0: float = 0.0
    k: float = 1e-4
    T_w: float = 10000.0
    start: float = 0.0
    step: float = 0.0
    t_step: float = 0.0

    def __post_init__(self):
        if self.amp < 0:
            raise DomainError("chirp amplitude must be >= 0")
        if self.T_w <= 0:
            raise DomainError("chirp window must be > 0")

    @classmethod
    def constant(cls, value):
        return cls(base=value, amp=0.0)

    @property
    def is_sweep(self) -> bool:
        return self.amp > 0 and self.k > 0

    def packed(self) -> np.ndarray:
        return np.array([self.base, self.amp, self.omega0, self.k, self.start, self.step, self.t_step])

    def phase(self, t):
        tau = np.asarray(t, dtype=float) - self.start
        return (self.omega0 + math.pi * self.k * tau) * tau

    def frequency(self, t):
        """Instantaneous angular frequency [rad/s]."""
        return self.omega0 + 2.0 * math.pi * self.k * (np.asarray(t, dtype=float) - self.start)

    def time_at(self, omega):
        return self.start + (np.asarray(omega, dtype=float) - self.omega0) / (2.0 * math.pi * self.k)

    @property
    def max_frequency(self) -> float:
        return float(self.frequency(self.start + self.T_w))

    def __call__(self, t):
        return chirp_eval(self, t)


def chirp_eval(sig: ChirpSignal, t):
    t = np.asarray(t, dtype=float)
    tau = t - sig.start
    value = sig.base + np.where(tau >= 0, sig.amp * np.sin(sig.phase(t)), 0.0)
    if sig.step:
        value = value + np.where(t >= sig.t_step, sig.step, 0.0)
    return float(value) if value.ndim == 0 else value


@dataclass
class TimeSeries:
    """Uniformly sampled multi-channel record; rows are samples, columns channels."""

    t0: float
    dt: float
    labels: list
    data: np.ndarray
    units: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2 or self.data.shape[1] != len(self.labels):
            raise ContractError("data must be 2-D with one column per label")
        if not self.dt > 0:
            raise DomainError("dt must be > 0")

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.data.shape[0])

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, label) -> np.ndarray:
        try:
            return self.data[:, self.labels.index(label)]
        except ValueError:
            raise KeyError(label) from None

    def columns(self, labels) -> np.ndarray:
        missing = [lb for lb in labels if lb not in self.labels]
        if missing:
            raise ContractError(f"missing channels: {', '.join(missing)}")
        return np.column_stack([self[lb] for lb in labels])

    def decimate(self, factor: int) -> "TimeSeries":
        if factor < 1:
            raise DomainError("decimation factor must be >= 1")
        return replace(self, dt=self.dt * factor, data=self.data[::factor].copy())


# -- integration ----------------------------------------------------------------

def max_stable_step(model: GridModel) -> float:
    """Internal RK4 step bound ``0.2 * min(dz) / b``."""
    return 0.2 * float(model.dz.min()) / model.params.b


def substeps_for(model: GridModel, dt: float) -> int:
    return max(1, math.ceil(dt / max_stable_step(model) - 1e-12))


def integrate(rhs, x0, forcing, dt, T, substeps=1, labels=None) -> TimeSeries:
    """Classical fixed-step RK4 for ``x' = rhs(x, u(t))``, sampled every ``dt``.

    ``forcing`` maps a time to the input vector (may be ``None`` for
    autonomous systems); each sample interval is split into ``substeps``.
    """
    if dt <= 0 or T <= 0:
        raise DomainError("dt and T must be positive")
    n = int(round(T / dt))
    x = np.array(x0, dtype=float)
    out = np.empty((n + 1, x.size))
    out[0] = x
    h = dt / substeps
    u = (lambda _t: None) if forcing is None else forcing
    for s in range(n):
        for j in range(substeps):
            t = s * dt + j * h
            k1 = rhs(x, u(t))
            k2 = rhs(x + 0.5 * h * k1, u(t + 0.5 * h))
            k3 = rhs(x + 0.5 * h * k2, u(t + 0.5 * h))
            k4 = rhs(x + h * k3, u(t + h))
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"state became non-finite at t = {(s + 1) * dt:g} s", (s + 1) * dt)
        out[s + 1] = x
    labels = labels or [f"x{i}" for i in range(x.size)]
    return TimeSeries(0.0, dt, list(labels), out)


@dataclass(frozen=True)
class TimedLeak:
    """Leak that opens at ``onset`` seconds."""

    z_f: float
    sigma: float
    onset: float = 0.0

    def spec(self) -> LeakSpec:
        return LeakSpec(self.z_f, self.sigma)


def _leak_nodes(params, n_s, leaks):
    nodes = []
    for leak in leaks:
        leak.spec().check(params.L)
        if n_s < 2:
            raise DomainError("a single-section grid has no interior node for a leak")
        nodes.append(min(max(int(round(leak.z_f / (params.L / n_s))), 1), n_s - 1) - 1)
    return np.array(nodes, dtype=np.int64)


def simulate_pipeline(params, n_s, mode, forcing_in: ChirpSignal, forcing_out: ChirpSignal,
                      T, dt=0.01, leaks=(), record_states=False, substeps=None) -> TimeSeries:
    """Truth simulation of a uniform ``n_s``-section pipe.

    The run starts at the steady state for the boundary values at ``t = 0``
    and the leaks already open at that time. Channels are
    ``H_in, H_out, Q_in, Q_out`` followed by one leak outflow per leak
    (``Q_leak1``, ...), then the raw states if requested.
    """
    mode = BoundaryMode(mode)
    leaks = list(leaks)
    for leak in leaks:
        if leak.onset < 0:
            raise DomainError("leak onset must be >= 0")
    nodes = _leak_nodes(params, n_s, leaks)
    sig_val = np.array([lk.sigma for lk in leaks], dtype=float)
    onset = np.array([lk.onset for lk in leaks], dtype=float)
    open_now = [lk.spec() for lk in leaks if lk.onset <= 0.0]
    model = GridModel.uniform(params, n_s, open_now, mode)
    u0 = np.array([chirp_eval(forcing_in, 0.0), chirp_eval(forcing_out, 0.0)])
    eq = steady_state(model, u0)
    if substeps is None:
        substeps = substeps_for(model, dt)
    n = int(round(T / dt))
    c = model.coeffs
    xs, fail = _kernels.simulate_pipe(
        eq.x_bar.copy(), model.dz, c.a1, c.a2, c.mu, mode is BoundaryMode.HEAD_FLOW,
        nodes, sig_val, onset, forcing_in.packed(), forcing_out.packed(), float(dt), n, int(substeps),
    )
    if fail >= 0:
        raise DivergenceError(f"truth simulation diverged at t = {fail * dt:g} s", fail * dt)
    t = dt * np.arange(n + 1)
    h_in = chirp_eval(forcing_in, t)
    bc_out = chirp_eval(forcing_out, t)
    if mode is BoundaryMode.HEAD_HEAD:
        h_out, q_out = bc_out, xs[:, -1]
    else:
        h_out, q_out = xs[:, -1], bc_out
    cols = [h_in, h_out, xs[:, 0], q_out]
    labels = ["H_in", "H_out", "Q_in", "Q_out"]
    for j, (node, leak) in enumerate(zip(nodes, leaks)):
        head = xs[:, 2 * node + 1]
        cols.append(np.where(t >= leak.onset, leak_outflow(leak.sigma, head), 0.0))
        labels.append(f"Q_leak{j + 1}")
    if record_states:
        cols.extend(xs.T)
        labels.extend(model.state_labels())
    units = {lb: ("m" if lb.startswith("H") else "m3/s") for lb in labels}
    return TimeSeries(0.0, dt, labels, np.column_stack(cols), units)


def add_noise(ts: TimeSeries, stddev, seed=None) -> TimeSeries:
    """Additive Gaussian noise; ``stddev`` is a mapping channel -> std or a per-column sequence."""
    if isinstance(stddev, dict):
        unknown = set(stddev) - set(ts.labels)
        if unknown:
            raise ContractError(f"unknown channels: {sorted(unknown)}")
        stds = np.array([float(stddev.get(lb, 0.0)) for lb in ts.labels])
    else:
        stds = np.broadcast_to(np.asarray(stddev, dtype=float), (len(ts.labels),)).copy()
    if np.any(stds < 0):
        raise DomainError("noise standard deviations must be >= 0")
    rng = np.random.default_rng(seed)
    data = ts.data.copy()
    for j, s in enumerate(stds):
        if s > 0:
            data[:, j] += rng.normal(0.0, s, size=data.shape[0])
    return replace(ts, data=data)


# -- frequency response ----------------------------------------------------------

@dataclass
class FrequencyResponse:
    omega: np.ndarray
    magnitude: np.ndarray
    phase: np.ndarray
    input: str = "H_in"
    output: str = "Q_out"


def _sine_fit(phi, signal):
    X = np.column_stack([np.sin(phi), np.cos(phi), np.ones_like(phi), phi - phi.mean()])
    coef, *_ = np.linalg.lstsq(X, signal, rcond=None)
    return coef[0] + 1j * coef[1]


def frequency_response(ts: TimeSeries, input_channel, output_channel, sweep: ChirpSignal,
                       n_bins=200, discard=0.0, omega_range=None) -> FrequencyResponse:
    """Gain and phase of ``output/input`` along a chirp run.

    The swept band is cut into ``n_bins`` windows overlapping by half. In
    each window both channels are least-squares fitted to
    ``a sin(phase) + b cos(phase) + c + d*phase`` where ``phase`` is the
    chirp's own phase, i.e. demodulated at the local sweep frequency.
    Samples earlier than ``sweep.start + discard`` are ignored.
    """
    if n_bins < 2:
        raise DomainError("n_bins must be >= 2")
    if not sweep.is_sweep:
        raise DomainError("frequency response needs a chirp excitation")
    t = ts.t
    u = ts[input_channel]
    y = ts[output_channel]
    t_lo = max(t[0], sweep.start + discard)
    t_hi = min(t[-1], sweep.start + sweep.T_w)
    w_lo, w_hi = float(sweep.frequency(t_lo)), float(sweep.frequency(t_hi))
    if omega_range is not None:
        w_lo, w_hi = max(w_lo, omega_range[0]), min(w_hi, omega_range[1])
    if w_hi <= w_lo:
        raise DomainError("record does not cover the requested frequency band")
    width = 2.0 * (w_hi - w_lo) / (n_bins + 1)
    phi_all = sweep.phase(t)
    omega = np.empty(n_bins)
    mag = np.empty(n_bins)
    ph = np.empty(n_bins)
    for i in range(n_bins):
        a = w_lo + 0.5 * width * i
        b = a + width
        ta, tb = sweep.time_at(a), sweep.time_at(b)
        sel = (t >= ta) & (t <= tb)
        if sel.sum() < 8:
            raise DomainError(f"window {i} holds fewer than 8 samples; use fewer bins or a slower sweep")
        cu = _sine_fit(phi_all[sel], u[sel])
        cy = _sine_fit(phi_all[sel], y[sel])
        if abs(cu) < 1e-12:
            raise UndefinedRatioError(f"input amplitude vanishes in window centred at {0.5 * (a + b):g} rad/s")
        ratio = cy / cu
        omega[i] = 0.5 * (a + b)
        mag[i] = abs(ratio)
        ph[i] = np.angle(ratio)
    return FrequencyResponse(omega, mag, np.unwrap(ph), input_channel, output_channel)


def first_peak(fr: FrequencyResponse, prominence=0.01):
    """Lowest-frequency resonant peak: ``(omega, magnitude)``.

    ``prominence`` is relative to the largest magnitude in the record.
    """
    idx, _ = find_peaks(fr.magnitude, prominence=prominence * fr.magnitude.max())
    if idx.size == 0:
        raise DomainError("no resonant peak inside the swept band")
    i = idx[0]
    return float(fr.omega[i]), float(fr.magnitude[i])
