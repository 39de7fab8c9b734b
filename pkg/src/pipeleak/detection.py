"""Flow-imbalance residual and threshold test for leak presence."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .simulator import TimeSeries

THRESHOLD_FLOOR = 1e-7


def flow_residual(ts: TimeSeries) -> np.ndarray:
    """``r1 = Q_in - Q_out``."""
    q = ts.columns(["Q_in", "Q_out"])
    return q[:, 0] - q[:, 1]


def sliding_mean(x, n: int) -> np.ndarray:
    """Means of all length-``n`` windows (``n`` is clipped to the record length)."""
    x = np.asarray(x, dtype=float)
    n = max(1, min(int(n), x.size))
    c = np.concatenate(([0.0], np.cumsum(x)))
    return (c[n:] - c[:-n]) / n


def default_threshold(reference_r1, window: int, noise_std=0.0) -> float:
    """Three times the largest windowed mean of a leak-free, noise-free run.

    A noise allowance of ``3 * noise_std / sqrt(window)`` is added, and the
    result never drops below ``THRESHOLD_FLOOR``.
    """
    level = float(np.max(np.abs(sliding_mean(reference_r1, window))))
    return max(3.0 * level + 3.0 * noise_std / math.sqrt(max(window, 1)), THRESHOLD_FLOOR)


@dataclass
class Detection:
    detected: bool
    threshold: float
    max_window_mean: float
    first_alarm: float | None
    r1_mean: float
    r1_std: float
    r1_final: float

    def as_dict(self):
        return {
            "leak_detected": self.detected,
            "threshold": self.threshold,
            "max_window_mean_r1": self.max_window_mean,
            "first_alarm_time": self.first_alarm,
            "r1_mean": self.r1_mean,
            "r1_std": self.r1_std,
            "r1_final": self.r1_final,
        }


def detect(ts: TimeSeries, threshold: float, window_seconds: float) -> Detection:
    r1 = flow_residual(ts)
    n = max(1, int(round(window_seconds / ts.dt)))
    means = sliding_mean(r1, n)
    over = np.nonzero(means > threshold)[0]
    first = float(ts.t[over[0] + min(n, r1.size) - 1]) if over.size else None
    return Detection(bool(over.size), float(threshold), float(means.max()), first,
                     float(r1.mean()), float(r1.std()), float(r1[-1]))
