"""Scenario configuration: a single JSON document, validated before any run."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import PipeleakError
from .hydraulics import BoundaryMode, PipelineParams
from .pem import default_bounds
from .simulator import ChirpSignal, TimedLeak

SCHEMA_VERSION = 1
CHANNELS = ("H_in", "H_out", "Q_in", "Q_out")


class ConfigError(PipeleakError, ValueError):
    """Invalid scenario file; ``where`` names the offending field or line."""

    def __init__(self, message, where=None):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


@dataclass
class DetectionConfig:
    window: float = 10.0
    threshold: float | None = None


@dataclass
class EkfConfig:
    alpha: float = 0.3
    initial_positions: list = field(default_factory=lambda: [43.5])
    meas_std: float = 1e-5
    substeps: int | None = None


@dataclass
class PemConfig:
    model: str = "double"
    theta0: list | None = None
    multistart: int = 1
    decimate: int = 1
    spread: float = 1.0
    max_iter: int = 500
    weights: str = "none"


@dataclass
class FreqConfig:
    n_sections: list = field(default_factory=lambda: [22])
    compare_leaks: bool = False
    n_bins: int = 200
    input: str = "H_in"
    output: str = "Q_out"
    discard: float = 0.0
    omega_range: list | None = None


@dataclass
class ScenarioConfig:
    pipeline: PipelineParams
    n_sections: int
    mode: BoundaryMode
    leaks: list
    inlet: ChirpSignal
    outlet: ChirpSignal
    horizon: float
    dt: float
    noise: dict
    seed: int
    detection: DetectionConfig
    ekf: EkfConfig
    pem: PemConfig
    freq: FreqConfig
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def excitation_start(self) -> float:
        starts = [s.start for s in (self.inlet, self.outlet) if s.is_sweep]
        return min(starts) if starts else 0.0

    def echo(self) -> dict:
        """Normalised view of the scenario for reports."""
        return {
            "schema_version": SCHEMA_VERSION,
            "pipeline": asdict(self.pipeline),
            "truth": {"n_sections": self.n_sections, "boundary_mode": self.mode.value},
            "leaks": [{"position": lk.z_f, "sigma": lk.sigma, "onset": lk.onset} for lk in self.leaks],
            "excitation": {"inlet": _signal_dict(self.inlet), "outlet": _signal_dict(self.outlet)},
            "horizon": self.horizon,
            "dt": self.dt,
            "noise": dict(self.noise),
            "seed": self.seed,
            "detection": asdict(self.detection),
            "ekf": asdict(self.ekf),
            "pem": asdict(self.pem),
            "freq": asdict(self.freq),
        }


def _signal_dict(sig: ChirpSignal):
    if not sig.is_sweep:
        return {"type": "constant", "value": sig.base}
    return {"type": "chirp", "base": sig.base, "amplitude": sig.amp, "omega0": sig.omega0,
            "k": sig.k, "window": sig.T_w, "start": sig.start}


class _Reader:
    """Typed access to a JSON section with dotted-path error messages."""

    def __init__(self, data, path):
        if not isinstance(data, dict):
            raise ConfigError("expected an object", path)
        self.data = data
        self.path = path
        self.used = set()

    def _where(self, key):
        return f"{self.path}.{key}" if self.path else key

    def get(self, key, default=None, required=False):
        self.used.add(key)
        if key not in self.data or self.data[key] is None:
            if required:
                raise ConfigError("required field is missing", self._where(key))
            return default
        return self.data[key]

    def number(self, key, default=None, required=False, positive=False, minimum=None):
        value = self.get(key, default, required)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"expected a finite number, got {value!r}", self._where(key))
        if positive and value <= 0:
            raise ConfigError(f"must be > 0, got {value!r}", self._where(key))
        if minimum is not None and value < minimum:
            raise ConfigError(f"must be >= {minimum}, got {value!r}", self._where(key))
        return float(value)

    def integer(self, key, default=None, required=False, minimum=None):
        value = self.get(key, default, required)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", self._where(key))
        if minimum is not None and value < minimum:
            raise ConfigError(f"must be >= {minimum}, got {value!r}", self._where(key))
        return value

    def section(self, key):
        return _Reader(self.get(key, {}), self._where(key))

    def finish(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigError(f"unknown field(s): {', '.join(extra)}", self.path or "<root>")


def _signal(r: _Reader, channel: str) -> ChirpSignal:
    kind = r.get("type", required=True)
    if kind == "constant":
        sig = ChirpSignal.constant(r.number("value", required=True))
    elif kind == "chirp":
        sig = ChirpSignal(
            base=r.number("base", required=True),
            amp=r.number("amplitude", required=True, positive=True),
            omega0=r.number("omega0", 0.0, minimum=0.0),
            k=r.number("k", 1e-4, positive=True),
            T_w=r.number("window", 10000.0, positive=True),
            start=r.number("start", 0.0, minimum=0.0),
        )
    else:
        raise ConfigError(f"type must be 'chirp' or 'constant', got {kind!r}", r._where("type"))
    r.finish()
    return sig


def parse_config(doc: dict) -> ScenarioConfig:
    """Validate a decoded JSON document and build a ScenarioConfig."""
    root = _Reader(doc, "")
    version = root.get("schema_version", required=True)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})", "schema_version")

    pr = root.section("pipeline")
    defaults = PipelineParams()
    pipeline = PipelineParams(**{k: pr.number(k, getattr(defaults, k), positive=True) for k in ("g", "L", "b", "phi", "f")})
    pr.finish()

    tr = root.section("truth")
    n_sections = tr.integer("n_sections", 20, minimum=2)
    mode_name = tr.get("boundary_mode", "head-head")
    try:
        mode = BoundaryMode(mode_name)
    except ValueError:
        raise ConfigError(f"must be 'head-head' or 'head-flow', got {mode_name!r}", "truth.boundary_mode") from None
    tr.finish()

    horizon = root.number("horizon", required=True, positive=True)
    dt = root.number("dt", 0.01, positive=True)
    if dt > horizon:
        raise ConfigError("dt exceeds the horizon", "dt")

    leaks_raw = root.get("leaks", [])
    if not isinstance(leaks_raw, list):
        raise ConfigError("expected a list", "leaks")
    leaks = []
    for i, item in enumerate(leaks_raw):
        lr = _Reader(item, f"leaks[{i}]")
        z = lr.number("position", required=True)
        sigma = lr.number("sigma", required=True, minimum=0.0)
        onset = lr.number("onset", 0.0, minimum=0.0)
        lr.finish()
        if not 0.0 < z < pipeline.L:
            raise ConfigError(f"position must lie in (0, {pipeline.L})", f"leaks[{i}].position")
        if onset >= horizon:
            raise ConfigError("onset must be before the end of the horizon", f"leaks[{i}].onset")
        leaks.append(TimedLeak(z, sigma, onset))

    ex = root.section("excitation")
    inlet = _signal(ex.section("inlet"), "inlet") if "inlet" in ex.data else None
    outlet = _signal(ex.section("outlet"), "outlet") if "outlet" in ex.data else None
    ex.used.update({"inlet", "outlet"})
    ex.finish()
    if inlet is None:
        raise ConfigError("required field is missing", "excitation.inlet")
    if outlet is None:
        raise ConfigError("required field is missing", "excitation.outlet")
    if mode is BoundaryMode.HEAD_FLOW and outlet.base <= 0:
        raise ConfigError("outlet flow must be positive", "excitation.outlet")

    nr = root.section("noise")
    noise = {}
    for ch in list(nr.data):
        if ch not in CHANNELS:
            raise ConfigError(f"unknown channel {ch!r}", "noise")
        noise[ch] = nr.number(ch, minimum=0.0)
    nr.finish()

    seed = root.integer("seed", 0, minimum=0)

    dr = root.section("detection")
    detection = DetectionConfig(dr.number("window", 10.0, positive=True), dr.number("threshold", None, minimum=0.0))
    dr.finish()

    er = root.section("ekf")
    positions = er.get("initial_positions", [0.5 * pipeline.L])
    if not isinstance(positions, list) or len(positions) != 1:
        raise ConfigError("expected a list with one position", "ekf.initial_positions")
    for z in positions:
        if isinstance(z, bool) or not isinstance(z, (int, float)) or not 0.01 * pipeline.L < z < 0.99 * pipeline.L:
            raise ConfigError("initial position must lie inside the pipe", "ekf.initial_positions")
    ekf = EkfConfig(er.number("alpha", 0.3, positive=True), [float(z) for z in positions],
                    er.number("meas_std", 1e-5, positive=True), er.integer("substeps", None, minimum=1))
    er.finish()

    pm = root.section("pem")
    model = pm.get("model", "double")
    if model not in ("single", "double"):
        raise ConfigError(f"must be 'single' or 'double', got {model!r}", "pem.model")
    theta0 = pm.get("theta0")
    if theta0 is not None:
        size = 2 if model == "single" else 5
        if not isinstance(theta0, list) or len(theta0) != size or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in theta0):
            raise ConfigError(f"expected a list of {size} numbers", "pem.theta0")
        lo, hi = default_bounds(model, pipeline.L)
        th = np.asarray(theta0, dtype=float)
        bad = np.nonzero((th < lo) | (th > hi))[0]
        if bad.size:
            j = int(bad[0])
            raise ConfigError(f"theta0[{j}] = {th[j]:g} outside [{lo[j]:g}, {hi[j]:g}]", "pem.theta0")
        theta0 = [float(v) for v in theta0]
    weights = pm.get("weights", "none")
    if weights not in ("none", "variance"):
        raise ConfigError(f"must be 'none' or 'variance', got {weights!r}", "pem.weights")
    pem = PemConfig(model, theta0, pm.integer("multistart", 1, minimum=1), pm.integer("decimate", 1, minimum=1),
                    pm.number("spread", 1.0, positive=True), pm.integer("max_iter", 500, minimum=1), weights)
    pm.finish()

    fr = root.section("freq")
    ns_list = fr.get("n_sections", [n_sections])
    if not isinstance(ns_list, list) or not ns_list or not all(
            isinstance(v, int) and not isinstance(v, bool) and v >= 2 for v in ns_list):
        raise ConfigError("expected a non-empty list of integers >= 2", "freq.n_sections")
    io = [fr.get("input", "H_in"), fr.get("output", "Q_out")]
    for key, ch in zip(("input", "output"), io):
        if ch not in CHANNELS:
            raise ConfigError(f"unknown channel {ch!r}", f"freq.{key}")
    omega_range = fr.get("omega_range")
    if omega_range is not None:
        if (not isinstance(omega_range, list) or len(omega_range) != 2
                or not all(isinstance(v, (int, float)) for v in omega_range) or omega_range[0] >= omega_range[1]):
            raise ConfigError("expected [low, high] with low < high", "freq.omega_range")
        omega_range = [float(v) for v in omega_range]
    compare = fr.get("compare_leaks", False)
    if not isinstance(compare, bool):
        raise ConfigError("expected true or false", "freq.compare_leaks")
    freq = FreqConfig(ns_list, compare, fr.integer("n_bins", 200, minimum=2), io[0], io[1],
                      fr.number("discard", 0.0, minimum=0.0), omega_range)
    fr.finish()

    root.finish()
    return ScenarioConfig(pipeline, n_sections, mode, leaks, inlet, outlet, horizon, dt, noise, seed,
                          detection, ekf, pem, freq, raw=doc)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    return parse_config(doc)
