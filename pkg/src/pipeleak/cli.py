"""``pipeleak`` command line: simulate, freq, locate-ekf, locate-pem.

Exit codes: 0 success, 2 configuration or usage error, 3 simulation
divergence, 4 estimation failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ScenarioConfig, load_config
from .detection import default_threshold, detect, flow_residual
from .ekf import default_tuning, initial_estimate, run_ekf
from .errors import (
    ContractError,
    ConvergenceError,
    DivergenceError,
    DomainError,
    FilterDivergenceError,
    StallError,
    TotalFailureError,
)
from .files import read_timeseries, write_gnuplot, write_json, write_table, write_timeseries
from .pem import PemProblem, locate
from .simulator import add_noise, first_peak, frequency_response, simulate_pipeline

log = logging.getLogger("pipeleak")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_ESTIMATION = 4

MEASURED = ["H_in", "H_out", "Q_in", "Q_out"]


def _seeds(seed: int):
    """Independent streams for measurement noise and multistart draws."""
    noise, starts = np.random.SeedSequence(seed).spawn(2)
    return noise, starts


def _truth(cfg: ScenarioConfig, n_sections=None, leaks=None):
    return simulate_pipeline(
        cfg.pipeline, cfg.n_sections if n_sections is None else n_sections, cfg.mode,
        cfg.inlet, cfg.outlet, cfg.horizon, cfg.dt, cfg.leaks if leaks is None else leaks,
    )


def _noise_level(cfg: ScenarioConfig) -> float:
    return math.hypot(cfg.noise.get("Q_in", 0.0), cfg.noise.get("Q_out", 0.0))


def _threshold(cfg: ScenarioConfig, dt: float) -> float:
    if cfg.detection.threshold is not None:
        return cfg.detection.threshold
    ref = simulate_pipeline(cfg.pipeline, cfg.n_sections, cfg.mode, cfg.inlet, cfg.outlet,
                            cfg.horizon, dt, leaks=())
    window = max(1, int(round(cfg.detection.window / dt)))
    return default_threshold(flow_residual(ref), window, _noise_level(cfg))


def _detection(cfg, ts):
    return detect(ts, _threshold(cfg, ts.dt), cfg.detection.window).as_dict()


def cmd_simulate(cfg: ScenarioConfig, out: Path, gnuplot: bool, timings: dict):
    t0 = time.perf_counter()
    ts = _truth(cfg)
    timings["simulate"] = time.perf_counter() - t0
    if any(v > 0 for v in cfg.noise.values()):
        noise_seed, _ = _seeds(cfg.seed)
        ts = add_noise(ts, cfg.noise, noise_seed)
    labels = MEASURED + [lb for lb in ts.labels if lb.startswith("Q_leak")]
    csv = write_timeseries(out / "measurements.csv", ts, labels)
    t0 = time.perf_counter()
    det = _detection(cfg, ts)
    timings["detection"] = time.perf_counter() - t0
    report = {
        "command": "simulate",
        "scenario": cfg.echo(),
        "samples": len(ts),
        "residual": det,
        "leak_outflow_final": {lb: float(ts[lb][-1]) for lb in labels if lb.startswith("Q_leak")},
        "files": {"measurements": csv.name},
    }
    write_json(out / "report.json", report)
    if gnuplot:
        write_gnuplot(out / "measurements.gp", csv, "t", ["Q_in", "Q_out"], ylabel="flow [m3/s]",
                      title="boundary flows")
    return report


def cmd_freq(cfg: ScenarioConfig, out: Path, gnuplot: bool, timings: dict):
    sweep = cfg.inlet if cfg.inlet.is_sweep else cfg.outlet
    if not sweep.is_sweep:
        raise ConfigError("frequency sweep required: set a chirp excitation on the inlet or outlet", "excitation")
    fc = cfg.freq
    variants = [("", None)]
    if fc.compare_leaks:
        variants = [("_leak", None), ("_tight", [])]
    tables = []
    t0 = time.perf_counter()
    for n_s in fc.n_sections:
        for suffix, leaks in variants:
            ts = _truth(cfg, n_sections=n_s, leaks=leaks)
            fr = frequency_response(ts, fc.input, fc.output, sweep, n_bins=fc.n_bins, discard=fc.discard,
                                    omega_range=fc.omega_range)
            name = f"freq_ns{n_s}{suffix}.csv"
            write_table(out / name, {"omega": fr.omega, "magnitude": fr.magnitude, "phase": fr.phase},
                        {"omega": "rad/s", "magnitude": "-", "phase": "rad"})
            try:
                w_peak, m_peak = first_peak(fr)
            except DomainError:
                w_peak = m_peak = None
            tables.append({"file": name, "n_sections": n_s, "leaks": leaks is None and bool(cfg.leaks),
                           "first_peak_omega": w_peak, "first_peak_magnitude": m_peak})
    timings["freq"] = time.perf_counter() - t0
    report = {"command": "freq", "scenario": cfg.echo(), "input": fc.input, "output": fc.output, "tables": tables}
    write_json(out / "report.json", report)
    if gnuplot:
        lines = ["set datafile separator ','", "set logscale y", "set xlabel 'omega [rad/s]'",
                 f"set ylabel '|{fc.output}/{fc.input}|'", "set key outside"]
        plots = ", \\\n     ".join(f"'{t['file']}' using 1:2 with lines title '{t['file'][:-4]}'" for t in tables)
        lines += [f"plot {plots}", "pause mouse close"]
        (out / "freq.gp").write_text("\n".join(lines) + "\n")
    return report


def _load_data(path):
    if path is None:
        raise ConfigError("this command needs --data", "--data")
    try:
        ts = read_timeseries(path)
    except OSError as exc:
        raise ConfigError(f"cannot read data: {exc.strerror}", str(path)) from None
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    return ts


def cmd_locate_ekf(cfg: ScenarioConfig, data: Path, out: Path, gnuplot: bool, timings: dict):
    ts = _load_data(data)
    ts.columns(MEASURED)
    tuning = default_tuning(cfg.pipeline, 1, alpha=cfg.ekf.alpha, meas_std=cfg.ekf.meas_std)
    x0 = initial_estimate(cfg.pipeline, ts, cfg.ekf.initial_positions, 1)
    t0 = time.perf_counter()
    traj = run_ekf(ts, x0, tuning, cfg.pipeline, 1, substeps=cfg.ekf.substeps)
    timings["ekf"] = time.perf_counter() - t0
    csv = write_table(
        out / "ekf_trajectory.csv",
        {"t": traj.t, "z_f1": traj.positions[:, 0], "sigma_1": traj.sigmas[:, 0],
         "var_z_f1": traj.P_diag[:, -2], "var_sigma_1": traj.P_diag[:, -1],
         "innov_Q_in": traj.innovations[:, 0], "innov_Q_out": traj.innovations[:, 1]},
        {"t": "s", "z_f1": "m", "sigma_1": "m2", "var_z_f1": "m2", "var_sigma_1": "m4",
         "innov_Q_in": "m3/s", "innov_Q_out": "m3/s"},
    )
    report = {
        "command": "locate-ekf",
        "scenario": cfg.echo(),
        "data": {"file": Path(data).name, "samples": len(ts), "dt": ts.dt},
        "residual": _detection(cfg, ts),
        "estimate": {
            "position": float(traj.final_positions[0]),
            "sigma": float(traj.final_sigmas[0]),
            "position_variance": float(traj.P_diag[-1, -2]),
            "sigma_variance": float(traj.P_diag[-1, -1]),
        },
        "innovations": dict(zip(["Q_in", "Q_out"], traj.innovation_stats(tuning.R))),
        "projection_fraction": traj.projection_fraction,
        "files": {"trajectory": csv.name},
    }
    write_json(out / "report.json", report)
    if gnuplot:
        write_gnuplot(out / "ekf_trajectory.gp", csv, "t", ["z_f1"], ylabel="position [m]",
                      title="leak position estimate")
    return report


def cmd_locate_pem(cfg: ScenarioConfig, data: Path, out: Path, gnuplot: bool, timings: dict):
    ts = _load_data(data)
    pc = cfg.pem
    if pc.decimate > 1:
        ts = ts.decimate(pc.decimate)
    steady = max(1, int(np.sum(ts.t < cfg.excitation_start)))
    problem = PemProblem(ts, pc.model, cfg.pipeline, pc.theta0, steady_samples=steady)
    if pc.weights == "variance":
        var = problem.y.var(axis=0)
        problem.output_weights = 1.0 / np.where(var > 0, var, 1.0)
    _, start_seed = _seeds(cfg.seed)
    t0 = time.perf_counter()
    res = locate(problem, pc.multistart, seed=start_seed, spread=pc.spread, max_iter=pc.max_iter)
    timings["pem"] = time.perf_counter() - t0
    best = res.best
    csv = write_table(out / "pem_cost.csv",
                      {"iteration": np.arange(len(best.cost_history)), "cost": best.cost_history},
                      {"iteration": "-", "cost": "-"})
    est = res.estimate
    report = {
        "command": "locate-pem",
        "scenario": cfg.echo(),
        "data": {"file": Path(data).name, "samples": len(ts), "dt": ts.dt, "steady_samples": steady},
        "residual": _detection(cfg, ts),
        "model": pc.model,
        "theta0": problem.theta0,
        "theta_hat": best.theta_hat,
        "positions": list(est.positions),
        "loss_of_flow": {"theta": list(est.theta_loss), "sigma": est.sigma, "outflow": est.outflow},
        "cost": {"initial": best.V0, "final": best.V, "grad_norm": best.grad_norm},
        "exit_reason": best.exit_reason,
        "iterations": best.n_iter,
        "starts": [{"theta0": r.theta0, "theta_hat": r.theta_hat, "cost": r.V, "exit_reason": r.exit_reason}
                   for r in res.runs],
        "failed_starts": res.failures,
        "files": {"cost": csv.name},
    }
    write_json(out / "report.json", report)
    if gnuplot:
        write_gnuplot(out / "pem_cost.gp", csv, "iteration", ["cost"], ylabel="cost", logy=True,
                      title="prediction-error cost")
    return report


def build_parser():
    ap = argparse.ArgumentParser(prog="pipeleak", description="Pipeline leak simulation and localization")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("simulate", "simulate the truth pipeline and write boundary measurements"),
        ("freq", "frequency response tables from chirp runs"),
        ("locate-ekf", "single-leak localization with the extended Kalman filter"),
        ("locate-pem", "leak localization with the prediction-error method"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="scenario JSON file")
        p.add_argument("--data", help="measurement CSV (locate commands)")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--gnuplot", action="store_true", help="also write a gnuplot script")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


COMMANDS = {
    "simulate": lambda cfg, args, out, timings: cmd_simulate(cfg, out, args.gnuplot, timings),
    "freq": lambda cfg, args, out, timings: cmd_freq(cfg, out, args.gnuplot, timings),
    "locate-ekf": lambda cfg, args, out, timings: cmd_locate_ekf(cfg, args.data, out, args.gnuplot, timings),
    "locate-pem": lambda cfg, args, out, timings: cmd_locate_pem(cfg, args.data, out, args.gnuplot, timings),
}


def _fail(exc, code):
    # straight to stderr so diagnostics survive any logging configuration
    print(f"pipeleak: error: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="pipeleak: %(levelname)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("must be >= 0", "--seed")
            cfg = replace(cfg, seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        timings = {}
        COMMANDS[args.command](cfg, args, out, timings)
        for step, seconds in timings.items():
            log.info("%s: %.2f s", step, seconds)
        log.info("wrote %s", out / "report.json")
        write_json(out / "timings.json", {k: round(v, 3) for k, v in timings.items()})
    except (ConfigError, ContractError, DomainError) as exc:
        return _fail(exc, EXIT_CONFIG)
    except (DivergenceError, ConvergenceError) as exc:
        return _fail(exc, EXIT_DIVERGENCE)
    except (FilterDivergenceError, TotalFailureError, StallError) as exc:
        return _fail(exc, EXIT_ESTIMATION)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
