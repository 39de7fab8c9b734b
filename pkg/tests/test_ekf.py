import numpy as np
import pytest

from pipeleak.ekf import (
    EkfState,
    EkfTuning,
    ExtendedLeakModel,
    default_tuning,
    ekf_rhs,
    initial_estimate,
    kalman_gain,
    riccati_rhs,
    run_ekf,
)
from pipeleak.errors import ContractError, DomainError, FilterDivergenceError
from pipeleak.hydraulics import GridModel, LeakSpec, PipelineParams, steady_state
from pipeleak.simulator import ChirpSignal, TimedLeak, TimeSeries, add_noise, integrate, simulate_pipeline

P = PipelineParams()
H_IN = ChirpSignal(15.0, 1.0, 0.0, 1e-4, 10000.0)
H_OUT = ChirpSignal.constant(7.6)


@pytest.fixture(scope="module")
def two_section_run():
    """Data from a plant identical to the filter model (leak at mid-pipe)."""
    ts = simulate_pipeline(P, 2, "head-head", H_IN, H_OUT, 500.0, leaks=[TimedLeak(43.5, 4e-4)])
    eq = steady_state(GridModel.uniform(P, 2, [LeakSpec(43.5, 4e-4)]), (15.0, 7.6))
    return ts, np.concatenate([eq.x_bar, [43.5, 4e-4]])


def test_gain_identity():
    np.testing.assert_array_equal(kalman_gain(np.eye(3), np.eye(3), np.eye(3)), np.eye(3))


def test_scalar_riccati_solution():
    ts = integrate(lambda p, u: riccati_rhs(p.reshape(1, 1), 0.0, 1.0, 1.0, 0.0, 0.0).ravel(),
                   [1.0], None, 0.01, 10.0)
    assert np.max(np.abs(ts.data[:, 0] - 1.0 / (1.0 + ts.t))) < 1e-6


def test_pure_prediction_when_output_matches():
    model = ExtendedLeakModel(P, 1)
    x = np.array([0.0112, 12.9, 0.0098, 39.15, 4e-4])
    tuning = default_tuning(P)
    dx, _ = ekf_rhs(EkfState(x, tuning.P0), (15.0, 7.6), model.h(x), tuning, model)
    np.testing.assert_array_equal(dx, model.f(x, (15.0, 7.6)))


def test_riccati_rhs_symmetric():
    model = ExtendedLeakModel(P, 1)
    x = np.array([0.0112, 12.9, 0.0098, 39.15, 4e-4])
    tuning = default_tuning(P)
    _, dP = ekf_rhs(EkfState(x, tuning.P0), (15.0, 7.6), model.h(x), tuning, model)
    assert np.max(np.abs(dP - dP.T)) <= 1e-10 * np.abs(dP).max()


def test_non_positive_covariance_is_divergence():
    model = ExtendedLeakModel(P, 1)
    x = np.array([0.0112, 12.9, 0.0098, 39.15, 4e-4])
    tuning = default_tuning(P)
    bad = -np.eye(5)
    with pytest.raises(FilterDivergenceError):
        ekf_rhs(EkfState(x, bad, t=3.0), (15.0, 7.6), model.h(x), tuning, model)


def test_tuning_validation():
    good = default_tuning(P)
    assert good.alpha == 0.3
    with pytest.raises(DomainError):
        EkfTuning(0.0, good.W, good.R, good.P0)
    with pytest.raises(DomainError):
        EkfTuning(0.3, -good.W, good.R, good.P0)
    with pytest.raises(DomainError):
        EkfTuning(0.3, good.W, np.zeros((2, 2)), good.P0)
    with pytest.raises(DomainError):
        EkfTuning(0.3, good.W, good.R, good.P0 + np.triu(np.ones((5, 5)), 1))
    with pytest.raises(ContractError):
        EkfTuning(0.3, np.eye(3), good.R, good.P0)


def test_projection_clamps_leak_states():
    model = ExtendedLeakModel(P, 1)
    x, hit = model.project([0.01, 12.0, 0.01, 200.0, -1.0])
    assert hit
    assert x[3] == pytest.approx(0.99 * P.L) and x[4] == 0.0
    _, hit = model.project([0.01, 12.0, 0.01, 40.0, 1e-4])
    assert not hit


def test_fixed_point_at_truth(two_section_run):
    ts, x_true = two_section_run
    traj = run_ekf(TimeSeries(0.0, ts.dt, ts.labels, ts.data[:30001]), x_true, default_tuning(P), P)
    assert np.max(np.abs(traj.positions[:, 0] - 43.5)) < 1e-6 * P.L


def test_compiled_and_reference_filters_agree(two_section_run):
    ts, x_true = two_section_run
    short = TimeSeries(0.0, ts.dt, ts.labels, ts.data[:201])
    x0 = x_true.copy()
    x0[3], x0[4] = 30.0, 2e-4
    tuning = default_tuning(P)
    a = run_ekf(short, x0, tuning, P)
    b = run_ekf(short, x0, tuning, P, engine="python")
    c = run_ekf(short, x0, tuning, P, engine="python-fd")
    np.testing.assert_allclose(a.x_hat, b.x_hat, rtol=1e-9, atol=1e-14)
    np.testing.assert_allclose(a.P_diag, b.P_diag, rtol=1e-8, atol=1e-20)
    np.testing.assert_allclose(c.x_hat, b.x_hat, rtol=1e-5, atol=1e-10)


def test_innovations_are_white_with_matched_model(two_section_run):
    ts, x_true = two_section_run
    noisy = add_noise(ts, {"Q_in": 1e-5, "Q_out": 1e-5}, seed=3)
    tuning = default_tuning(P, meas_std=1e-5)
    traj = run_ekf(noisy, x_true, tuning, P)
    assert traj.innovations.shape[0] >= 1e4
    for stats in traj.innovation_stats(tuning.R):
        assert abs(stats["lag1"]) < 0.1


def test_twin_experiment_midpoint_leak():
    ts = simulate_pipeline(P, 20, "head-head", H_IN, H_OUT, 2000.0, leaks=[TimedLeak(P.L / 2, 4e-4)])
    x0 = initial_estimate(P, ts, [P.L / 4])
    traj = run_ekf(ts, x0, default_tuning(P), P)
    assert abs(traj.positions[-1, 0] - P.L / 2) < 0.02 * P.L


def test_two_leak_filter_runs():
    ts = simulate_pipeline(P, 20, "head-head", H_IN, H_OUT, 20.0,
                           leaks=[TimedLeak(39.15, 4e-4), TimedLeak(65.25, 2e-4)])
    x0 = initial_estimate(P, ts, [30.0, 60.0], n_leaks=2)
    traj = run_ekf(ts, x0, default_tuning(P, n_leaks=2), P, n_leaks=2)
    assert traj.positions.shape == (len(ts), 2)
    assert np.all(np.diff(traj.positions, axis=1) > 0)


def test_non_finite_data_is_divergence(two_section_run):
    ts, x_true = two_section_run
    data = ts.data[:100].copy()
    data[50, ts.labels.index("Q_in")] = np.nan
    with pytest.raises(FilterDivergenceError) as info:
        run_ekf(TimeSeries(0.0, ts.dt, ts.labels, data), x_true, default_tuning(P), P)
    assert info.value.time is not None


def test_run_ekf_argument_checks(two_section_run):
    ts, x_true = two_section_run
    with pytest.raises(ContractError):
        run_ekf(ts, x_true[:4], default_tuning(P), P)
    bad = x_true.copy()
    bad[3] = P.L + 1
    with pytest.raises(DomainError):
        run_ekf(ts, bad, default_tuning(P), P)
    with pytest.raises(ContractError):
        run_ekf(TimeSeries(0.0, 0.01, ["H_in", "Q_in"], np.ones((5, 2))), x_true, default_tuning(P), P)
