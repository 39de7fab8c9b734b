import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pipeleak.errors import ContractError, DomainError, InfeasibleThetaError, TotalFailureError
from pipeleak.hydraulics import BoundaryMode, GridModel, LeakSpec, PipelineParams, steady_state
from pipeleak.linear_models import ThetaSingle
from pipeleak.optimize import fd_gradient, minimize_box
from pipeleak.pem import (
    PemProblem,
    condition_number,
    cost,
    gauss_newton_matrix,
    integrated_square,
    locate,
    minimize,
    perturbed_starts,
    prediction_error,
    rk4_transition,
)
from pipeleak.simulator import ChirpSignal, TimedLeak, TimeSeries, add_noise, integrate, simulate_pipeline

P = PipelineParams()


def test_box_bfgs_quadratic_oracle():
    target = np.array([0.3, -1.2, 2.0])
    res = minimize_box(lambda x: float(np.sum((x - target) ** 2 * [1, 10, 100])), np.zeros(3),
                       [-5] * 3, [5] * 3)
    np.testing.assert_allclose(res.x, target, atol=1e-8)
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))


def test_box_bfgs_active_bound():
    res = minimize_box(lambda x: float(np.sum((x - 3.0) ** 2)), np.zeros(2), [-1, -1], [1, 2])
    np.testing.assert_allclose(res.x, [1, 2], atol=1e-10)
    assert res.exit_reason == "bound-hit"


def test_box_bfgs_infinite_region():
    f = lambda x: math.inf if x[0] < 0.5 else float((x[0] - 0.6) ** 2 + x[1] ** 2)  # noqa: E731
    res = minimize_box(f, [2.0, 1.0], [-3, -3], [3, 3])
    np.testing.assert_allclose(res.x, [0.6, 0.0], atol=1e-6)


def test_fd_gradient_matches_analytic():
    f = lambda x: float(np.sin(x[0]) * x[1] ** 2 + np.exp(0.3 * x[2]))  # noqa: E731
    x = np.array([0.4, 1.3, -0.7])
    exact = np.array([np.cos(x[0]) * x[1] ** 2, 2 * np.sin(x[0]) * x[1], 0.3 * np.exp(0.3 * x[2])])
    g = fd_gradient(f, x, [-10] * 3, [10] * 3)
    np.testing.assert_allclose(g, exact, rtol=1e-6)
    # one-sided at a bound
    g = fd_gradient(f, x, [0.4, -10, -10], [10] * 3)
    assert g[0] == pytest.approx(exact[0], rel=1e-5)


def test_rk4_transition_reproduces_stepping():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4)) - 3 * np.eye(4)
    B = rng.normal(size=(4, 2))
    h = 0.05
    u = rng.normal(size=(11, 2))
    Phi, G0, G1 = rk4_transition(A, B, h, substeps=3)
    ut = lambda t: u[min(int(t / h), 9)] + (t / h - min(int(t / h), 9)) * (u[min(int(t / h), 9) + 1] - u[min(int(t / h), 9)])  # noqa: E731
    ref = integrate(lambda x, uu: A @ x + B @ uu, np.zeros(4), ut, h, 10 * h, substeps=3)
    x = np.zeros(4)
    for k in range(10):
        x = Phi @ x + G0 @ u[k] + G1 @ u[k + 1]
    np.testing.assert_allclose(x, ref.data[-1], rtol=1e-12, atol=1e-14)


def test_integrated_square_values():
    assert integrated_square(np.zeros((100, 2)), 0.01) == 0.0
    c = np.array([2.0, -3.0])
    e = np.tile(c, (1001, 1))
    assert integrated_square(e, 0.01) == pytest.approx(13.0 * 10.0, rel=1e-10)
    assert integrated_square(e, 0.01, weights=[1.0, 0.0]) == pytest.approx(40.0, rel=1e-10)


@pytest.fixture(scope="module")
def single_twin():
    """Noise-free two-section plant with a mid-pipe leak; the three-state model is exact up to linearisation."""
    ts = simulate_pipeline(P, 2, "head-head", ChirpSignal(15, 0.2, 0, 1e-3, 3000.0), ChirpSignal.constant(7.6),
                           1000.0, leaks=[TimedLeak(43.5, 4e-4)])
    eq = steady_state(GridModel.uniform(P, 2, [LeakSpec(43.5, 4e-4)]), (15.0, 7.6))
    return ts, ThetaSingle.from_physical(43.5, 4e-4, eq.x_bar[1]).as_array()


def _linear_data(problem, theta):
    """Replace the measured outputs by the noise-free linear model output at ``theta``."""
    zero = problem.data.columns(problem.data.labels).copy()
    blank = TimeSeries(problem.data.t0, problem.dt, problem.data.labels, zero)
    outs = ["Q_in", "Q_out"]
    for ch in outs:
        zero[:, blank.labels.index(ch)] = problem.steady[ch]
    yhat = -prediction_error(theta, PemProblem(blank, "single", P, theta0=theta)).data
    for j, ch in enumerate(outs):
        zero[:, blank.labels.index(ch)] += yhat[:, j]
    return TimeSeries(blank.t0, blank.dt, blank.labels, zero)


def test_self_consistency_recovers_generating_theta(single_twin):
    ts, th = single_twin
    data = _linear_data(PemProblem(ts, "single", P, theta0=th), th)
    prob = PemProblem(data, "single", P, theta0=th)
    assert cost(th, prob) < 1e-25
    res = minimize(prob)
    np.testing.assert_allclose(res.theta_hat, th, rtol=1e-6)


def test_zero_error_has_zero_cost(single_twin):
    ts, th = single_twin
    data = _linear_data(PemProblem(ts, "single", P, theta0=th), th)
    e = prediction_error(th, PemProblem(data, "single", P, theta0=th)).data
    assert np.max(np.abs(e)) < 1e-15


def test_noise_doubling_doubles_error_rms(single_twin):
    ts, th = single_twin
    ratios = []
    for seed in range(20):
        rms = []
        for std in (1e-5, 2e-5):
            noisy = add_noise(ts, {"Q_in": std, "Q_out": std}, seed=seed)
            prob = PemProblem(noisy, "single", P, theta0=th, steady_samples=1000)
            rms.append(np.sqrt(np.mean(prediction_error(th, prob).data ** 2)))
        ratios.append(rms[1] / rms[0])
    assert np.mean(ratios) == pytest.approx(2.0, rel=0.1)


def test_single_leak_twin_locates_leak(single_twin):
    ts, th = single_twin
    for factor in (0.8, 1.2):
        prob = PemProblem(ts, "single", P, theta0=th * factor)
        res = minimize(prob)
        assert all(b <= a for a, b in zip(res.cost_history, res.cost_history[1:]))
        assert res.V <= res.V0
        assert abs(1.0 / res.theta_hat[0] - 43.5) < 0.02 * P.L


def test_truth_beats_default_start(single_twin):
    ts, th = single_twin
    prob = PemProblem(ts, "single", P)
    assert cost(th, prob) < cost(prob.theta0, prob)


def test_default_start_is_feasible(single_twin):
    ts, _ = single_twin
    prob = PemProblem(ts, "single", P)
    assert 1.0 / prob.theta0[0] == pytest.approx(P.L / 2)
    assert math.isfinite(cost(prob.theta0, prob))


def test_locate_is_deterministic_and_single_start_matches_minimize(single_twin):
    ts, th = single_twin
    prob = PemProblem(ts, "single", P, theta0=th * 1.1)
    a = locate(prob, multistart=3, seed=5)
    b = locate(prob, multistart=3, seed=5)
    assert np.array_equal(a.best.theta_hat, b.best.theta_hat)
    assert a.best.V == min(r.V for r in a.runs)
    one = locate(prob, multistart=1)
    assert np.array_equal(one.best.theta_hat, minimize(prob).theta_hat)
    assert one.estimate.positions[0] == pytest.approx(1.0 / one.best.theta_hat[0])


def test_perturbed_starts_within_bounds(single_twin):
    ts, th = single_twin
    prob = PemProblem(ts, "single", P, theta0=th)
    starts = perturbed_starts(prob, 6, seed=1)
    assert np.array_equal(starts[0], th)
    lo, hi = prob.bounds
    for s in starts:
        assert np.all(s >= lo) and np.all(s <= hi)
    with pytest.raises(DomainError):
        perturbed_starts(prob, 0)


def test_problem_validation(single_twin):
    ts, th = single_twin
    with pytest.raises(DomainError):
        PemProblem(ts, "triple", P)
    with pytest.raises(ContractError):
        PemProblem(ts, "single", P, theta0=[0.03, 1e-4, 1.0])
    with pytest.raises(DomainError):
        PemProblem(ts, "single", P, theta0=[1e-6, 1e-4])
    heads_only = TimeSeries(ts.t0, ts.dt, ["H_in", "H_out"], ts.columns(["H_in", "H_out"]))
    with pytest.raises(ContractError):
        PemProblem(heads_only, "single", P)


def test_infeasible_start_raises(single_twin):
    ts, th = single_twin
    # a first segment as long as the pipe leaves nothing downstream of the leak
    prob = PemProblem(ts, "single", P, theta0=[1.0 / P.L, 1e-4], bounds=([0.5 / P.L, 0.0], [1.0 / P.L, 1e-2]))
    with pytest.raises(InfeasibleThetaError):
        minimize(prob)
    with pytest.raises(TotalFailureError):
        locate(prob, multistart=1)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(-1e-3, 1e-3), st.floats(-1e-3, 1e-3))
def test_cost_of_constant_error(frac, c1, c2):
    n = 201 + int(frac * 300)
    e = np.tile([c1, c2], (n, 1))
    T = (n - 1) * 0.01
    assert integrated_square(e, 0.01) == pytest.approx((c1 * c1 + c2 * c2) * T, rel=1e-10, abs=1e-30)


def test_gauss_newton_condition_number(single_twin):
    ts, th = single_twin
    prob = PemProblem(ts, "single", P, theta0=th)
    M = gauss_newton_matrix(th, prob)
    np.testing.assert_allclose(M, M.T, rtol=1e-12)
    assert 1.0 <= condition_number(M) < math.inf
    assert condition_number(np.zeros((2, 2))) == math.inf


@pytest.fixture(scope="module")
def two_leak_data():
    ts = simulate_pipeline(P, 20, BoundaryMode.HEAD_FLOW, ChirpSignal(19.0, 0.4, 0, 1e-2, 300.0),
                           ChirpSignal(9.08e-3, 0.1e-3, 0, 1e-2, 300.0), 300.0,
                           leaks=[TimedLeak(39.15, 0.4e-3), TimedLeak(65.25, 0.2e-3)])
    return ts.decimate(4)


def test_two_leak_cost_is_finite_and_truth_beats_start(two_leak_data):
    prob = PemProblem(two_leak_data, "double", P, theta0=[0.0234, 0.2016e-3, 0.0356, 0.01665, 0.0391e-6])
    truth = np.array([0.0255, 0.1113e-3, 0.0383, 0.0097, 0.0637e-3])
    assert cost(truth, prob) < cost(prob.theta0, prob)
    est = prediction_error(truth, prob)
    assert est.labels == ["e_Q_in", "e_H_out"]


def test_fixed_gain_predictor(single_twin):
    ts, th = single_twin
    base = PemProblem(ts, "single", P, theta0=th)
    zero_gain = PemProblem(ts, "single", P, theta0=th, gain=np.zeros((3, 2)))
    np.testing.assert_allclose(prediction_error(th, zero_gain).data, prediction_error(th, base).data,
                               rtol=1e-12, atol=1e-18)
    damped = PemProblem(ts, "single", P, theta0=th * 0.8, gain=np.full((3, 2), 0.5))
    assert cost(th * 0.8, damped) < cost(th * 0.8, PemProblem(ts, "single", P, theta0=th * 0.8))
