from __future__ import annotations

import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from sindyloop.errors import DegenerateRange, InvalidTrajectory
from sindyloop.grammar import template_from_strings
from sindyloop.regress import FittedModel, Trajectory
from sindyloop.simulate import Outcome, SimConfig, integrate, score_rollout


def model(eqs, coefs, n_inputs=0):
    return FittedModel(template_from_strings(eqs, n_inputs), tuple(tuple(c) for c in coefs))


OSC = model([["x1"], ["x0"]], [[1.0], [-1.0]])


def test_harmonic_endpoint():
    r = integrate(OSC, [1.0, 0.0], np.linspace(0, 2 * math.pi, 50))
    assert r.completed
    assert abs(r.states[-1, 0] - 1.0) < 1e-6
    assert abs(r.states[-1, 1]) < 1e-6


def test_exponential_decay_endpoint():
    r = integrate(model([["x0"]], [[-1.0]]), [1.0], np.linspace(0, 1, 11))
    assert r.states[-1, 0] == pytest.approx(math.exp(-1), abs=1e-6)
    assert r.states[-1, 0] == pytest.approx(0.367879, abs=1e-6)


def test_finite_time_blowup_diverges():
    r = integrate(model([["x0^2"]], [[1.0]]), [1.0], np.linspace(0, 1.5, 31))
    assert r.outcome is Outcome.DIVERGED
    assert r.states is None
    # analytic solution 1/(1-t) is finite before t = 1
    assert r.failed_at is not None and r.failed_at < 1.0 + 1e-9


def test_dense_output_matches_scipy_reference():
    m = model([["x1"], ["x0", "x1", "x0^3"]], [[1.0], [-1.0, -0.2, -0.5]])
    times = np.linspace(0, 10, 201)
    ours = integrate(m, [1.0, 0.0], times)
    ref = solve_ivp(
        lambda t, y: [y[1], -y[0] - 0.2 * y[1] - 0.5 * y[0] ** 3], (0, 10), [1.0, 0.0],
        t_eval=times, rtol=1e-12, atol=1e-12, method="DOP853",
    )
    np.testing.assert_allclose(ours.states, ref.y.T, atol=2e-6)


def test_tolerance_convergence():
    times = np.linspace(0, 2 * math.pi, 20)
    loose = integrate(OSC, [1.0, 0.0], times, cfg=SimConfig(rtol=1e-6, atol=1e-8))
    tight = integrate(OSC, [1.0, 0.0], times, cfg=SimConfig(rtol=5e-7, atol=5e-9))
    loose_err = abs(loose.states[-1, 0] - 1.0)
    assert abs(tight.states[-1, 0] - loose.states[-1, 0]) <= max(loose_err, 1e-9) * 1.5


def test_energy_drift_ten_periods():
    times = np.linspace(0, 20 * math.pi, 400)
    r = integrate(OSC, [1.0, 0.0], times)
    energy = r.states[:, 0] ** 2 + r.states[:, 1] ** 2
    assert np.max(np.abs(energy - 1.0)) < 1e-4


def test_deterministic_bitwise():
    times = np.linspace(0, 5, 80)
    a = integrate(OSC, [0.3, 0.1], times)
    b = integrate(OSC, [0.3, 0.1], times)
    assert np.array_equal(a.states, b.states) and a.n_steps == b.n_steps


def test_zero_order_hold_inputs():
    # x' = u with u held per sample: x is the exact left Riemann sum of u
    times = np.linspace(0, 1, 11)
    u = np.where(times < 0.5, 1.0, -2.0)[:, None]
    r = integrate(model([["u0"]], [[1.0]], n_inputs=1), [0.0], times, inputs=u)
    expected = np.concatenate([[0.0], np.cumsum(u[:-1, 0] * 0.1)])
    np.testing.assert_allclose(r.states[:, 0], expected, atol=1e-12)


def test_timeout_is_an_outcome():
    def slow(t, x, u):
        time.sleep(0.03)
        return [-x[0]]

    r = integrate(slow, [1.0], np.linspace(0, 10, 5), cfg=SimConfig(timeout=0.1))
    assert r.outcome is Outcome.TIMEOUT


def test_step_budget_reports_stiffness_failure():
    r = integrate(model([["x0"]], [[-1e7]]), [1.0], np.linspace(0, 1, 5), cfg=SimConfig(max_steps=200))
    assert r.outcome is Outcome.STIFFNESS_FAILURE


def test_domain_fault_becomes_divergence():
    # x decreases to 0 in finite time, where log leaves its domain
    r = integrate(model([["log(x0)"]], [[5.0]]), [0.9], np.linspace(0, 2, 10))
    assert r.outcome is Outcome.DIVERGED


def test_bad_times_rejected():
    with pytest.raises(InvalidTrajectory):
        integrate(OSC, [1.0, 0.0], [0.0, 1.0, 0.5])


def test_simconfig_validation():
    with pytest.raises(ValueError):
        SimConfig(timeout=0.05)
    with pytest.raises(ValueError):
        SimConfig(rtol=0)


def _osc_traj(n=200):
    t = np.linspace(0, 10, n)
    return Trajectory(t, np.column_stack([np.cos(t), -np.sin(t)]), int(0.7 * n))


def test_score_rollout_self_consistency():
    r = score_rollout(OSC, _osc_traj())
    assert r.completed and r.max_nrmse < 1e-3
    assert r.max_nrmse == max(r.nrmse)


def test_score_rollout_blowup_is_infinite():
    tr = Trajectory(np.linspace(0, 3, 100), np.linspace(1, 2, 100), 50)
    r = score_rollout(model([["x0^2"]], [[5.0]]), tr)
    assert not r.completed and r.max_nrmse == math.inf and r.nrmse == (math.inf,)


def test_score_rollout_constant_test_segment():
    x = np.concatenate([np.linspace(0, 1, 70), np.ones(30)])
    tr = Trajectory(np.linspace(0, 1, 100), x, 70)
    with pytest.raises(DegenerateRange):
        score_rollout(model([["x0"]], [[0.0]]), tr)


def test_reference_sir_model_scores_near_reported(fixture_traj):
    m = model([["x0*x1"], ["x0*x1", "x1"]], [[-0.4], [0.4, -0.314]])
    r = score_rollout(m, fixture_traj("odebench31"))
    assert r.completed and r.max_nrmse < 1e-3


@given(st.floats(-2, 2), st.floats(-2, 2), st.sampled_from(["x0^2", "x0*x1", "sin(x1)", "exp(1*x0)", "x1^3"]))
def test_completed_results_are_finite(a, b, feat):
    m = model([["x1"], [feat]], [[a], [b]])
    r = integrate(m, [0.5, -0.5], np.linspace(0, 4, 40), cfg=SimConfig(timeout=5.0))
    assert r.completed == (r.states is not None)
    if r.completed:
        assert np.all(np.isfinite(r.states))
