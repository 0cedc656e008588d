import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switchlq.dynamics import (
    FeedbackControl,
    OpenLoopControl,
    ZeroControl,
    moment_check,
    moment_constant,
    simulate_closed_loop,
    simulate_state,
)
from switchlq.exceptions import ModelError, SimulationError
from switchlq.instances import gbm_instance, markov_instance, nonmarkov_instance
from switchlq.lq import estimate_cost
from switchlq.mpp import ConstantHazard, SwitchingLaw, TransitionKernel
from switchlq.regime_field import CoefficientSet
from switchlq.riccati import solve_riccati_direct


def still_law():
    return SwitchingLaw(("0",), 0, ConstantHazard(0.0), 1.0, TransitionKernel.swap(1))


def test_determinism(markov):
    inst, sol = markov
    ctrl = FeedbackControl(sol)
    p1 = simulate_state(inst.coeffs, inst.law, ctrl, 0.0, inst.x, 1e-2, 77, 1.0)
    p2 = simulate_state(inst.coeffs, inst.law, ctrl, 0.0, inst.x, 1e-2, 77, 1.0)
    for name in ("times", "elapsed", "marks", "brownian_increments", "state", "control"):
        np.testing.assert_array_equal(getattr(p1, name), getattr(p2, name))
    assert p1.jumps == p2.jumps


def test_jump_alignment():
    inst = nonmarkov_instance(dt=1e-2)
    sol = solve_riccati_direct(inst.coeffs, inst.law, inst.grid)
    seen = 0
    for seed in range(5):
        p = simulate_closed_loop(inst.coeffs, inst.law, sol, 0.0, inst.x, 0.05, seed)
        assert set(p.jumps.times) <= set(p.times)
        for tj, mk in zip(p.jumps.times, p.jumps.marks):
            n = int(np.nonzero(p.times == tj)[0][0])
            # the step ending at the jump runs in the old regime, the next one in the new
            assert p.marks[n] == mk and p.elapsed[n] == 0.0
            assert p.marks[n - 1] != mk
            seen += 1
        # between jumps the elapsed time grows with slope one
        de, dt = np.diff(p.elapsed), np.diff(p.times)
        smooth = ~np.isin(p.times[1:], p.jumps.times)
        np.testing.assert_allclose(de[smooth], dt[smooth], atol=1e-12)
    assert seen > 0


def test_inert_feedback_matches_zero_control():
    inst = markov_instance(dt=1e-2)
    t = inst.coeffs.tables
    no_b = CoefficientSet.per_mark(A=t["A"], B=np.zeros_like(t["B"]), S=t["S"], G=t["G"], C=t["C"])
    sol = solve_riccati_direct(no_b, inst.law, inst.grid)
    a = simulate_closed_loop(no_b, inst.law, sol, 0.0, inst.x, 1e-2, 5)
    b = simulate_state(no_b, inst.law, ZeroControl(1), 0.0, inst.x, 1e-2, 5, 1.0)
    np.testing.assert_array_equal(a.state, b.state)


def test_scalar_closed_loop_path(scalar):
    inst, sol = scalar
    dt_sim = 1e-3
    p = simulate_closed_loop(inst.coeffs, inst.law, sol, 0.0, [1.0], dt_sim, 0)
    exact = (1 + (1 - p.times)) / 2.0
    np.testing.assert_allclose(p.state[:, 0], exact, atol=2 * dt_sim)


def test_recorded_control_replays(markov):
    inst, sol = markov
    p = simulate_closed_loop(inst.coeffs, inst.law, sol, 0.0, inst.x, 1e-2, 3)
    for n in range(p.control.shape[0]):
        P = sol.P.evaluate(p.times[n], p.elapsed[n], p.marks[n])
        B = inst.coeffs.tables["B"][p.marks[n]]
        np.testing.assert_allclose(p.control[n], -B.T @ P @ p.state[n], rtol=1e-14, atol=1e-15)


def test_sample_path_bookkeeping(markov):
    inst, sol = markov
    p = simulate_closed_loop(inst.coeffs, inst.law, sol, 0.25, [2.0], 0.1, 8)
    assert p.times[0] == 0.25 and p.times[-1] == pytest.approx(1.0)
    assert p.state.shape == (p.times.size, 1)
    assert p.control.shape == (p.times.size - 1, 1) == p.brownian_increments.shape


@pytest.mark.parametrize("c", [0.5, 1.0])
def test_gbm_second_moment(c):
    inst = gbm_instance(c=c)
    est = estimate_cost(
        CoefficientSet.per_mark(A=[[[0.0]]], B=[[[0.0]]], S=[[[0.0]]], G=[[[1.0]]], C=[[[[c]]]]),
        inst.law, ZeroControl(1), 0.0, [1.0], 10000, 1e-3, 21, 1.0)
    assert abs(est.mean - math.exp(c * c)) <= 3 * est.std_error


def test_open_loop_per_mark(markov):
    inst, _ = markov
    ctrl = OpenLoopControl(lambda t, e, i: np.full(np.shape(e) + (1,), [0.5, -0.5][i]), 1, 0.5)
    u = ctrl(np.zeros(4), np.zeros(4), np.array([0, 1, 1, 0]), np.ones((4, 1)))
    np.testing.assert_array_equal(u[:, 0], [0.5, -0.5, -0.5, 0.5])


def test_wrong_state_size(markov):
    inst, _ = markov
    with pytest.raises(ModelError):
        simulate_state(inst.coeffs, inst.law, ZeroControl(1), 0.0, [1.0, 2.0], 0.1, 0, 1.0)


def test_blow_up_detected():
    c = CoefficientSet.per_mark(A=[[[1e200]]], B=[[[0.0]]], S=[[[0.0]]], G=[[[0.0]]])
    with pytest.raises(SimulationError):
        simulate_state(c, still_law(), ZeroControl(1), 0.0, [1e200], 0.1, 0, 1.0)


class TestMoment:
    def test_zero_dynamics_exact(self):
        c = CoefficientSet.per_mark(A=[[[0.0]]], B=[[[0.0]]], S=[[[0.0]]], G=[[[0.0]]])
        r = moment_check(c, still_law(), ZeroControl(1), 0.0, [1.5], 200, 0, 1.0, dt_sim=0.1)
        assert r.sup_moment == 2.25 and r.std_error == 0.0 and r.passed

    def test_gbm_below_bound_and_adversarial_fails(self):
        inst = gbm_instance()
        r = moment_check(inst.coeffs, inst.law, ZeroControl(1), 0.0, [1.0], 10000, 1, 1.0, dt_sim=1e-2)
        assert np.isfinite(r.sup_moment) and r.passed
        assert r.constant == pytest.approx(moment_constant(inst.coeffs, 1.0))
        bad = moment_check(inst.coeffs, inst.law, ZeroControl(1), 0.0, [1.0], 10000, 1, 1.0, dt_sim=1e-2,
                           constant=0.5)
        assert not bad.passed

    def test_bounded_control_energy_enters_bound(self, markov):
        inst, _ = markov
        r = moment_check(inst.coeffs, inst.law, OpenLoopControl.constant(1.0), 0.0, inst.x, 500, 2, 1.0, dt_sim=1e-2)
        assert r.control_energy == pytest.approx(1.0)
        assert r.bound == pytest.approx(r.constant * 2.0)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), threads=st.integers(2, 4))
def test_thread_count_does_not_change_estimates(seed, threads):
    inst = markov_instance(dt=0.05)
    args = (inst.coeffs, inst.law, OpenLoopControl.constant(0.3), 0.0, inst.x, 10500, 0.05, seed, 1.0)
    assert estimate_cost(*args, threads=1) == estimate_cost(*args, threads=threads)
