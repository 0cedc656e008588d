import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switchlq.dynamics import FeedbackControl, OpenLoopControl, ZeroControl
from switchlq.instances import mark_averaged
from switchlq.lq import (
    discretization_allowance,
    estimate_cost,
    fundamental_relation_residual,
    optimality_experiment,
    path_statistics,
    value,
)
from switchlq.mpp import ConstantHazard, SwitchingLaw, TransitionKernel
from switchlq.regime_field import CoefficientSet, Grid
from switchlq.riccati import psd_tolerance, solve_riccati_direct


def still_law(n_marks=1):
    return SwitchingLaw(tuple(map(str, range(n_marks))), 0, ConstantHazard(0.0), 1.0, TransitionKernel.swap(n_marks))


def test_no_cost_data_costs_nothing(markov):
    inst, _ = markov
    t = inst.coeffs.tables
    c = CoefficientSet.per_mark(A=t["A"], B=t["B"], S=np.zeros_like(t["S"]), G=np.zeros_like(t["G"]), C=t["C"])
    est = estimate_cost(c, inst.law, ZeroControl(1), 0.0, inst.x, 500, 1e-2, 0, 1.0)
    assert est.mean == 0.0 and est.std_error == 0.0


def test_frozen_state_closed_form():
    s, g, x = 0.7, 1.3, np.array([1.0, -2.0])
    c = CoefficientSet.per_mark(A=[np.zeros((2, 2))], B=[np.zeros((2, 1))], S=[s * np.eye(2)], G=[g * np.eye(2)])
    est = estimate_cost(c, still_law(), ZeroControl(1), 0.0, x, 200, 0.01, 0, 2.0)
    assert est.mean == pytest.approx((s * 2.0 + g) * 5.0, rel=1e-12)
    assert est.std_error == pytest.approx(0.0, abs=1e-12)


def test_breakdown_sums_to_mean(nonmarkov):
    inst, sol = nonmarkov
    est = estimate_cost(inst.coeffs, inst.law, FeedbackControl(sol), 0.0, inst.x, 2000, 1e-2, 3, 1.0)
    assert abs(est.running + est.terminal + est.energy - est.mean) <= 1e-10
    assert est.mean >= -3 * est.std_error
    assert est.n_paths == 2000 and est.samples.size == 2000


def test_feedback_penalty_vanishes_pathwise(markov):
    inst, sol = markov
    stats = path_statistics(inst.coeffs, inst.law, FeedbackControl(sol), 0.0, inst.x, 1.0, 1e-2, 300, 1,
                            relation=sol)
    assert np.abs(stats["penalty"]).max() <= 1e-28


class TestValue:
    def test_zero_state(self, markov):
        _, sol = markov
        assert value(sol, 0.3, 0.2, 1, [0.0]) == 0.0

    def test_no_cost_data(self):
        c = CoefficientSet.per_mark(A=[[[0.3]]], B=[[[1.0]]], S=[[[0.0]]], G=[[[0.0]]])
        sol = solve_riccati_direct(c, still_law(), Grid(1.0, 100))
        assert value(sol, 0.5, 0.5, 0, [3.0]) == 0.0

    def test_scalar(self, scalar):
        inst, sol = scalar
        assert value(sol, 0.0, 0.0, 0, [1.0]) == pytest.approx(0.5, abs=2 * inst.grid.dt)

    @settings(max_examples=30, deadline=None)
    @given(x=st.floats(-5, 5), t=st.floats(0, 1), e=st.floats(0, 1), i=st.integers(0, 1))
    def test_nonnegative(self, nonmarkov, x, t, e, i):
        inst, sol = nonmarkov
        assert value(sol, t, e, i, [x]) >= -psd_tolerance(inst.coeffs, inst.grid) * x * x


class TestFundamentalRelation:
    def test_feedback_reduces_to_value_check(self, markov):
        inst, sol = markov
        r = fundamental_relation_residual(sol, inst.coeffs, inst.law, 0.0, inst.x, FeedbackControl(sol), 4000, 2e-3, 5)
        assert r.penalty == 0.0
        assert abs(r.residual) <= 3 * r.std_error

    def test_perturbed_feedback_penalty(self, nonmarkov):
        inst, sol = nonmarkov
        ctrl = FeedbackControl(sol, perturbation=OpenLoopControl.constant(0.2))
        r = fundamental_relation_residual(sol, inst.coeffs, inst.law, 0.0, inst.x, ctrl, 4000, 2e-3, 6)
        assert r.penalty == pytest.approx(0.04, rel=1e-9)
        assert abs(r.residual) <= 3 * r.std_error
        assert r.cost > r.value

    def test_zero_control_scalar(self, scalar):
        inst, sol = scalar
        r = fundamental_relation_residual(sol, inst.coeffs, inst.law, 0.0, inst.x, ZeroControl(1), 200, 1e-3, 1)
        assert r.cost == pytest.approx(1.0)
        assert r.penalty == pytest.approx(0.5, abs=2e-3)
        assert r.allowance == pytest.approx(discretization_allowance(sol, 1e-3, inst.x))
        assert r.passed()


class TestOptimality:
    def test_empty_list(self, scalar):
        inst, sol = scalar
        rep = optimality_experiment(inst.coeffs, inst.law, sol, 0.0, inst.x, [], 200, 0)
        assert rep.comparisons == [] and len(rep.rows()) == 1 and rep.value_passed

    def test_scalar_dominance(self, scalar):
        inst, sol = scalar
        alts = [ZeroControl(1), FeedbackControl(sol, perturbation=OpenLoopControl.constant(0.1)),
                FeedbackControl(sol, perturbation=OpenLoopControl.constant(-0.1))]
        rep = optimality_experiment(inst.coeffs, inst.law, sol, 0.0, inst.x, alts, 500, 0)
        assert rep.passed
        assert all(c.strictly_cheaper for c in rep.comparisons)
        zero = rep.comparisons[0]
        assert zero.estimate.mean == pytest.approx(1.0)
        # perturbing the optimal feedback by eta costs about eta^2 T
        for c in rep.comparisons[1:]:
            assert c.gap == pytest.approx(0.01, abs=1e-3)

    def test_mark_blind_feedback_is_worse(self, markov):
        inst, sol = markov
        avg = mark_averaged(inst.coeffs)
        blind = solve_riccati_direct(avg, inst.law, inst.grid)
        assert np.ptp(blind.P.values[:, :, :, 0, 0], axis=2).max() < 1e-12
        rep = optimality_experiment(inst.coeffs, inst.law, sol, 0.0, inst.x, [FeedbackControl(blind, avg)], 4000, 2,
                                    dt_sim=2e-3)
        c = rep.comparisons[0]
        assert c.strictly_cheaper
        # common random numbers make the difference far sharper than either estimate
        assert c.gap_se < 0.5 * rep.feedback.std_error
