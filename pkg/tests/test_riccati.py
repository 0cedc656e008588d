import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import markov_matrix_ode
from switchlq.exceptions import BoundError, ConvergenceError, GridError, PositivityError, StabilityError
from switchlq.instances import gbm_instance, markov_instance, scalar_benchmark, scalar_riccati_exact
from switchlq.lyapunov import LyapunovProblem, solve_lyapunov
from switchlq.mpp import MarkovHazard, SwitchingLaw, TransitionKernel
from switchlq.regime_field import CoefficientSet, Grid, field_distance
from switchlq.riccati import (
    apriori_bound,
    apriori_checks,
    contraction_constant,
    solve_riccati,
    solve_riccati_direct,
    solve_riccati_picard,
    step_size_delta,
)


def planar():
    """Two marks, n = 2, k = 1, one Brownian component."""
    A = [[[0.1, 0.3], [-0.2, 0.0]], [[-0.1, 0.0], [0.2, -0.1]]]
    B = [[[0.5], [0.2]], [[0.1], [0.4]]]
    C = [[[[0.1, 0.0], [0.0, 0.05]], [[0.0, 0.1], [0.0, 0.0]]]]
    S = [[[0.2, 0.05], [0.05, 0.1]], [[0.1, 0.0], [0.0, 0.0]]]
    G = [[[0.6, 0.1], [0.1, 0.3]], [[0.2, 0.0], [0.0, 0.5]]]
    coeffs = CoefficientSet.per_mark(A=A, B=B, S=S, G=G, C=C)
    law = SwitchingLaw(("x", "y"), 1, MarkovHazard([0.7, 1.2]), 1.2, TransitionKernel.swap(2))
    return coeffs, law


def test_scalar_all_nodes():
    inst = scalar_benchmark()
    sol = solve_riccati_direct(inst.coeffs, inst.law, inst.grid)
    exact = scalar_riccati_exact(inst.grid.times)
    np.testing.assert_allclose(sol.P.values[:, 0, 0, 0, 0], exact, atol=2 * inst.grid.dt)
    assert sol.value(0.0, 0.0, 0, [1.0]) == pytest.approx(0.5, abs=2 * inst.grid.dt)


def test_scalar_other_terminal():
    inst = scalar_benchmark(dt=1e-3, g=3.0)
    sol = solve_riccati_direct(inst.coeffs, inst.law, inst.grid)
    assert sol.P.values[0, 0, 0, 0, 0] == pytest.approx(3.0 / 4.0, abs=5 * inst.grid.dt * 3.0)


def test_markov_scalar_against_ode(markov):
    inst, sol = markov
    ref = markov_matrix_ode(inst.coeffs.tables, [1.0, 1.5], [[0, 1], [1, 0]], 1.0)
    for k in (0, 300, 700, 1000):
        np.testing.assert_allclose(sol.P.values[k, 0], ref(inst.grid.times[k]), atol=3e-3)
    assert np.ptp(sol.P.values, axis=1).max() < 1e-12


@pytest.mark.parametrize("backend", ["direct", "picard"])
def test_planar_against_ode(backend):
    coeffs, law = planar()
    grid = Grid(1.0, 500)
    sol = solve_riccati(coeffs, law, grid, backend=backend)
    ref = markov_matrix_ode(coeffs.tables, [0.7, 1.2], [[0, 1], [1, 0]], 1.0)
    np.testing.assert_allclose(sol.P.values[0, 0], ref(0.0), atol=5 * grid.dt)
    assert apriori_checks(sol).passed


def test_backends_agree_nonmarkov(nonmarkov):
    inst, direct = nonmarkov
    pic = solve_riccati_picard(inst.coeffs, inst.law, inst.grid, tol=1e-12)
    assert field_distance(direct.P, pic.P) <= 1e-11
    d = pic.diagnostics
    assert d.max_iterations <= 50 and d.max_contraction <= 0.6
    assert len(d.windows) == int(np.ceil(1.0 / d.delta - 1e-9))


def test_picard_windows_cover_horizon(markov):
    inst, _ = markov
    pic = solve_riccati_picard(inst.coeffs, inst.law, inst.grid)
    w = pic.diagnostics.windows
    assert w[0].t_hi == pytest.approx(1.0) and w[-1].t_lo == pytest.approx(0.0)
    for a, b in zip(w[:-1], w[1:]):
        assert a.t_lo == pytest.approx(b.t_hi)
    rows = pic.diagnostics.rows()
    assert len(rows) == sum(x.iterations for x in w)


def test_lyapunov_degeneration():
    inst = markov_instance()
    c = inst.coeffs
    no_b = CoefficientSet.per_mark(A=c.tables["A"], B=np.zeros_like(c.tables["B"]), S=c.tables["S"],
                                   G=c.tables["G"], C=c.tables["C"])
    ric = solve_riccati_direct(no_b, inst.law, inst.grid)
    lyap = solve_lyapunov(LyapunovProblem(no_b, inst.law, no_b.G, no_b.S, no_b.M_S), inst.grid)
    assert field_distance(ric.P, lyap.P) <= 1e-12
    pic = solve_riccati_picard(no_b, inst.law, inst.grid)
    assert all(wd.iterations == 1 for wd in pic.diagnostics.windows)
    assert field_distance(pic.P, lyap.P) <= 1e-12


def test_gbm_is_zero():
    inst = gbm_instance()
    sol = solve_riccati_picard(inst.coeffs, inst.law, inst.grid)
    assert np.all(sol.P.values == 0)


def test_positivity_error():
    inst = scalar_benchmark(dt=1e-3, horizon=0.5, g=1.0)
    with pytest.raises(PositivityError):
        solve_riccati_direct(inst.coeffs, inst.law, inst.grid, terminal=lambda e, i: -1.0)
    sol = solve_riccati_direct(inst.coeffs, inst.law, inst.grid, terminal=lambda e, i: -1.0, check=False)
    assert sol.P.values[0, 0, 0, 0, 0] == pytest.approx(-2.0, rel=1e-2)


def test_bound_error_on_understated_terminal_bound():
    c = CoefficientSet.per_mark(A=[[[0.0]]], B=[[[0.1]]], S=[[[0.0]]], G=[[[1.0]]], bounds={"M_G": 0.1})
    inst = scalar_benchmark()
    with pytest.raises(BoundError):
        solve_riccati_direct(c, inst.law, inst.grid)


def test_stability_error():
    c = CoefficientSet.per_mark(A=[[[0.0]]], B=[[[10.0]]], S=[[[0.0]]], G=[[[10.0]]])
    inst = scalar_benchmark()
    with pytest.raises(StabilityError):
        solve_riccati_direct(c, inst.law, Grid(1.0, 10))


def test_picard_iteration_budget(markov):
    inst, _ = markov
    with pytest.raises(ConvergenceError):
        solve_riccati_picard(inst.coeffs, inst.law, inst.grid, max_iter=1)
    with pytest.raises(ValueError):
        solve_riccati_picard(inst.coeffs, inst.law, inst.grid, tol=0.0)


def test_no_admissible_window():
    c = CoefficientSet.per_mark(A=[[[1.0]]], B=[[[3.0]]], S=[[[1.0]]], G=[[[5.0]]])
    with pytest.raises(GridError):
        step_size_delta(apriori_bound(c, Grid(1.0, 100)), c, Grid(1.0, 100))


def test_apriori_bound_formula():
    inst = markov_instance()
    c = inst.coeffs
    K = np.exp((2 * c.M_A + c.M_C ** 2) * 1.0)
    assert apriori_bound(c, inst.grid) == pytest.approx(K * (c.M_G + c.M_S))
    assert contraction_constant(c, 1.0) == pytest.approx(K * K)


@settings(max_examples=25, deadline=None)
@given(r1=st.floats(0.0, 3.0), r2=st.floats(0.0, 3.0))
def test_window_shrinks_with_radius(r1, r2):
    inst = markov_instance(dt=1e-4)
    lo, hi = sorted((r1, r2))
    try:
        d_hi = step_size_delta(hi, inst.coeffs, inst.grid)
    except GridError:
        return
    assert step_size_delta(lo, inst.coeffs, inst.grid) >= d_hi
    assert d_hi / inst.grid.dt == pytest.approx(round(d_hi / inst.grid.dt))


@settings(max_examples=8, deadline=None)
@given(g=st.floats(0.0, 2.0), b=st.floats(0.0, 1.0))
def test_value_nonnegative_and_monotone_in_terminal(g, b):
    grid = Grid(1.0, 200)
    law = SwitchingLaw(("0", "1"), 0, MarkovHazard([1.0, 1.0]), 1.0, TransitionKernel.swap(2))
    lo = CoefficientSet.per_mark(A=[[[0.1]], [[0.0]]], B=[[[b]], [[b]]], S=[[[0.1]], [[0.0]]], G=[[[g]], [[g]]])
    hi = CoefficientSet.per_mark(A=[[[0.1]], [[0.0]]], B=[[[b]], [[b]]], S=[[[0.1]], [[0.0]]],
                                 G=[[[g + 0.5]], [[g + 0.5]]])
    p_lo = solve_riccati_direct(lo, law, grid).P.values
    p_hi = solve_riccati_direct(hi, law, grid).P.values
    assert p_lo.min() >= 0
    assert np.all(p_hi >= p_lo - 1e-12)
