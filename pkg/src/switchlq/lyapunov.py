"""Linear backward equation in regime-field form.

With coefficients that are deterministic functions of ``(t, e, i)`` the
solution of the Lyapunov backward equation is ``P_t = p(t, e_t, I_t)`` for a
deterministic field ``p``; the Brownian martingale part vanishes and the jump
part is ``U(t, e, i, j) = p(t, 0, j) - p(t, e, i)``. The field solves the
transport system

    -(d/dt + d/de) p = A'p + pA + sum_j C_j' p C_j + L
                       + lambda (sum_j phi_j p(t, 0, j) - p),     p(T, e, i) = H(e, i)

which is integrated backward along the characteristics ``t - e = const`` with
an explicit Euler step; coefficients are taken at the right endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _mc
from .dynamics import ControlSpec, MarchState, coefficient_paths, march, run_batches, sim_nodes
from .exceptions import GridError, ModelError, StabilityError
from .mpp import SwitchingLaw
from .regime_field import CoefficientSet, Grid, RegimeField, broadcast_matrix, symmetrize


# ------------------------------------------------------------ step machinery


@dataclass
class StepCoefficients:
    """Coefficient snapshot at ``(t_{k+1}, e_{m+1}, i)`` for every ``(m, i)``."""

    A: np.ndarray
    B: np.ndarray
    C: list
    S: np.ndarray
    lam: np.ndarray
    phi: np.ndarray
    L: np.ndarray | None = None


class BackwardStepper:
    """Evaluates right-endpoint coefficients for each backward step ``k+1 -> k``."""

    def __init__(self, coeffs: CoefficientSet, law: SwitchingLaw, grid: Grid,
                 source: Callable | None = None, cache: bool = False):
        if grid.n_elapsed * grid.dt < grid.horizon + law.initial_elapsed - 1e-9:
            raise GridError(
                f"e_max={grid.e_max} is below horizon + initial_elapsed ="
                f" {grid.horizon + law.initial_elapsed}"
            )
        self.coeffs, self.law, self.grid, self.source = coeffs, law, grid, source
        M = grid.n_elapsed
        self.ahead = np.minimum(np.arange(M + 1) + 1, M)
        self.e_ahead = grid.elapsed[self.ahead]
        self._cache = {} if cache else None

    def at(self, k: int) -> StepCoefficients:
        if self._cache is not None and k in self._cache:
            return self._cache[k]
        c, law = self.coeffs, self.law
        t = self.grid.times[k + 1]
        e = self.e_ahead
        tt = np.full(e.shape, t)
        marks = range(law.n_marks)

        def stack(fn, rows, cols):
            return np.stack([broadcast_matrix(fn(tt, e, i), e.shape, rows, cols) for i in marks], axis=1)

        snap = StepCoefficients(
            A=stack(c.A, c.n, c.n),
            B=stack(c.B, c.n, c.k),
            C=[stack(cj, c.n, c.n) for cj in c.C],
            S=stack(c.S, c.n, c.n),
            lam=np.stack([np.broadcast_to(law.hazard(tt, e, i), e.shape) for i in marks], axis=1),
            phi=np.stack([np.broadcast_to(law.kernel(tt, e, i), e.shape + (law.n_marks,)) for i in marks], axis=1),
            L=None if self.source is None else symmetrize(stack(self.source, c.n, c.n)),
        )
        if self._cache is not None:
            self._cache[k] = snap
        return snap


def linear_step(p_next: np.ndarray, ahead_idx: np.ndarray, co: StepCoefficients, source: np.ndarray,
                dt: float) -> np.ndarray:
    """One explicit backward step of the linear part plus ``source``."""
    ahead = p_next[ahead_idx]
    reset = np.einsum("mij,jab->miab", co.phi, p_next[0])
    At = np.swapaxes(co.A, -1, -2)
    drift = At @ ahead + ahead @ co.A + source + co.lam[..., None, None] * (reset - ahead)
    for Cj in co.C:
        drift += np.swapaxes(Cj, -1, -2) @ ahead @ Cj
    return symmetrize(ahead + dt * drift)


def stability_number(coeffs: CoefficientSet, law: SwitchingLaw, dt: float) -> float:
    return dt * (coeffs.gronwall_rate() + 2.0 * law.hazard_bound)


def check_stability(coeffs: CoefficientSet, law: SwitchingLaw, grid: Grid):
    q = stability_number(coeffs, law, grid.dt)
    if not q < 1.0:
        raise StabilityError(
            f"dt*(2M_A + d M_C^2 + 2 lambda_max) = {q:.4g} >= 1; refine the grid"
        )


def terminal_values(terminal, grid: Grid, n_marks: int, n: int) -> np.ndarray:
    """Terminal datum on the elapsed nodes, shape ``(M+1, n_marks, n, n)``."""
    if callable(terminal):
        e = grid.elapsed
        vals = np.stack([broadcast_matrix(terminal(e, i), e.shape, n, n) for i in range(n_marks)], axis=1)
    else:
        vals = np.asarray(terminal, float)
        if vals.shape != (grid.n_elapsed + 1, n_marks, n, n):
            raise GridError(f"terminal array has shape {vals.shape}")
    return symmetrize(vals)


# --------------------------------------------------------------------- types


@dataclass(frozen=True)
class LyapunovProblem:
    """Data of the linear backward equation.

    ``terminal`` is ``H(e, i)`` (or an array of node values) and ``source`` is
    ``L(t, e, i)``; ``M_L`` bounds ``|L|``.
    """

    coeffs: CoefficientSet
    law: SwitchingLaw
    terminal: Callable | np.ndarray
    source: Callable
    M_L: float

    def __post_init__(self):
        if self.M_L < 0:
            raise ModelError("M_L must be nonnegative")


class RegimeSolution:
    """A field ``P`` together with its jump field ``U`` and the zero martingale field ``Q``."""

    def __init__(self, P: RegimeField, coeffs: CoefficientSet, law: SwitchingLaw):
        self.P = P
        self.coeffs = coeffs
        self.law = law

    def U(self, t, e, i, j) -> np.ndarray:
        """Jump-reset increment ``p(t, 0, j) - p(t, e, i)``."""
        return self.P.evaluate(t, 0.0, j) - self.P.evaluate(t, e, i)

    def jump_values(self) -> np.ndarray:
        """``U`` at every node, shape ``(N+1, M+1, m_from, m_to, n, n)``."""
        v = self.P.values
        return v[:, 0][:, None, None, :] - v[:, :, :, None]

    def Q(self, t=None, e=None, i=None) -> np.ndarray:
        """Brownian martingale field; identically zero for this coefficient class."""
        return np.zeros((self.coeffs.d, self.P.dim, self.P.dim))

    def value(self, t, e, i, x) -> float:
        x = np.asarray(x, float).reshape(-1)
        return float(x @ self.P.evaluate(t, e, i) @ x)


class LyapunovSolution(RegimeSolution):
    pass


# ------------------------------------------------------------------ solvers


def sweep(stepper: BackwardStepper, values: np.ndarray, k_hi: int, k_lo: int, source_at: Callable):
    """Fill ``values[k]`` for ``k = k_hi-1 .. k_lo`` from ``values[k_hi]``."""
    dt = stepper.grid.dt
    for k in range(k_hi - 1, k_lo - 1, -1):
        co = stepper.at(k)
        values[k] = linear_step(values[k + 1], stepper.ahead, co, source_at(k, co, values[k + 1]), dt)
        if not np.all(np.isfinite(values[k])):
            raise StabilityError(f"non-finite values at time node {k}")
    return values


def solve_lyapunov(prob: LyapunovProblem, grid: Grid) -> LyapunovSolution:
    """Backward characteristic sweep for the linear equation."""
    c, law = prob.coeffs, prob.law
    check_stability(c, law, grid)
    stepper = BackwardStepper(c, law, grid, source=prob.source)
    values = np.empty((grid.n_steps + 1, grid.n_elapsed + 1, law.n_marks, c.n, c.n))
    values[-1] = terminal_values(prob.terminal, grid, law.n_marks, c.n)
    sweep(stepper, values, grid.n_steps, 0, lambda k, co, nxt: co.L)
    return LyapunovSolution(RegimeField(grid, values, law.marks), c, law)


def sup_bound(prob: LyapunovProblem, grid: Grid, terminal_norm: float) -> np.ndarray:
    """``K(t) (|H| + (T - t) M_L)`` at every time node."""
    rem = grid.horizon - grid.times
    K = np.exp(prob.coeffs.gronwall_rate() * rem)
    return K * (terminal_norm + rem * prob.M_L)


def sup_bound_check(sol: LyapunovSolution, prob: LyapunovProblem) -> bool:
    """Whether every time slice obeys ``|P_t| <= K(t) (|H| + (T - t) M_L)``."""
    grid = sol.P.grid
    h_norm = float(np.abs(np.linalg.eigvalsh(sol.P.values[-1])).max())
    bound = sup_bound(prob, grid, h_norm)
    return bool(np.all(sol.P.max_norm(axis=0) <= bound * (1 + 1e-12)))


# ----------------------------------------------------- representation check


@dataclass(frozen=True)
class RepresentationCheck:
    residual: float
    std_error: float
    estimate: float
    value: float
    n_paths: int


def verify_representation(sol: LyapunovSolution, prob: LyapunovProblem, t: float, x, u: ControlSpec,
                          n_paths: int, seed: int, dt_sim: float | None = None,
                          threads=None) -> RepresentationCheck:
    """Monte-Carlo residual of the representation of ``<P_t x, x>``.

    Estimates ``E[<H X_T, X_T> + int_t^T (<L X, X> - 2 <P B u, X>) ds] - <P x, x>``
    along paths of the controlled state started at ``(t, e0, i0, x)`` with the
    law's initial elapsed time and mark.
    """
    c, law = prob.coeffs, prob.law
    grid = sol.P.grid
    dt_sim = grid.dt if dt_sim is None else dt_sim
    x = np.asarray(x, float).reshape(-1)
    nodes = sim_nodes(t, grid.horizon, dt_sim)
    n = c.n

    def L_paths(tt, ee, mk):
        return coefficient_paths(lambda a, b, i: broadcast_matrix(prob.source(a, b, i), np.shape(b), n, n),
                                 tt, ee, mk, (n, n))

    def quad(M, X):
        return np.einsum("pa,pab,pb->p", X, M, X)

    def chunk(jumps, rng):
        acc = np.zeros(jumps.n_paths)
        state = MarchState(None, None, None, None)
        for st in march(c, u, jumps, x, nodes, rng, state):
            L0 = L_paths(st.t, st.e, st.marks)
            L1 = L_paths(st.t + st.h, st.e + st.h, st.marks)
            P0 = sol.P.evaluate(st.t, st.e, st.marks)
            B0 = c.on_paths("B", st.t, st.e, st.marks)
            cross = np.einsum("pa,pab,pbk,pk->p", st.x, P0, B0, st.u)
            acc[st.idx] += 0.5 * (quad(L0, st.x) + quad(L1, st.x_next)) * st.h - 2.0 * cross * st.h
        if callable(prob.terminal):
            H = coefficient_paths(lambda a, b, i: broadcast_matrix(prob.terminal(b, i), np.shape(b), n, n),
                                  state.t, state.e, state.marks, (n, n))
        else:
            H = sol.P.evaluate(state.t, state.e, state.marks)
        return acc + quad(H, state.X)

    parts = run_batches(chunk, law, grid.horizon, t, n_paths, seed, threads)
    samples = np.concatenate(parts)
    est, se = _mc.mean_and_se(samples)
    val = sol.value(t, law.initial_elapsed, law.initial_mark, x)
    return RepresentationCheck(est - val, se, est, val, n_paths)
