"""Quadratic cost, value function and the optimality experiments.

Costs are Monte-Carlo estimates over paths of :mod:`switchlq.dynamics`. The
state-cost integral uses the trapezoid rule on event-aligned nodes; control
energy and the feedback-deviation penalty use the step's (left-endpoint)
control, which is exact for piecewise-constant controls.

Controls compared with the same seed share jump sequences and Brownian
increments, so cost differences are estimated path by path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _mc
from .dynamics import ControlSpec, FeedbackControl, MarchState, march, run_batches, sim_nodes
from .mpp import SwitchingLaw
from .regime_field import CoefficientSet
from .riccati import RiccatiSolution, apriori_bound

N_SE = 3.0


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std_error: float
    n_paths: int
    running: float
    terminal: float
    energy: float
    samples: np.ndarray = field(repr=False, compare=False, default=None)

    @property
    def breakdown(self) -> dict:
        return {"running": self.running, "terminal": self.terminal, "energy": self.energy}


def path_statistics(coeffs: CoefficientSet, law: SwitchingLaw, control: ControlSpec, t0: float, x,
                    horizon: float, dt_sim: float, n_paths: int, seed: int, threads=None,
                    relation: RiccatiSolution | None = None) -> dict:
    """Per-path cost components, and the penalty ``int |u + B'PX|^2`` if ``relation`` is given."""
    x = np.asarray(x, float).reshape(-1)
    nodes = sim_nodes(t0, horizon, dt_sim)

    def quad(M, X):
        return np.einsum("pa,pab,pb->p", X, M, X)

    def chunk(jumps, rng):
        p = jumps.n_paths
        running, energy, penalty = np.zeros(p), np.zeros(p), np.zeros(p)
        state = MarchState(None, None, None, None)
        for st in march(coeffs, control, jumps, x, nodes, rng, state):
            S0 = coeffs.on_paths("S", st.t, st.e, st.marks)
            S1 = coeffs.on_paths("S", st.t + st.h, st.e + st.h, st.marks)
            running[st.idx] += 0.5 * (quad(S0, st.x) + quad(S1, st.x_next)) * st.h
            energy[st.idx] += np.einsum("pk,pk->p", st.u, st.u) * st.h
            if relation is not None:
                P = relation.P.evaluate(st.t, st.e, st.marks)
                B = coeffs.on_paths("B", st.t, st.e, st.marks)
                dev = st.u + np.einsum("pak,pab,pb->pk", B, P, st.x)
                penalty[st.idx] += np.einsum("pk,pk->p", dev, dev) * st.h
        G = coeffs.on_paths("G", state.t, state.e, state.marks)
        return running, quad(G, state.X), energy, penalty

    parts = run_batches(chunk, law, horizon, t0, n_paths, seed, threads)
    names = ("running", "terminal", "energy", "penalty")
    return {nm: np.concatenate([p[j] for p in parts]) for j, nm in enumerate(names)}


def _estimate(stats: dict) -> CostEstimate:
    total = stats["running"] + stats["terminal"] + stats["energy"]
    mean, se = _mc.mean_and_se(total)
    return CostEstimate(mean, se, total.size, float(stats["running"].mean()),
                        float(stats["terminal"].mean()), float(stats["energy"].mean()), total)


def estimate_cost(coeffs: CoefficientSet, law: SwitchingLaw, control: ControlSpec, t0: float, x,
                  n_paths: int, dt_sim: float, seed: int, horizon: float, threads=None) -> CostEstimate:
    """Monte-Carlo estimate of the quadratic cost of ``control`` from ``(t0, x)``."""
    stats = path_statistics(coeffs, law, control, t0, x, horizon, dt_sim, n_paths, seed, threads)
    return _estimate(stats)


def value(sol: RiccatiSolution, t: float, e: float, i: int, x) -> float:
    """Optimal cost ``<P(t, e, i) x, x>``."""
    return sol.value(t, e, i, x)


def discretization_allowance(sol: RiccatiSolution, dt_sim: float, x) -> float:
    """Deterministic slack for scheme error in Monte-Carlo identities.

    ``2 max(dt, dt_sim) |x|^2`` times the a priori scale of the solution. It
    matters only where the estimator has (near) zero variance.
    """
    x = np.asarray(x, float).reshape(-1)
    scale = apriori_bound(sol.coeffs, sol.P.grid)
    return 2.0 * max(sol.P.grid.dt, dt_sim) * float(x @ x) * max(scale, 1e-300)


@dataclass(frozen=True)
class RelationCheck:
    residual: float
    std_error: float
    cost: float
    penalty: float
    value: float
    allowance: float
    n_paths: int

    def passed(self, n_se: float = N_SE) -> bool:
        return abs(self.residual) <= n_se * self.std_error + self.allowance


def fundamental_relation_residual(sol: RiccatiSolution, coeffs: CoefficientSet, law: SwitchingLaw,
                                  t0: float, x, control: ControlSpec, n_paths: int, dt_sim: float,
                                  seed: int, threads=None) -> RelationCheck:
    """``J(u) - E int |u + B'PX|^2 - <P x, x>`` on shared paths."""
    horizon = sol.P.grid.horizon
    stats = path_statistics(coeffs, law, control, t0, x, horizon, dt_sim, n_paths, seed, threads, relation=sol)
    total = stats["running"] + stats["terminal"] + stats["energy"]
    val = value(sol, t0, law.initial_elapsed, law.initial_mark, x)
    diff = total - stats["penalty"]
    mean, se = _mc.mean_and_se(diff)
    return RelationCheck(mean - val, se, float(total.mean()), float(stats["penalty"].mean()), val,
                         discretization_allowance(sol, dt_sim, x), n_paths)


# ------------------------------------------------------------ optimality


@dataclass(frozen=True)
class ControlComparison:
    label: str
    estimate: CostEstimate
    gap: float
    gap_se: float
    dominated: bool
    strictly_cheaper: bool


@dataclass
class OptimalityReport:
    value: float
    feedback: CostEstimate | None
    allowance: float
    value_residual: float
    value_passed: bool
    comparisons: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.value_passed and all(c.dominated for c in self.comparisons)

    def rows(self):
        """CSV rows: label, mean, se, running, terminal, energy, gap, gap_se, flags."""
        out = []
        if self.feedback is not None:
            f = self.feedback
            out.append(("feedback", f.mean, f.std_error, f.running, f.terminal, f.energy,
                        0.0, 0.0, self.value_passed, False))
        for c in self.comparisons:
            e = c.estimate
            out.append((c.label, e.mean, e.std_error, e.running, e.terminal, e.energy,
                        c.gap, c.gap_se, c.dominated, c.strictly_cheaper))
        return out


def optimality_experiment(coeffs: CoefficientSet, law: SwitchingLaw, sol: RiccatiSolution, t0: float, x,
                          perturbations: list, n_paths: int, seed: int, dt_sim: float | None = None,
                          threads=None) -> OptimalityReport:
    """Compare the synthesized feedback against alternative controls on common paths.

    Checks the feedback cost against the value and, for each alternative,
    that the feedback is no costlier beyond ``3`` standard errors of the
    path-wise difference.
    """
    grid = sol.P.grid
    dt_sim = grid.dt if dt_sim is None else dt_sim
    horizon = grid.horizon
    val = value(sol, t0, law.initial_elapsed, law.initial_mark, x)
    allowance = discretization_allowance(sol, dt_sim, x)
    fb_stats = path_statistics(coeffs, law, FeedbackControl(sol, coeffs), t0, x, horizon, dt_sim,
                               n_paths, seed, threads)
    fb = _estimate(fb_stats)
    residual = fb.mean - val
    report = OptimalityReport(val, fb, allowance, residual,
                              abs(residual) <= N_SE * fb.std_error + allowance)
    for ctrl in perturbations:
        est = _estimate(path_statistics(coeffs, law, ctrl, t0, x, horizon, dt_sim, n_paths, seed, threads))
        gap, gap_se = _mc.mean_and_se(est.samples - fb.samples)
        report.comparisons.append(ControlComparison(
            label=getattr(ctrl, "label", "control"),
            estimate=est,
            gap=gap,
            gap_se=gap_se,
            dominated=gap >= -(N_SE * gap_se + allowance),
            strictly_cheaper=gap > N_SE * gap_se,
        ))
    return report
