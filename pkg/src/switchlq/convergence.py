"""Grid-refinement studies for the field solvers and the path simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _mc
from .dynamics import ZeroControl, march, run_batches, sim_nodes
from .exceptions import ModelError
from .mpp import SwitchingLaw
from .regime_field import CoefficientSet, Grid, RegimeField

RATIO_RANGE = (1.6, 2.4)


@dataclass(frozen=True)
class RefinementStudy:
    """Quantity computed at successively halved steps.

    ``errors`` are successive differences (field solvers) or differences to
    an exact value (simulator); ``ratios`` are quotients of consecutive errors.
    """

    steps: tuple
    values: tuple
    errors: tuple
    std_errors: tuple
    ratios: tuple

    def passed(self, lo: float = RATIO_RANGE[0], hi: float = RATIO_RANGE[1]) -> bool:
        return bool(self.ratios) and all(lo <= r <= hi for r in self.ratios)


def _ratios(errors):
    return tuple(abs(a) / abs(b) if b != 0 else math.inf for a, b in zip(errors[:-1], errors[1:]))


def field_refinement(solve: Callable[[Grid], RegimeField], grid: Grid, probe: Callable[[RegimeField], float],
                     levels: int = 3) -> RefinementStudy:
    """Solve on ``grid`` and ``levels - 1`` halvings; compare ``probe`` values.

    With three levels the errors are ``v(dt) - v(dt/2)`` and
    ``v(dt/2) - v(dt/4)``, whose ratio is 2 for a first-order scheme.
    """
    if levels < 3:
        raise ValueError("need at least three levels for a ratio")
    grids = [grid.refined(2 ** j) for j in range(levels)]
    vals = tuple(float(probe(solve(g))) for g in grids)
    errs = tuple(a - b for a, b in zip(vals[:-1], vals[1:]))
    return RefinementStudy(tuple(g.dt for g in grids), vals, errs, (0.0,) * len(errs), _ratios(errs))


def weak_error_study(coeffs: CoefficientSet, law: SwitchingLaw, x: float, horizon: float, dt_sims,
                     n_paths: int, seed: int, threads=None) -> RefinementStudy:
    """Weak error of ``E X_T^2`` for uncontrolled scalar ``dX = a X dt + c X dW``.

    Each path is compared with the exact solution driven by the same Brownian
    increments, ``x exp((a - c^2/2) T + c W_T)``, which removes most of the
    Monte-Carlo noise from the error estimate. Coefficients must be constant
    and identical in every mark.
    """
    tab = coeffs.tables
    if coeffs.n != 1 or coeffs.d != 1 or tab is None:
        raise ModelError("weak-error study needs a scalar model with one Brownian component")
    A, C = tab["A"][:, 0, 0], tab["C"][0][:, 0, 0]
    if np.ptp(A) or np.ptp(C):
        raise ModelError("weak-error study needs mark-independent coefficients")
    a, c = float(A[0]), float(C[0])
    x0 = np.array([float(x)])
    vals, errs, ses = [], [], []
    for dt in dt_sims:
        nodes = sim_nodes(0.0, horizon, dt)

        def chunk(jumps, rng):
            w = np.zeros(jumps.n_paths)
            X = None
            for st in march(coeffs, ZeroControl(coeffs.k), jumps, x0, nodes, rng):
                w[st.idx] += st.dw[:, 0]
                if X is None:
                    X = np.empty(jumps.n_paths)
                X[st.idx] = st.x_next[:, 0]
            exact = x * np.exp((a - 0.5 * c * c) * horizon + c * w)
            return X * X, X * X - exact * exact

        parts = run_batches(chunk, law, horizon, 0.0, n_paths, seed, threads)
        sq = np.concatenate([p[0] for p in parts])
        diff = np.concatenate([p[1] for p in parts])
        m, _ = _mc.mean_and_se(sq)
        # mean(X^2 - exact^2) is unbiased for E X^2 - E exact^2 with far smaller variance
        err, se = _mc.mean_and_se(diff)
        vals.append(m)
        # the exact moment is known; the path-wise exact term only reduces variance
        errs.append(err)
        ses.append(se)
    return RefinementStudy(tuple(dt_sims), tuple(vals), tuple(errs), tuple(ses), _ratios(errs))

