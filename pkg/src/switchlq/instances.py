"""Reference problem instances used by the shipped configs and the test suite."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .mpp import ConstantHazard, LinearElapsedHazard, MarkovHazard, SwitchingLaw, TransitionKernel
from .regime_field import CoefficientSet, Grid


@dataclass(frozen=True)
class Instance:
    name: str
    coeffs: CoefficientSet
    law: SwitchingLaw
    grid: Grid
    x: np.ndarray
    t0: float = 0.0


def _scalar_marks(a, b, s, g, c=None):
    """Per-mark scalar data as ``1 x 1`` matrices."""
    wrap = lambda v: [[[float(x)]] for x in v]  # noqa: E731
    return CoefficientSet.per_mark(A=wrap(a), B=wrap(b), S=wrap(s), G=wrap(g),
                                   C=None if c is None else [wrap(c)])


def scalar_benchmark(dt: float = 1e-3, horizon: float = 1.0, g: float = 1.0) -> Instance:
    """``A=0, B=1, C=0, S=0, G=g`` with no switching; ``P(t) = g / (1 + g (T - t))``."""
    coeffs = _scalar_marks([0.0], [1.0], [0.0], [g])
    law = SwitchingLaw(("0",), 0, ConstantHazard(0.0), 1.0, TransitionKernel.swap(1))
    return Instance("scalar", coeffs, law, Grid(horizon, int(round(horizon / dt))), np.array([1.0]))


def scalar_riccati_exact(t, horizon: float = 1.0, g: float = 1.0):
    return g / (1.0 + g * (horizon - np.asarray(t, float)))


MARKOV_DATA = dict(a=[0.2, -0.2], b=[0.8, 0.4], s=[0.2, 0.1], g=[1.0, 0.5], c=[0.2, 0.1])
MARKOV_RATES = [1.0, 1.5]

NONMARKOV_DATA = dict(a=[0.3, -0.3], b=[0.6, 0.4], s=[0.2, 0.05], g=[1.0, 0.1])
NONMARKOV_SLOPE, NONMARKOV_CAP = 2.0, 4.0


def markov_instance(dt: float = 1e-3, horizon: float = 1.0) -> Instance:
    """Two scalar regimes with constant switching rates and a swap kernel."""
    coeffs = _scalar_marks(**MARKOV_DATA)
    law = SwitchingLaw(("0", "1"), 0, MarkovHazard(MARKOV_RATES), max(MARKOV_RATES), TransitionKernel.swap(2))
    return Instance("markov", coeffs, law, Grid(horizon, int(round(horizon / dt))), np.array([1.0]))


def nonmarkov_instance(dt: float = 1e-3, horizon: float = 1.0) -> Instance:
    """Two scalar regimes switching with hazard ``min(2 e, 4)`` in the elapsed time."""
    coeffs = _scalar_marks(**NONMARKOV_DATA)
    law = SwitchingLaw(("0", "1"), 0, LinearElapsedHazard(NONMARKOV_SLOPE, NONMARKOV_CAP), NONMARKOV_CAP,
                       TransitionKernel.swap(2))
    return Instance("nonmarkov", coeffs, law, Grid(horizon, int(round(horizon / dt))), np.array([1.0]))


def gbm_instance(c: float = math.sqrt(2.0), a: float = 0.0, horizon: float = 1.0, dt: float = 1e-3) -> Instance:
    """Uncontrolled ``dX = a X dt + c X dW``: ``E X_T^2 = exp((2a + c^2) T) X_0^2``."""
    coeffs = _scalar_marks([a], [0.0], [0.0], [0.0], c=[c])
    law = SwitchingLaw(("0",), 0, ConstantHazard(0.0), 1.0, TransitionKernel.swap(1))
    return Instance("gbm", coeffs, law, Grid(horizon, int(round(horizon / dt))), np.array([1.0]))


def mean_holding_time(law: SwitchingLaw, mark: int) -> float:
    """``int_0^inf exp(-int_0^e lambda(0, u, i) du) de`` for a time-homogeneous hazard."""
    lam = lambda u: float(np.asarray(law.hazard(0.0, np.asarray(u), mark)))  # noqa: E731
    survival = lambda e: math.exp(-integrate.quad(lam, 0.0, e, limit=200)[0])  # noqa: E731
    value, _ = integrate.quad(survival, 0.0, np.inf, limit=200)
    return value


def rate_matched_markov(law: SwitchingLaw) -> SwitchingLaw:
    """Constant-rate law whose per-mark rates are reciprocal mean holding times."""
    rates = [1.0 / mean_holding_time(law, i) for i in range(law.n_marks)]
    return SwitchingLaw(law.marks, law.initial_mark, MarkovHazard(rates), max(law.hazard_bound, max(rates)),
                        law.kernel, law.initial_elapsed)


def mark_averaged(coeffs: CoefficientSet) -> CoefficientSet:
    """Coefficients with every per-mark table replaced by its average over marks."""
    tab = coeffs.tables
    if tab is None:
        raise ValueError("mark averaging needs per-mark tables")
    m = tab["n_marks"]

    def avg(x):
        return np.repeat(np.asarray(x).mean(axis=0, keepdims=True), m, axis=0)

    return CoefficientSet.per_mark(A=avg(tab["A"]), B=avg(tab["B"]), S=avg(tab["S"]), G=avg(tab["G"]),
                                   C=[avg(c) for c in tab["C"]] or None)
