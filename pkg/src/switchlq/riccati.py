"""Riccati backward equation in regime-field form.

Two independent backends:

* :func:`solve_riccati_direct` runs the nonlinear backward sweep, with the
  quadratic term ``S - p B B' p`` evaluated at the right endpoint.
* :func:`solve_riccati_picard` covers ``[0, T]`` by windows of length
  ``delta`` and, on each window, iterates the map sending ``P`` to the
  solution of the linear equation with source ``S - P B B' P``. The window
  length makes that map a contraction on the ball of radius ``r``.

At its fixed point the Picard map reproduces the direct sweep node for node,
so the two backends agree up to the iteration tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import BoundError, ConvergenceError, GridError, PositivityError, StabilityError
from .lyapunov import (
    BackwardStepper,
    RegimeSolution,
    check_stability,
    linear_step,
    sweep,
    terminal_values,
)
from .mpp import SwitchingLaw
from .regime_field import CoefficientSet, Grid, RegimeField, _op_norms, psd_floor

_EPS = np.finfo(float).eps


@dataclass
class WindowDiagnostics:
    index: int
    t_lo: float
    t_hi: float
    iterations: int
    distances: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    max_norm: float = 0.0

    @property
    def contraction(self) -> float:
        return max(self.ratios, default=0.0)


@dataclass
class RiccatiDiagnostics:
    backend: str
    delta: float | None = None
    radius: float | None = None
    windows: list = field(default_factory=list)

    @property
    def max_contraction(self) -> float:
        return max((w.contraction for w in self.windows), default=0.0)

    @property
    def max_iterations(self) -> int:
        return max((w.iterations for w in self.windows), default=0)

    def rows(self):
        """``(window, iteration, distance, ratio, max_norm)`` rows for CSV export."""
        out = []
        for w in self.windows:
            for it, dist in enumerate(w.distances, start=1):
                ratio = w.ratios[it - 2] if it >= 2 and it - 2 < len(w.ratios) else float("nan")
                out.append((w.index, it, dist, ratio, w.max_norm))
        return out


class RiccatiSolution(RegimeSolution):
    def __init__(self, P: RegimeField, coeffs: CoefficientSet, law: SwitchingLaw, backend: str,
                 diagnostics: RiccatiDiagnostics):
        super().__init__(P, coeffs, law)
        self.backend = backend
        self.diagnostics = diagnostics


# ----------------------------------------------------------------- constants


def apriori_bound(coeffs: CoefficientSet, grid: Grid, terminal_norm: float | None = None) -> float:
    """``K (M_G + T M_S)`` with ``K = exp((2 M_A + d M_C^2) T)``."""
    span = grid.horizon - grid.start
    g = coeffs.M_G if terminal_norm is None else terminal_norm
    return coeffs.gronwall_constant(span) * (g + span * coeffs.M_S)


def psd_tolerance(coeffs: CoefficientSet, grid: Grid, terminal_norm: float | None = None) -> float:
    return 10.0 * grid.dt * apriori_bound(coeffs, grid, terminal_norm)


def contraction_constant(coeffs: CoefficientSet, span: float) -> float:
    """Computable stand-in for the Lipschitz constant of the linear solution map.

    In sup norm the linear solution with zero terminal datum obeys
    ``|P| <= K delta |L|``, hence ``|P|^2 <= K^2 span * int |L|^2``.
    """
    K = coeffs.gronwall_constant(span)
    return K * K * span


def step_size_delta(R: float, coeffs: CoefficientSet, grid: Grid, K: float | None = None,
                    K0: float | None = None) -> float:
    """Largest window length on the grid satisfying both contraction inequalities.

    With ``r = 2 K R + 1`` the window ``delta`` must satisfy
    ``K [R + delta (r^2 M_B^2 + M_S)] <= r`` (the map keeps the ball of radius
    ``r``) and ``4 K0 r^2 M_B^4 delta <= 1/2`` (contraction).
    """
    if R < 0:
        raise ValueError("R must be nonnegative")
    span = grid.horizon - grid.start
    K = coeffs.gronwall_constant(span) if K is None else K
    K0 = contraction_constant(coeffs, span) if K0 is None else K0
    r = 2.0 * K * R + 1.0
    grow = r * r * coeffs.M_B ** 2 + coeffs.M_S
    d1 = math.inf if grow == 0 else (r / K - R) / grow
    d2 = math.inf if coeffs.M_B == 0 else 1.0 / (8.0 * K0 * r * r * coeffs.M_B ** 4)
    delta = min(d1, d2, span)
    steps = math.floor(delta / grid.dt + 1e-9)
    if steps < 1:
        raise GridError(
            f"no admissible window: delta={delta:.3g} is below the grid step {grid.dt:.3g}"
        )
    return steps * grid.dt


# ------------------------------------------------------------------- checks


@dataclass(frozen=True)
class AprioriReport:
    psd_floor: float
    max_norm: float
    bound: float
    tol_psd: float

    @property
    def positive(self) -> bool:
        return self.psd_floor >= -self.tol_psd

    @property
    def bounded(self) -> bool:
        return self.max_norm <= self.bound

    @property
    def passed(self) -> bool:
        return self.positive and self.bounded


def apriori_checks(sol: RiccatiSolution, coeffs: CoefficientSet | None = None) -> AprioriReport:
    """Positivity floor and largest node norm against the a priori bound."""
    coeffs = sol.coeffs if coeffs is None else coeffs
    grid = sol.P.grid
    return AprioriReport(
        psd_floor=psd_floor(sol.P),
        max_norm=sol.P.max_norm(),
        bound=apriori_bound(coeffs, grid),
        tol_psd=psd_tolerance(coeffs, grid),
    )


def _enforce(values, coeffs, grid, terminal_norm):
    bound = apriori_bound(coeffs, grid, terminal_norm)
    tol = psd_tolerance(coeffs, grid, terminal_norm)
    floor = float(values.min()) if values.shape[-1] == 1 else float(np.linalg.eigvalsh(values).min())
    if floor < -tol:
        raise PositivityError(f"solution has eigenvalue {floor:.4g} below -{tol:.3g}")
    top = float(_op_norms(values).max())
    if top > bound + tol:
        raise BoundError(f"solution norm {top:.6g} exceeds a priori bound {bound:.6g}")


def _terminal(coeffs, law, grid, terminal):
    vals = terminal_values(coeffs.G if terminal is None else terminal, grid, law.n_marks, coeffs.n)
    norm = None if terminal is None else max(coeffs.M_G, float(_op_norms(vals).max()))
    return vals, norm


def _quadratic_source(co, ahead):
    BtP = np.swapaxes(co.B, -1, -2) @ ahead
    return co.S - np.swapaxes(BtP, -1, -2) @ BtP


# ------------------------------------------------------------------ solvers


def solve_riccati_direct(coeffs: CoefficientSet, law: SwitchingLaw, grid: Grid, terminal=None,
                         check: bool = True) -> RiccatiSolution:
    """Nonlinear backward characteristic sweep.

    ``terminal`` overrides ``G`` (callable ``(e, i)`` or node array), which is
    how a solve is restarted from a slice computed on a later window.
    """
    check_stability(coeffs, law, grid)
    values_T, terminal_norm = _terminal(coeffs, law, grid, terminal)
    bound = apriori_bound(coeffs, grid, terminal_norm)
    q = grid.dt * 2.0 * coeffs.M_B ** 2 * bound
    if not q < 1.0:
        raise StabilityError(f"dt * 2 M_B^2 * bound = {q:.4g} >= 1; refine the grid")
    stepper = BackwardStepper(coeffs, law, grid)
    values = np.empty((grid.n_steps + 1, grid.n_elapsed + 1, law.n_marks, coeffs.n, coeffs.n))
    values[-1] = values_T
    ahead = stepper.ahead
    sweep(stepper, values, grid.n_steps, 0, lambda k, co, nxt: _quadratic_source(co, nxt[ahead]))
    if check:
        _enforce(values, coeffs, grid, terminal_norm)
    return RiccatiSolution(RegimeField(grid, values, law.marks), coeffs, law, "direct",
                           RiccatiDiagnostics("direct"))


def solve_riccati_picard(coeffs: CoefficientSet, law: SwitchingLaw, grid: Grid, tol: float = 1e-10,
                         max_iter: int = 50, terminal=None, check: bool = True) -> RiccatiSolution:
    """Windowed Picard iteration on linear problems, stitched right to left."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    check_stability(coeffs, law, grid)
    values_T, terminal_norm = _terminal(coeffs, law, grid, terminal)
    span = grid.horizon - grid.start
    K = coeffs.gronwall_constant(span)
    R = apriori_bound(coeffs, grid, terminal_norm)
    r = 2.0 * K * R + 1.0
    delta = step_size_delta(R, coeffs, grid, K=K)
    w = int(round(delta / grid.dt))
    diag = RiccatiDiagnostics("picard", delta=delta, radius=r)

    stepper = BackwardStepper(coeffs, law, grid)
    ahead = stepper.ahead
    values = np.empty((grid.n_steps + 1, grid.n_elapsed + 1, law.n_marks, coeffs.n, coeffs.n))
    values[-1] = values_T
    noise_floor = 1e3 * _EPS * max(1.0, R)

    k_hi, index = grid.n_steps, 0
    while k_hi > 0:
        k_lo = max(0, k_hi - w)
        snaps = {k: stepper.at(k) for k in range(k_lo, k_hi)}
        old = np.broadcast_to(values[k_hi], (k_hi - k_lo + 1,) + values.shape[1:]).copy()
        wd = WindowDiagnostics(index, float(grid.times[k_lo]), float(grid.times[k_hi]), 0)
        linear = coeffs.M_B == 0
        for it in range(1, (1 if linear else max_iter) + 1):
            new = np.empty_like(old)
            new[-1] = values[k_hi]
            for k in range(k_hi - 1, k_lo - 1, -1):
                co = snaps[k]
                src = _quadratic_source(co, old[k + 1 - k_lo][ahead])
                new[k - k_lo] = linear_step(new[k + 1 - k_lo], ahead, co, src, grid.dt)
            if not np.all(np.isfinite(new)):
                raise StabilityError(f"non-finite Picard iterate on window {index}")
            dist = float(_op_norms(new - old).max())
            top = float(_op_norms(new).max())
            if top > r:
                raise ConvergenceError(f"iterate norm {top:.4g} left the ball of radius {r:.4g} (window {index})")
            if wd.distances and wd.distances[-1] > noise_floor and dist > noise_floor:
                wd.ratios.append(dist / wd.distances[-1])
            wd.distances.append(dist)
            wd.iterations = it
            wd.max_norm = top
            old = new
            if dist < tol or linear:
                break
        else:
            raise ConvergenceError(f"Picard iteration did not reach tol={tol} in {max_iter} steps (window {index})")
        values[k_lo:k_hi + 1] = old
        diag.windows.append(wd)
        k_hi, index = k_lo, index + 1

    if check:
        _enforce(values, coeffs, grid, terminal_norm)
    return RiccatiSolution(RegimeField(grid, values, law.marks), coeffs, law, "picard", diag)


def solve_riccati(coeffs, law, grid, backend: str = "direct", **kw) -> RiccatiSolution:
    if backend == "direct":
        return solve_riccati_direct(coeffs, law, grid, **{k: v for k, v in kw.items() if k in ("terminal", "check")})
    if backend == "picard":
        return solve_riccati_picard(coeffs, law, grid, **kw)
    raise ValueError(f"unknown backend {backend!r}")
