"""Euler-Maruyama simulation of the controlled linear state equation.

Paths of the switching process are drawn exactly (thinning) and their jump
times are inserted as extra simulation nodes, so coefficients change regime
exactly at the jumps. Coefficients and controls are evaluated at the left
endpoint of every sub-step: at a jump node the step ending there sees the
pre-jump regime and the following step the post-jump one.

The core is :func:`march`, a generator over sub-steps of a whole batch of
paths. Every Monte-Carlo routine in the package consumes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import _mc
from .exceptions import ModelError, SimulationError
from .mpp import JumpBatch, JumpSequence, SwitchingLaw, simulate_switching_batch
from .regime_field import CoefficientSet


def coefficient_paths(method: Callable, t, e, marks, shape_tail) -> np.ndarray:
    """Evaluate a per-mark coefficient method at per-path ``(t, e, mark)``."""
    out = np.empty(np.shape(marks) + tuple(shape_tail))
    for i in np.unique(marks):
        sel = marks == i
        out[sel] = method(t[sel], e[sel], int(i))
    return out


# ----------------------------------------------------------------- controls


class ControlSpec:
    """A control policy evaluated at left endpoints: ``u = policy(t, e, mark, X)``."""

    bound: float | None = None
    label = "control"

    def __call__(self, t, e, marks, X) -> np.ndarray:
        raise NotImplementedError


class ZeroControl(ControlSpec):
    label = "zero"
    bound = 0.0

    def __init__(self, k: int):
        self.k = k

    def __call__(self, t, e, marks, X):
        return np.zeros((X.shape[0], self.k))


class OpenLoopControl(ControlSpec):
    """``u = fn(t, e, i)``, a deterministic function of the extended state.

    ``fn`` takes arrays ``t, e`` and an integer mark and returns something
    broadcastable to ``e.shape + (k,)``. ``bound`` must dominate ``|u|``.
    """

    def __init__(self, fn: Callable, k: int, bound: float, label: str = "open_loop"):
        self.fn, self.k, self.bound, self.label = fn, k, float(bound), label

    @classmethod
    def constant(cls, value, label=None) -> "OpenLoopControl":
        v = np.atleast_1d(np.asarray(value, float))
        return cls(lambda t, e, i: v, v.size, float(np.linalg.norm(v)), label or f"constant {v.tolist()}")

    def __call__(self, t, e, marks, X):
        return coefficient_paths(
            lambda tt, ee, i: np.broadcast_to(self.fn(tt, ee, i), np.shape(ee) + (self.k,)),
            t, e, marks, (self.k,),
        )


class FeedbackControl(ControlSpec):
    """``u = -B' P X + perturbation(t, e, i)`` from a Riccati solution.

    ``gain_coeffs`` supplies ``B``; it defaults to the coefficients the
    solution was computed for. Passing a different set (for instance
    mark-averaged data) gives a mis-specified but implementable feedback.
    """

    def __init__(self, solution, gain_coeffs: CoefficientSet | None = None,
                 perturbation: OpenLoopControl | None = None, label: str | None = None):
        self.solution = solution
        self.coeffs = gain_coeffs if gain_coeffs is not None else solution.coeffs
        self.perturbation = perturbation
        self.k = self.coeffs.k
        self.bound = None
        self.label = label or ("feedback" if perturbation is None else f"feedback+{perturbation.label}")

    def __call__(self, t, e, marks, X):
        P = self.solution.P.evaluate(t, e, marks)
        B = self.coeffs.on_paths("B", t, e, marks)
        u = -np.einsum("pak,pab,pb->pk", B, P, X)
        if self.perturbation is not None:
            u = u + self.perturbation(t, e, marks, X)
        return u


# -------------------------------------------------------------------- engine


@dataclass
class Substep:
    """One Euler step for the paths listed in ``idx``."""

    idx: np.ndarray
    t: np.ndarray
    h: np.ndarray
    e: np.ndarray
    marks: np.ndarray
    x: np.ndarray
    u: np.ndarray
    dw: np.ndarray
    x_next: np.ndarray


@dataclass
class MarchState:
    """Per-path extended state; updated in place by :func:`march`."""

    t: np.ndarray
    e: np.ndarray
    marks: np.ndarray
    X: np.ndarray


def sim_nodes(t0: float, horizon: float, dt_sim: float) -> np.ndarray:
    n = max(1, math.ceil((horizon - t0) / dt_sim - 1e-9))
    return np.linspace(t0, horizon, n + 1)


def march(coeffs: CoefficientSet, control: ControlSpec, jumps: JumpBatch, x, nodes: np.ndarray,
          rng: np.random.Generator, state: MarchState | None = None) -> Iterator[Substep]:
    """Advance all paths across ``nodes``, splitting steps at jump times.

    Yields every sub-step after computing it. The final state is left in
    ``state`` when one is supplied.
    """
    n_paths = jumps.n_paths
    n, d = coeffs.n, coeffs.d
    x = np.asarray(x, float).reshape(-1)
    if x.size != n:
        raise ModelError(f"initial state has size {x.size}, expected {n}")
    if state is None:
        state = MarchState(None, None, None, None)
    state.t = np.full(n_paths, nodes[0])
    state.e = np.full(n_paths, jumps.initial_elapsed)
    state.marks = np.full(n_paths, jumps.initial_mark, dtype=int)
    state.X = np.tile(x, (n_paths, 1))
    ptr = np.zeros(n_paths, dtype=int)
    width = jumps.times.shape[1]
    padded = np.concatenate([jumps.times, np.full((n_paths, 1), np.inf)], axis=1)
    padded_marks = np.concatenate([jumps.marks, np.full((n_paths, 1), -1)], axis=1)
    rows = np.arange(n_paths)

    for target in nodes[1:]:
        while True:
            nxt = padded[rows, ptr]
            end = np.minimum(nxt, target)
            h_all = end - state.t
            idx = np.nonzero(h_all > 0)[0]
            if idx.size:
                t, e, mk, X = state.t[idx], state.e[idx], state.marks[idx], state.X[idx]
                h = h_all[idx]
                dw = rng.standard_normal((idx.size, d)) * np.sqrt(h)[:, None]
                u = np.asarray(control(t, e, mk, X), float).reshape(idx.size, -1)
                A = coeffs.on_paths("A", t, e, mk)
                B = coeffs.on_paths("B", t, e, mk)
                drift = np.einsum("pab,pb->pa", A, X) + np.einsum("pak,pk->pa", B, u)
                x_next = X + drift * h[:, None]
                for j in range(d):
                    Cj = coeffs.on_paths("C", t, e, mk, j)
                    x_next += np.einsum("pab,pb->pa", Cj, X) * dw[:, j:j + 1]
                if not np.all(np.isfinite(x_next)):
                    raise SimulationError("state became non-finite; reduce the simulation step")
                yield Substep(idx, t, h, e, mk, X, u, dw, x_next)
                state.X[idx] = x_next
                state.t[idx] = end[idx]
                state.e[idx] = e + h
            arrived = (padded[rows, ptr] <= target) & (state.t >= padded[rows, ptr])
            if not arrived.any():
                break
            who = np.nonzero(arrived)[0]
            state.marks[who] = padded_marks[who, ptr[who]]
            state.e[who] = 0.0
            ptr[who] = np.minimum(ptr[who] + 1, width)
        state.t[:] = target


# ---------------------------------------------------------------- sample path


@dataclass
class SamplePath:
    """A single recorded trajectory on event-aligned nodes."""

    jumps: JumpSequence
    times: np.ndarray
    elapsed: np.ndarray
    marks: np.ndarray
    brownian_increments: np.ndarray
    state: np.ndarray
    control: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.state)):
            raise SimulationError("recorded state is not finite")


def _split_seed(seed):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    jump_ss, brown_ss = ss.spawn(2)
    return np.random.default_rng(jump_ss), np.random.default_rng(brown_ss)


def simulate_state(coeffs: CoefficientSet, law: SwitchingLaw, control: ControlSpec, t0: float, x,
                   dt_sim: float, seed: int, horizon: float) -> SamplePath:
    """Simulate and record one path of the controlled state on ``[t0, horizon]``.

    Node ``n`` carries the state at the start of sub-step ``n``; at a jump
    node that is the post-jump mark with elapsed time 0.
    """
    jump_rng, brown_rng = _split_seed(seed)
    jumps = simulate_switching_batch(law, horizon, 1, jump_rng, start=t0)
    nodes = sim_nodes(t0, horizon, dt_sim)
    x = np.asarray(x, float).reshape(-1)
    state = MarchState(None, None, None, None)
    times, elapsed, marks, dws, states, controls = [], [], [], [], [], []
    for st in march(coeffs, control, jumps, x, nodes, brown_rng, state):
        times.append(float(st.t[0]))
        elapsed.append(float(st.e[0]))
        marks.append(int(st.marks[0]))
        dws.append(st.dw[0])
        states.append(st.x[0])
        controls.append(st.u[0])
    times.append(float(state.t[0]))
    elapsed.append(float(state.e[0]))
    marks.append(int(state.marks[0]))
    states.append(state.X[0].copy())
    n_steps = len(dws)
    k = getattr(control, "k", coeffs.k)
    return SamplePath(
        jumps=jumps.sequence(0),
        times=np.array(times),
        elapsed=np.array(elapsed),
        marks=np.array(marks),
        brownian_increments=np.asarray(dws, float).reshape(n_steps, coeffs.d),
        state=np.array(states),
        control=np.asarray(controls, float).reshape(n_steps, k),
    )


def simulate_closed_loop(coeffs: CoefficientSet, law: SwitchingLaw, sol, t0: float, x, dt_sim: float,
                         seed: int) -> SamplePath:
    """Closed loop ``dX = (A - B B' P) X dt + C X dW`` with recorded ``u = -B' P X``."""
    return simulate_state(coeffs, law, FeedbackControl(sol, coeffs), t0, x, dt_sim, seed, sol.P.grid.horizon)


def run_batches(chunk_fn: Callable, law: SwitchingLaw, horizon: float, t0: float, n_paths: int,
                seed: int, threads=None) -> list:
    """Call ``chunk_fn(jumps, brownian_rng)`` on every chunk of paths.

    Jump sequences and Brownian increments come from separate child streams,
    so different controls run with the same seed share both exactly (common
    random numbers).
    """

    def one(size, ss):
        jump_rng, brown_rng = _split_seed(ss)
        jumps = simulate_switching_batch(law, horizon, size, jump_rng, start=t0)
        return chunk_fn(jumps, brown_rng)

    return _mc.map_chunks(one, n_paths, seed, threads)


# ------------------------------------------------------------ moment estimate


@dataclass(frozen=True)
class MomentReport:
    sup_moment: float
    std_error: float
    control_energy: float
    constant: float
    bound: float
    passed: bool


def moment_constant(coeffs: CoefficientSet, duration: float) -> float:
    """Explicit constant in ``E sup|X|^2 <= K (|x|^2 + E int |u|^2)``.

    From ``|X|^2 <= 3|x|^2 + 3|int drift|^2 + 3 sup|M|^2``, Cauchy-Schwarz on the
    drift, Doob's inequality on the martingale and Gronwall.
    """
    T = duration
    lead = max(3.0, 6.0 * T * coeffs.M_B ** 2)
    rate = 6.0 * T * coeffs.M_A ** 2 + 12.0 * coeffs.d * coeffs.M_C ** 2
    return lead * math.exp(rate * T)


def moment_check(coeffs: CoefficientSet, law: SwitchingLaw, control: ControlSpec, t0: float, x,
                 n_paths: int, seed: int, horizon: float, dt_sim: float = 1e-3,
                 constant: float | None = None, threads=None) -> MomentReport:
    """Empirical ``E sup_s |X_s|^2`` against the explicit Gronwall-type bound."""
    x = np.asarray(x, float).reshape(-1)
    nodes = sim_nodes(t0, horizon, dt_sim)

    def chunk(jumps, rng):
        sup = np.full(jumps.n_paths, float(x @ x))
        energy = np.zeros(jumps.n_paths)
        for st in march(coeffs, control, jumps, x, nodes, rng):
            sup[st.idx] = np.maximum(sup[st.idx], np.einsum("pa,pa->p", st.x_next, st.x_next))
            energy[st.idx] += np.einsum("pk,pk->p", st.u, st.u) * st.h
        return sup, energy

    parts = run_batches(chunk, law, horizon, t0, n_paths, seed, threads)
    sup = np.concatenate([p[0] for p in parts])
    energy = np.concatenate([p[1] for p in parts])
    mean, se = _mc.mean_and_se(sup)
    K = moment_constant(coeffs, horizon - t0) if constant is None else float(constant)
    bound = K * (float(x @ x) + float(energy.mean()))
    return MomentReport(mean, se, float(energy.mean()), K, bound, bool(mean <= bound))
