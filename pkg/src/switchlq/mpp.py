"""Marked point process driving the regime switches.

The switching law is specified by an intensity ``lambda(t, e, i)`` depending on
time, elapsed time since the last switch and the current mark, plus a
post-jump kernel ``phi(t, e, i)`` over the finite mark set. The compensator is
then ``nu(dt, dj) = lambda(t, e_t, I_t) phi_j(t, e_t, I_t) dt``, which has no
atoms, so jump times are totally inaccessible.

Paths are drawn exactly by Lewis-Shedler thinning against the declared
``hazard_bound``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import _mc
from .exceptions import ModelError

KERNEL_TOL = 1e-12
_HAZARD_SLACK = 1e-12


# ----------------------------------------------------------------- hazards


class ConstantHazard:
    """Same rate in every mark and at every elapsed time (Poisson switching)."""

    def __init__(self, rate: float):
        self.rate = float(rate)

    def __call__(self, t, e, i):
        return np.full(np.shape(e), self.rate)

    def __repr__(self):
        return f"ConstantHazard({self.rate})"


class MarkovHazard:
    """Per-mark constant rates: the switching process is a Markov chain."""

    def __init__(self, rates: Sequence[float]):
        self.rates = np.asarray(rates, float)

    def __call__(self, t, e, i):
        return np.full(np.shape(e), self.rates[i])

    def __repr__(self):
        return f"MarkovHazard({self.rates.tolist()})"


class LinearElapsedHazard:
    """``lambda(e) = slope_i * e``, capped at ``cap``."""

    def __init__(self, slope, cap: float):
        self.slope = np.atleast_1d(np.asarray(slope, float))
        self.cap = float(cap)

    def __call__(self, t, e, i):
        s = self.slope[i] if self.slope.size > 1 else self.slope[0]
        return np.minimum(s * np.asarray(e, float), self.cap)

    def __repr__(self):
        return f"LinearElapsedHazard(slope={self.slope.tolist()}, cap={self.cap})"


class WeibullHazard:
    """``lambda(e) = scale_i * shape_i * e**(shape_i - 1)``, capped at ``cap``."""

    def __init__(self, scale, shape, cap: float):
        self.scale = np.atleast_1d(np.asarray(scale, float))
        self.shape = np.atleast_1d(np.asarray(shape, float))
        self.cap = float(cap)

    def __call__(self, t, e, i):
        lam = self.scale[i] if self.scale.size > 1 else self.scale[0]
        k = self.shape[i] if self.shape.size > 1 else self.shape[0]
        e = np.asarray(e, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = lam * k * np.power(e, k - 1.0)
        raw = np.where(np.isnan(raw), self.cap, raw)
        return np.minimum(raw, self.cap)

    def __repr__(self):
        return f"WeibullHazard(scale={self.scale.tolist()}, shape={self.shape.tolist()}, cap={self.cap})"


class PiecewiseConstantHazard:
    """Tabulated on an elapsed-time grid: ``values[i][b]`` on ``[edges[b], edges[b+1])``.

    The last value extends to infinity.
    """

    def __init__(self, edges: Sequence[float], values):
        self.edges = np.asarray(edges, float)
        self.values = np.atleast_2d(np.asarray(values, float))
        if self.edges[0] != 0.0 or np.any(np.diff(self.edges) <= 0):
            raise ModelError("hazard table edges must start at 0 and increase strictly")
        if self.values.shape[1] != self.edges.size:
            raise ModelError("hazard table needs one value per edge")

    def __call__(self, t, e, i):
        row = self.values[i] if self.values.shape[0] > 1 else self.values[0]
        b = np.searchsorted(self.edges, np.asarray(e, float), side="right") - 1
        return row[np.clip(b, 0, self.edges.size - 1)]

    def __repr__(self):
        return f"PiecewiseConstantHazard(edges={self.edges.tolist()})"


class TransitionKernel:
    """Post-jump mark distribution given by a row-stochastic matrix."""

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, float))
        m = self.matrix.shape[0]
        if self.matrix.shape != (m, m):
            raise ModelError("transition matrix must be square")
        if np.any(self.matrix < 0) or np.any(np.abs(self.matrix.sum(axis=1) - 1) > KERNEL_TOL):
            raise ModelError("transition matrix rows must be probability vectors")

    @classmethod
    def swap(cls, n_marks: int) -> "TransitionKernel":
        """Jump to one of the other marks uniformly (the identity for one mark)."""
        if n_marks == 1:
            return cls([[1.0]])
        mat = (np.ones((n_marks, n_marks)) - np.eye(n_marks)) / (n_marks - 1)
        return cls(mat)

    def __call__(self, t, e, i):
        return np.broadcast_to(self.matrix[i], np.shape(e) + (self.matrix.shape[0],))

    def __repr__(self):
        return f"TransitionKernel({self.matrix.tolist()})"


# ------------------------------------------------------------------- types


@dataclass(frozen=True)
class SwitchingLaw:
    """Finite-mark switching law with elapsed-time-dependent intensity.

    ``hazard(t, e, i)`` and ``kernel(t, e, i)`` must accept array ``t, e`` and
    an integer mark index ``i``; the kernel returns probabilities over marks in
    its last axis.
    """

    marks: tuple
    initial_mark: int
    hazard: Callable
    hazard_bound: float
    kernel: Callable
    initial_elapsed: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "marks", tuple(str(m) for m in self.marks))
        if not self.marks:
            raise ModelError("mark set must be nonempty")
        if not 0 <= int(self.initial_mark) < len(self.marks):
            raise ModelError(f"initial_mark {self.initial_mark} outside mark set")
        object.__setattr__(self, "initial_mark", int(self.initial_mark))
        if not self.hazard_bound > 0:
            raise ModelError(f"hazard_bound must be positive, got {self.hazard_bound}")
        if self.initial_elapsed < 0:
            raise ModelError("initial_elapsed must be nonnegative")

    @property
    def n_marks(self) -> int:
        return len(self.marks)

    def restarted(self, mark: int | None = None, elapsed: float | None = None) -> "SwitchingLaw":
        return replace(
            self,
            initial_mark=self.initial_mark if mark is None else mark,
            initial_elapsed=self.initial_elapsed if elapsed is None else elapsed,
        )

    def intensity(self, t, e, marks) -> np.ndarray:
        """Hazard at per-path ``(t, e, mark)`` arrays."""
        t, e, marks = np.broadcast_arrays(np.asarray(t, float), np.asarray(e, float), np.asarray(marks))
        out = np.empty(e.shape)
        for i in np.unique(marks):
            sel = marks == i
            out[sel] = np.broadcast_to(self.hazard(t[sel], e[sel], int(i)), (int(sel.sum()),))
        return out

    def transition(self, t, e, marks) -> np.ndarray:
        """Kernel rows at per-path ``(t, e, mark)`` arrays, shape ``(..., n_marks)``."""
        t, e, marks = np.broadcast_arrays(np.asarray(t, float), np.asarray(e, float), np.asarray(marks))
        out = np.empty(e.shape + (self.n_marks,))
        for i in np.unique(marks):
            sel = marks == i
            out[sel] = self.kernel(t[sel], e[sel], int(i))
        return out

    def check(self, horizon: float, samples: int = 41) -> list[str]:
        """Sample the hazard and kernel and report invariant violations."""
        out = []
        ts = np.linspace(0.0, horizon, samples)
        es = np.linspace(0.0, horizon + self.initial_elapsed, samples)
        tt, ee = np.meshgrid(ts, es, indexing="ij")
        for i in range(self.n_marks):
            lam = np.broadcast_to(self.hazard(tt, ee, i), tt.shape)
            if np.any(lam < 0) or np.any(lam > self.hazard_bound + _HAZARD_SLACK):
                out.append(
                    f"hazard in mark {self.marks[i]} leaves [0, hazard_bound={self.hazard_bound}]"
                    f" (range {lam.min():.6g}..{lam.max():.6g})"
                )
            phi = np.broadcast_to(self.kernel(tt, ee, i), tt.shape + (self.n_marks,))
            if np.any(phi < 0) or np.any(np.abs(phi.sum(axis=-1) - 1.0) > KERNEL_TOL):
                out.append(f"kernel in mark {self.marks[i]} is not a probability vector")
        return out


@dataclass(frozen=True)
class JumpSequence:
    """Jump times ``T_n`` (strictly increasing) and post-jump marks ``xi_n``."""

    times: np.ndarray
    marks: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, float)
        marks = np.asarray(self.marks, int)
        if times.shape != marks.shape or times.ndim != 1:
            raise ModelError("times and marks must be 1-d arrays of equal length")
        if np.any(np.diff(times) <= 0):
            raise ModelError("jump times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)

    def __len__(self):
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, JumpSequence):
            return NotImplemented
        return np.array_equal(self.times, other.times) and np.array_equal(self.marks, other.marks)

    def __hash__(self):
        return hash((self.times.tobytes(), self.marks.tobytes()))


@dataclass(frozen=True)
class JumpBatch:
    """Many jump sequences, padded: ``times`` uses ``inf`` and ``marks`` uses -1."""

    times: np.ndarray
    marks: np.ndarray
    start: float
    initial_elapsed: float
    initial_mark: int

    @property
    def n_paths(self) -> int:
        return self.times.shape[0]

    def counts(self) -> np.ndarray:
        return np.isfinite(self.times).sum(axis=1)

    def sequence(self, p: int) -> JumpSequence:
        c = int(np.isfinite(self.times[p]).sum())
        return JumpSequence(self.times[p, :c].copy(), self.marks[p, :c].copy())


# -------------------------------------------------------------- simulation


def simulate_switching_batch(
    law: SwitchingLaw, horizon: float, n_paths: int, rng: np.random.Generator, start: float = 0.0
) -> JumpBatch:
    """Thinning for ``n_paths`` independent paths on ``(start, horizon]``.

    The law's initial mark and elapsed time apply at ``start``.
    """
    if not horizon > start:
        raise ModelError(f"horizon {horizon} must exceed start {start}")
    lam_max = float(law.hazard_bound)
    t = np.full(n_paths, float(start))
    anchor = np.full(n_paths, start - law.initial_elapsed)
    mark = np.full(n_paths, law.initial_mark, dtype=int)
    alive = np.arange(n_paths)
    ev_path, ev_time, ev_mark = [], [], []
    while alive.size:
        cand = t[alive] + rng.exponential(1.0 / lam_max, size=alive.size)
        u_accept = rng.random(alive.size)
        u_mark = rng.random(alive.size)
        inside = cand <= horizon
        alive, cand, u_accept, u_mark = alive[inside], cand[inside], u_accept[inside], u_mark[inside]
        if not alive.size:
            break
        e = cand - anchor[alive]
        lam = law.intensity(cand, e, mark[alive])
        if np.any(lam > lam_max + _HAZARD_SLACK) or np.any(lam < 0):
            raise ModelError(
                f"hazard value {lam.max():.6g} exceeds hazard_bound {lam_max:.6g}; the model is misspecified"
            )
        accept = u_accept * lam_max < lam
        if np.any(accept):
            who = alive[accept]
            tc, ec = cand[accept], e[accept]
            phi = law.transition(tc, ec, mark[who])
            cdf = np.cumsum(phi, axis=1)
            new = (u_mark[accept, None] >= cdf[:, :-1]).sum(axis=1)
            ev_path.append(who)
            ev_time.append(tc)
            ev_mark.append(new)
            mark[who] = new
            anchor[who] = tc
        t[alive] = cand
    return _pad(n_paths, ev_path, ev_time, ev_mark, start, law)


def _pad(n_paths, ev_path, ev_time, ev_mark, start, law) -> JumpBatch:
    if ev_path:
        p = np.concatenate(ev_path)
        tm = np.concatenate(ev_time)
        mk = np.concatenate(ev_mark)
        order = np.lexsort((tm, p))
        p, tm, mk = p[order], tm[order], mk[order]
        counts = np.bincount(p, minlength=n_paths)
    else:
        p = tm = mk = np.zeros(0)
        counts = np.zeros(n_paths, int)
    width = int(counts.max(initial=0))
    times = np.full((n_paths, width), np.inf)
    marks = np.full((n_paths, width), -1, dtype=int)
    if width:
        first = np.concatenate(([0], np.cumsum(counts)[:-1]))
        col = np.arange(p.size) - first[p.astype(int)]
        times[p.astype(int), col] = tm
        marks[p.astype(int), col] = mk
    return JumpBatch(times, marks, float(start), float(law.initial_elapsed), law.initial_mark)


def simulate_switching(law: SwitchingLaw, horizon: float, seed: int, start: float = 0.0) -> JumpSequence:
    """One jump sequence on ``(start, horizon]``; identical seeds give identical output."""
    batch = simulate_switching_batch(law, horizon, 1, np.random.default_rng(seed), start)
    return batch.sequence(0)


def elapsed_and_mark(seq: JumpSequence, law: SwitchingLaw, t: float, start: float = 0.0):
    """Elapsed time and current mark at ``t`` (right-continuous at jumps)."""
    if t < start:
        raise ModelError(f"t={t} precedes the start {start}")
    n = int(np.searchsorted(seq.times, t, side="right"))
    if n == 0:
        return t - start + law.initial_elapsed, law.initial_mark
    return t - seq.times[n - 1], int(seq.marks[n - 1])


# ----------------------------------------------------------- compensator


@dataclass(frozen=True)
class CompensatorResult:
    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float
    se_diff: float
    n_paths: int

    @property
    def gap(self) -> float:
        return self.lhs - self.rhs

    def agrees(self, n_se: float = 3.0) -> bool:
        return abs(self.gap) <= n_se * self.se_diff


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)
_GL_PANELS = 4


def _compensator_chunk(law, horizon, test_fn, size, ss):
    rng = np.random.default_rng(ss)
    jb = simulate_switching_batch(law, horizon, size, rng)
    n, width = jb.times.shape
    lo = np.concatenate([np.full((n, 1), jb.start), jb.times], axis=1)
    hi = np.concatenate([jb.times, np.full((n, 1), np.inf)], axis=1)
    hi = np.minimum(hi, horizon)
    seg_mark = np.concatenate([np.full((n, 1), jb.initial_mark), jb.marks], axis=1)
    anchor = np.concatenate([np.full((n, 1), jb.start - jb.initial_elapsed), jb.times], axis=1)

    # sum over jumps of H(T_n, e_{T_n-}, I_{T_n-}, xi_n)
    lhs = np.zeros(n)
    if width:
        valid = np.isfinite(jb.times)
        rows = np.nonzero(valid)[0]
        tj = jb.times[valid]
        ej = tj - anchor[:, :-1][valid]
        vals = np.broadcast_to(test_fn(tj, ej, seg_mark[:, :-1][valid], jb.marks[valid]), tj.shape)
        lhs = np.bincount(rows, weights=vals, minlength=n)

    # integral of sum_j H(s, e_s, I_s, j) phi_j lambda ds, composite Gauss-Legendre per segment
    valid = lo < hi
    rows = np.nonzero(valid)[0]
    a, b = lo[valid], hi[valid]
    mk, anc = seg_mark[valid], anchor[valid]
    edges = a[:, None] + (b - a)[:, None] * np.linspace(0, 1, _GL_PANELS + 1)[None, :]
    pa, pb = edges[:, :-1], edges[:, 1:]
    s = 0.5 * (pa + pb)[..., None] + 0.5 * (pb - pa)[..., None] * _GL_NODES
    w = 0.5 * (pb - pa)[..., None] * _GL_WEIGHTS
    s = s.reshape(len(a), -1)
    w = w.reshape(len(a), -1)
    e = s - anc[:, None]
    mk2 = np.broadcast_to(mk[:, None], s.shape)
    lam = law.intensity(s, e, mk2)
    phi = law.transition(s, e, mk2)
    integrand = np.zeros(s.shape)
    for j in range(law.n_marks):
        integrand += np.broadcast_to(test_fn(s, e, mk2, j), s.shape) * phi[..., j]
    seg_int = (integrand * lam * w).sum(axis=1)
    rhs = np.bincount(rows, weights=seg_int, minlength=n)
    return lhs, rhs


def compensator_check(
    law: SwitchingLaw, horizon: float, test_fn: Callable, n_paths: int, seed: int, threads=None
) -> CompensatorResult:
    """Monte-Carlo check of ``E sum_n H(T_n, ., xi_n) = E int sum_j H phi_j lambda ds``.

    ``test_fn(t, e, i, j)`` must be bounded and broadcast over array arguments.
    """
    if n_paths < 100:
        raise ModelError("compensator_check needs at least 100 paths")
    parts = _mc.map_chunks(
        lambda size, ss: _compensator_chunk(law, horizon, test_fn, size, ss), n_paths, seed, threads
    )
    lhs = np.concatenate([p[0] for p in parts])
    rhs = np.concatenate([p[1] for p in parts])
    ml, sl = _mc.mean_and_se(lhs)
    mr, sr = _mc.mean_and_se(rhs)
    _, sd = _mc.mean_and_se(lhs - rhs)
    return CompensatorResult(ml, mr, sl, sr, sd, n_paths)
