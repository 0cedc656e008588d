"""Matrix-valued fields on a (time x elapsed-time x mark) grid.

A regime field stores one symmetric ``n x n`` matrix per node ``(t_k, e_m, i)``
where ``t_k = start + k * dt`` and ``e_m = m * dt`` share the same step, so that
the backward characteristics ``t - e = const`` pass exactly through nodes.

The module also hosts :class:`CoefficientSet`, the problem data ``A, B, C, S, G``
given as deterministic functions of ``(t, e, i)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import GridError, ModelError

SYMMETRY_TOL = 1e-10
_SNAP = 1e-9


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


@dataclass(frozen=True)
class Grid:
    """Uniform node set shared by the time and elapsed-time axes.

    Parameters
    ----------
    horizon : float
        Final time ``T``.
    n_steps : int
        Number of time steps on ``[start, horizon]``.
    e_max : float, optional
        Elapsed-time truncation. Defaults to ``horizon``; pass
        ``horizon + initial_elapsed`` when the switching law starts mid-sojourn.
    start : float
        First time node (0 unless solving on a sub-window).
    """

    horizon: float
    n_steps: int
    e_max: float | None = None
    start: float = 0.0

    def __post_init__(self):
        if not self.horizon > self.start:
            raise GridError(f"horizon {self.horizon} must exceed start {self.start}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise GridError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        if self.e_max is None:
            object.__setattr__(self, "e_max", float(self.horizon))
        if self.e_max < 0:
            raise GridError(f"e_max must be nonnegative, got {self.e_max}")

    @property
    def dt(self) -> float:
        return (self.horizon - self.start) / self.n_steps

    @property
    def n_elapsed(self) -> int:
        """Index of the last elapsed node (there are ``n_elapsed + 1`` nodes)."""
        return max(1, math.ceil(self.e_max / self.dt - _SNAP))

    @property
    def times(self) -> np.ndarray:
        return self.start + self.dt * np.arange(self.n_steps + 1)

    @property
    def elapsed(self) -> np.ndarray:
        return self.dt * np.arange(self.n_elapsed + 1)

    def time_index(self, t: float) -> int:
        """Index of the node at time ``t``; raises if ``t`` is not a node."""
        ft = (t - self.start) / self.dt
        k = int(round(ft))
        if abs(ft - k) > _SNAP or not 0 <= k <= self.n_steps:
            raise GridError(f"t={t} is not a time node of {self}")
        return k

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.horizon, self.n_steps * factor, self.e_max, self.start)

    def compatible(self, other: "Grid") -> bool:
        return (
            self.n_steps == other.n_steps
            and self.n_elapsed == other.n_elapsed
            and math.isclose(self.start, other.start, abs_tol=1e-12)
            and math.isclose(self.horizon, other.horizon, abs_tol=1e-12)
        )


class RegimeField:
    """Symmetric-matrix-valued function ``p(t, e, i)`` stored on grid nodes.

    ``values`` has shape ``(n_steps + 1, n_elapsed + 1, n_marks, n, n)``.
    """

    def __init__(self, grid: Grid, values: np.ndarray, mark_labels: Sequence[str] | None = None):
        values = np.asarray(values, dtype=float)
        expected = (grid.n_steps + 1, grid.n_elapsed + 1)
        if values.ndim != 5 or values.shape[:2] != expected or values.shape[3] != values.shape[4]:
            raise GridError(
                f"values shape {values.shape} does not match grid nodes {expected} x marks x n x n"
            )
        if not np.all(np.isfinite(values)):
            raise ModelError("regime field contains non-finite entries")
        asym = np.max(np.abs(values - np.swapaxes(values, -1, -2)), initial=0.0)
        if asym > SYMMETRY_TOL:
            raise ModelError(f"regime field is not symmetric (max asymmetry {asym:.3e})")
        self.grid = grid
        self.values = values
        self.values.setflags(write=False)
        if mark_labels is None:
            mark_labels = [str(i) for i in range(values.shape[2])]
        self.mark_labels = tuple(str(m) for m in mark_labels)

    @classmethod
    def constant(cls, grid: Grid, matrix, n_marks: int = 1, mark_labels=None) -> "RegimeField":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        shape = (grid.n_steps + 1, grid.n_elapsed + 1, n_marks) + matrix.shape
        return cls(grid, np.broadcast_to(matrix, shape).copy(), mark_labels)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable, n_marks: int, mark_labels=None) -> "RegimeField":
        """Tabulate ``fn(t, e, i)`` at every node (slow; meant for tests and small grids)."""
        rows = []
        for t in grid.times:
            rows.append([[np.atleast_2d(fn(t, e, i)) for i in range(n_marks)] for e in grid.elapsed])
        return cls(grid, symmetrize(np.array(rows, dtype=float)), mark_labels)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def n_marks(self) -> int:
        return self.values.shape[2]

    def __repr__(self):
        return f"RegimeField(grid={self.grid}, n_marks={self.n_marks}, dim={self.dim})"

    def with_values(self, values: np.ndarray) -> "RegimeField":
        return RegimeField(self.grid, values, self.mark_labels)

    def evaluate(self, t, e, i) -> np.ndarray:
        """Bilinear interpolation in ``(t, e)`` at fixed mark ``i``.

        Arguments broadcast against each other; the result has shape
        ``broadcast_shape + (n, n)``. Exact at nodes.
        """
        g = self.grid
        t, e, i = np.broadcast_arrays(np.asarray(t, float), np.asarray(e, float), np.asarray(i))
        if np.any(t < g.start - _SNAP) or np.any(t > g.horizon + _SNAP):
            raise GridError(f"time outside [{g.start}, {g.horizon}]")
        e_top = g.n_elapsed * g.dt
        if np.any(e < -_SNAP) or np.any(e > e_top + _SNAP):
            raise GridError(f"elapsed time outside [0, {e_top}]")
        if np.any(i < 0) or np.any(i >= self.n_marks):
            raise GridError(f"mark index outside [0, {self.n_marks})")
        i = i.astype(int)
        k, wt = _locate((t - g.start) / g.dt, g.n_steps)
        m, we = _locate(e / g.dt, g.n_elapsed)
        v = self.values
        wt = wt[..., None, None]
        we = we[..., None, None]
        out = (
            (1.0 - wt) * (1.0 - we) * v[k, m, i]
            + wt * (1.0 - we) * v[k + 1, m, i]
            + (1.0 - wt) * we * v[k, m + 1, i]
            + wt * we * v[k + 1, m + 1, i]
        )
        return symmetrize(out)

    def max_norm(self, axis=None) -> float | np.ndarray:
        """Largest operator norm over nodes (over all but ``axis`` if given)."""
        norms = _op_norms(self.values)
        if axis is None:
            return float(norms.max())
        other = tuple(a for a in range(norms.ndim) if a != axis)
        return norms.max(axis=other)


def _locate(f: np.ndarray, n: int):
    # snap round-off (a few ulp of the index) so nodes are reproduced exactly
    r = np.round(f)
    f = np.where(np.abs(f - r) <= 64 * np.finfo(float).eps * np.maximum(np.abs(f), 1.0), r, f)
    idx = np.clip(np.floor(f).astype(int), 0, n - 1)
    return idx, np.clip(f - idx, 0.0, 1.0)


def _op_norms(a: np.ndarray) -> np.ndarray:
    if a.shape[-1] == 1:
        return np.abs(a[..., 0, 0])
    return np.max(np.abs(np.linalg.eigvalsh(a)), axis=-1)


def evaluate(field: RegimeField, t, e, i) -> np.ndarray:
    return field.evaluate(t, e, i)


def psd_floor(field: RegimeField, tol: float = 0.0) -> float:
    """Smallest eigenvalue over all nodes; compare the result against ``-tol``."""
    v = field.values
    if v.shape[-1] == 1:
        return float(v.min())
    return float(np.linalg.eigvalsh(v).min())


def field_distance(f1: RegimeField, f2: RegimeField) -> float:
    """Sup over nodes of the operator-norm difference."""
    if not f1.grid.compatible(f2.grid) or f1.values.shape != f2.values.shape:
        raise GridError("fields live on different grids, marks or dimensions")
    return float(_op_norms(f1.values - f2.values).max(initial=0.0))


def restrict(field: RegimeField, coarse: Grid) -> np.ndarray:
    """Values of a refined field at the nodes of ``coarse`` (same horizon and e_max)."""
    factor = field.grid.n_steps // coarse.n_steps
    if factor * coarse.n_steps != field.grid.n_steps:
        raise GridError("fine grid is not an integer refinement of the coarse grid")
    v = field.values[::factor, ::factor]
    return v[: coarse.n_steps + 1, : coarse.n_elapsed + 1]


# --------------------------------------------------------------------------- CSV


def _upper_labels(n: int) -> list[str]:
    return [f"p_{a + 1}{b + 1}" for a in range(n) for b in range(a, n)]


def write_field_csv(field: RegimeField, path, stride: int = 1) -> Path:
    """One row per node ``(t, e, mark)`` with upper-triangular entries, row-major."""
    path = Path(path)
    g = field.grid
    n = field.dim
    iu = np.triu_indices(n)
    ks = list(range(0, g.n_steps + 1, stride))
    if ks[-1] != g.n_steps:
        ks.append(g.n_steps)
    ms = range(0, g.n_elapsed + 1, stride)
    times, elapsed = g.times, g.elapsed
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "e", "mark"] + _upper_labels(n))
        for k in ks:
            for m in ms:
                for i, label in enumerate(field.mark_labels):
                    entries = field.values[k, m, i][iu]
                    w.writerow([repr(float(times[k])), repr(float(elapsed[m])), label]
                               + [repr(float(x)) for x in entries])
    return path


def read_field_csv(path) -> RegimeField:
    """Inverse of :func:`write_field_csv` for a full (stride 1) export."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_upper = len(header) - 3
    n = int(round((math.sqrt(8 * n_upper + 1) - 1) / 2))
    if n * (n + 1) // 2 != n_upper:
        raise GridError(f"cannot infer matrix size from {n_upper} entries")
    ts = sorted({float(r[0]) for r in body})
    es = sorted({float(r[1]) for r in body})
    labels = list(dict.fromkeys(r[2] for r in body))
    dt = ts[1] - ts[0]
    grid = Grid(horizon=ts[-1], n_steps=len(ts) - 1, e_max=es[-1], start=ts[0])
    if grid.n_elapsed != len(es) - 1 or not math.isclose(es[1] - es[0], dt, rel_tol=1e-9):
        raise GridError("CSV nodes do not form a shared-step grid")
    values = np.zeros((len(ts), len(es), len(labels), n, n))
    iu = np.triu_indices(n)
    t_pos = {t: k for k, t in enumerate(ts)}
    e_pos = {e: m for m, e in enumerate(es)}
    l_pos = {lab: i for i, lab in enumerate(labels)}
    for r in body:
        mat = np.zeros((n, n))
        mat[iu] = [float(x) for x in r[3:]]
        mat = mat + np.triu(mat, 1).T
        values[t_pos[float(r[0])], e_pos[float(r[1])], l_pos[r[2]]] = mat
    return RegimeField(grid, values, labels)


# ------------------------------------------------------------------ coefficients


def broadcast_matrix(value, shape, rows: int, cols: int) -> np.ndarray:
    """Broadcast a callable's return value to ``shape + (rows, cols)``."""
    a = np.asarray(value, dtype=float)
    if a.ndim < 2:
        a = a.reshape(a.shape + (1,) * (2 - a.ndim)) if a.ndim else a.reshape(1, 1)
    return np.broadcast_to(a, tuple(shape) + (rows, cols))


def _constant_fn(mats: np.ndarray, takes_time: bool = True):
    if takes_time:
        return lambda t, e, i: mats[i]
    return lambda e, i: mats[i]


@dataclass(frozen=True)
class CoefficientSet:
    """Problem data as deterministic functions of ``(t, e, i)``.

    Every callable must accept array ``t`` and ``e`` (broadcasting) together
    with an integer mark ``i`` and return something broadcastable to
    ``e.shape + matrix_shape``. ``G`` takes ``(e, i)`` only.
    """

    n: int
    k: int
    d: int
    A: Callable
    B: Callable
    C: tuple
    S: Callable
    G: Callable
    M_A: float
    M_B: float
    M_C: float
    M_G: float
    M_S: float
    tables: dict | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "C", tuple(self.C))
        if len(self.C) != self.d:
            raise ModelError(f"expected {self.d} diffusion matrices, got {len(self.C)}")
        for name in ("M_A", "M_B", "M_C", "M_G", "M_S"):
            if getattr(self, name) < 0:
                raise ModelError(f"bound {name} must be nonnegative")

    @classmethod
    def per_mark(cls, A, B, S, G, C=None, bounds: dict | None = None) -> "CoefficientSet":
        """Build from one constant matrix per mark.

        ``A, B, S, G`` are sequences over marks; ``C`` is a sequence over the
        ``d`` Brownian components, each a sequence over marks. Bounds default
        to the largest operator norms.
        """
        A = np.asarray(A, float)
        B = np.asarray(B, float)
        S = symmetrize(np.asarray(S, float))
        G = symmetrize(np.asarray(G, float))
        n_marks, n = A.shape[0], A.shape[1]
        if B.ndim == 2:
            B = B[:, :, None]
        k = B.shape[2]
        Cs = [np.asarray(c, float) for c in (C if C is not None else [])]
        d = len(Cs)

        def norm(stack):
            return float(max(np.linalg.norm(m, 2) for m in stack)) if len(stack) else 0.0

        computed = dict(
            M_A=norm(A), M_B=norm(B), M_C=max((norm(c) for c in Cs), default=0.0),
            M_G=norm(G), M_S=norm(S),
        )
        if bounds:
            computed.update(bounds)
        return cls(
            n=n, k=k, d=d,
            A=_constant_fn(A), B=_constant_fn(B),
            C=tuple(_constant_fn(c) for c in Cs),
            S=_constant_fn(S), G=_constant_fn(G, takes_time=False),
            tables=dict(A=A, B=B, C=Cs, S=S, G=G, n_marks=n_marks),
            **computed,
        )

    # evaluation helpers -----------------------------------------------------

    def a(self, t, e, i):
        return broadcast_matrix(self.A(t, e, i), np.shape(e), self.n, self.n)

    def b(self, t, e, i):
        return broadcast_matrix(self.B(t, e, i), np.shape(e), self.n, self.k)

    def c(self, j, t, e, i):
        return broadcast_matrix(self.C[j](t, e, i), np.shape(e), self.n, self.n)

    def s(self, t, e, i):
        return broadcast_matrix(self.S(t, e, i), np.shape(e), self.n, self.n)

    def g(self, e, i):
        return broadcast_matrix(self.G(e, i), np.shape(e), self.n, self.n)

    def on_paths(self, name: str, t, e, marks, j: int = 0) -> np.ndarray:
        """Per-path values of ``A, B, C[j], S`` or ``G`` at ``(t, e, mark)`` arrays.

        Per-mark constant data is looked up by index; general callables are
        evaluated once per distinct mark.
        """
        if self.tables is not None:
            return (self.tables["C"][j] if name == "C" else self.tables[name])[marks]
        rows, cols = (self.n, self.k) if name == "B" else (self.n, self.n)
        out = np.empty(np.shape(marks) + (rows, cols))
        for i in np.unique(marks):
            sel = marks == i
            if name == "G":
                out[sel] = self.g(e[sel], int(i))
            elif name == "C":
                out[sel] = self.c(j, t[sel], e[sel], int(i))
            else:
                out[sel] = getattr(self, name.lower())(t[sel], e[sel], int(i))
        return out

    def gronwall_rate(self) -> float:
        """Growth rate ``2 M_A + d M_C^2`` of ``E|X|^2`` under zero control."""
        return 2.0 * self.M_A + self.d * self.M_C ** 2

    def gronwall_constant(self, duration: float) -> float:
        return math.exp(self.gronwall_rate() * duration)

    def check(self, grid: Grid, n_marks: int, samples: int = 9, atol: float = 1e-10) -> list[str]:
        """Sample ``(t, e, i)`` and report every bound or positivity violation."""
        ts = np.linspace(grid.start, grid.horizon, samples)
        es = np.linspace(0.0, grid.e_max, samples)
        out = []
        checks = [("A", self.a, self.M_A), ("B", self.b, self.M_B), ("S", self.s, self.M_S)]
        checks += [(f"C[{j}]", (lambda t, e, i, j=j: self.c(j, t, e, i)), self.M_C) for j in range(self.d)]
        for i in range(n_marks):
            for name, fn, bound in checks:
                vals = np.stack([fn(t, es, i) for t in ts])
                top = float(np.linalg.norm(vals, 2, axis=(-2, -1)).max())
                if top > bound * (1 + 1e-9) + atol:
                    out.append(f"{name} norm {top:.6g} exceeds declared bound {bound:.6g} (mark {i})")
            for name, vals, bound in (
                ("S", np.stack([self.s(t, es, i) for t in ts]), None),
                ("G", self.g(es, i), self.M_G),
            ):
                asym = float(np.abs(vals - np.swapaxes(vals, -1, -2)).max())
                if asym > atol:
                    out.append(f"{name} is not symmetric (mark {i})")
                low = float(np.linalg.eigvalsh(symmetrize(vals)).min())
                if low < -atol:
                    out.append(f"{name} has eigenvalue {low:.6g} < 0 (mark {i}); must be nonnegative definite")
                if bound is not None:
                    top = float(np.linalg.norm(vals, 2, axis=(-2, -1)).max())
                    if top > bound * (1 + 1e-9) + atol:
                        out.append(f"G norm {top:.6g} exceeds declared bound {bound:.6g} (mark {i})")
        return out
