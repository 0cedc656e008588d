"""JSON experiment configuration: validation, model construction and batch runs.

Schema (matrices are nested lists, row-major, one matrix per mark)::

    {
      "name": "scalar",
      "model": {"A": [...], "B": [...], "C": [[...], ...], "S": [...], "G": [...],
                "bounds": {"M_A": ..., "M_B": ..., "M_C": ..., "M_G": ..., "M_S": ...}},
      "switching": {"marks": ["0", "1"], "initial_mark": 0, "initial_elapsed": 0.0,
                    "hazard": {"family": "markov", "rates": [1.0, 1.5]},
                    "hazard_bound": 1.5, "kernel": "swap"},
      "grid": {"horizon": 1.0, "n_steps": 1000, "e_max": null},
      "solver": {"backend": "direct" | "picard" | "both", "tol": 1e-10, "max_iter": 50},
      "monte_carlo": {"n_paths": 10000, "dt_sim": 0.001, "root_seed": 1},
      "initial_state": {"t0": 0.0, "x": [1.0]},
      "experiments": [{"kind": "value_check", "params": {...}}, ...],
      "output": {"field_stride": 1, "sample_paths": 0},
      "output_dir": "runs/scalar"
    }

``C`` lists one per-mark stack for each Brownian component. Hazard families
are ``constant`` (``rate``), ``markov`` (``rates``), ``linear_in_elapsed``
(``slope``, capped at ``hazard_bound``), ``weibull`` (``scale``, ``shape``,
capped) and ``table`` (``edges``, ``values``). ``kernel`` is ``"swap"`` or a
row-stochastic matrix.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import platform
from dataclasses import astuple, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .convergence import field_refinement, weak_error_study
from .dynamics import (
    FeedbackControl,
    OpenLoopControl,
    ZeroControl,
    moment_check,
    simulate_state,
)
from .exceptions import ConfigError, ModelError
from .instances import mark_averaged, rate_matched_markov
from .lq import fundamental_relation_residual, optimality_experiment
from .lyapunov import LyapunovProblem, solve_lyapunov, stability_number
from .mpp import (
    ConstantHazard,
    LinearElapsedHazard,
    MarkovHazard,
    PiecewiseConstantHazard,
    SwitchingLaw,
    TransitionKernel,
    WeibullHazard,
    compensator_check,
)
from .regime_field import CoefficientSet, Grid, write_field_csv
from .riccati import apriori_checks, apriori_bound, solve_riccati_direct, solve_riccati_picard

BACKENDS = ("direct", "picard", "both")
HAZARD_FAMILIES = ("constant", "markov", "linear_in_elapsed", "weibull", "table")
EXPERIMENT_KINDS = ("value_check", "fundamental_relation", "optimality", "compensator", "moment",
                    "convergence", "markov_approximation")
CONTRACTION_LIMIT = 0.6

DEFAULTS = {
    "solver": {"backend": "direct", "tol": 1e-10, "max_iter": 50},
    "monte_carlo": {"n_paths": 10000, "dt_sim": None, "root_seed": 0},
    "initial_state": {"t0": 0.0, "x": None},
    "experiments": [],
    "output": {"field_stride": 1, "sample_paths": 0},
    "output_dir": "switchlq-output",
}


def load(path) -> dict:
    with Path(path).open() as fh:
        return json.load(fh)


def with_defaults(cfg: dict) -> dict:
    out = copy.deepcopy(cfg)
    for key, val in DEFAULTS.items():
        if isinstance(val, dict):
            merged = dict(val)
            merged.update(out.get(key) or {})
            out[key] = merged
        else:
            out.setdefault(key, copy.deepcopy(val))
    return out


# ---------------------------------------------------------------- validation


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _array(v, ndim):
    try:
        a = np.asarray(v, float)
    except (TypeError, ValueError):
        return None
    return a if a.ndim == ndim and np.all(np.isfinite(a)) else None


def validate(cfg) -> list[str]:
    """Every violation as ``"<json path>: <broken invariant>"``; empty iff runnable."""
    if not isinstance(cfg, dict):
        return ["$: configuration must be a JSON object"]
    errs: list[str] = []
    for key in ("model", "switching", "grid"):
        if not isinstance(cfg.get(key), dict):
            errs.append(f"{key}: required object is missing")
    if errs:
        return errs
    cfg = with_defaults(cfg)
    dims = _validate_model(cfg["model"], errs)
    m = _validate_switching(cfg["switching"], errs, dims)
    _validate_grid(cfg, errs)
    _validate_solver(cfg["solver"], errs)
    _validate_mc(cfg["monte_carlo"], errs)
    _validate_state(cfg, dims, errs)
    _validate_experiments(cfg["experiments"], errs)
    out = cfg["output"]
    if not (_int(out.get("field_stride")) and out["field_stride"] >= 1):
        errs.append("output.field_stride: must be a positive integer")
    if not (_int(out.get("sample_paths")) and out["sample_paths"] >= 0):
        errs.append("output.sample_paths: must be a nonnegative integer")
    if not isinstance(cfg.get("output_dir"), str) or not cfg["output_dir"]:
        errs.append("output_dir: must be a nonempty string")
    if not errs and dims is not None and m is not None:
        _validate_built(cfg, errs)
    return errs


def _validate_model(model, errs):
    A = _array(model.get("A"), 3)
    if A is None or A.shape[1] != A.shape[2] or A.shape[0] < 1:
        errs.append("model.A: must be a nonempty list of square matrices, one per mark")
        return None
    m, n = A.shape[0], A.shape[1]
    B = _array(model.get("B"), 3)
    if B is None or B.shape[:2] != (m, n) or B.shape[2] < 1:
        errs.append(f"model.B: must be {m} matrices with {n} rows")
        B = None
    for name in ("S", "G"):
        M = _array(model.get(name), 3)
        if M is None or M.shape != (m, n, n):
            errs.append(f"model.{name}: must be {m} matrices of shape {n}x{n}")
            continue
        for i, mat in enumerate(M):
            if np.abs(mat - mat.T).max() > 1e-10:
                errs.append(f"model.{name}[{i}]: must be symmetric")
            elif np.linalg.eigvalsh(mat).min() < -1e-12:
                errs.append(
                    f"model.{name}[{i}]: must be nonnegative definite"
                    f" (smallest eigenvalue {np.linalg.eigvalsh(mat).min():.6g})"
                )
    C = model.get("C", [])
    if not isinstance(C, list):
        errs.append("model.C: must be a list of per-mark matrix stacks")
    else:
        for j, cj in enumerate(C):
            a = _array(cj, 3)
            if a is None or a.shape != (m, n, n):
                errs.append(f"model.C[{j}]: must be {m} matrices of shape {n}x{n}")
    bounds = model.get("bounds", {})
    if not isinstance(bounds, dict):
        errs.append("model.bounds: must be an object")
    else:
        for key, v in bounds.items():
            if key not in ("M_A", "M_B", "M_C", "M_G", "M_S"):
                errs.append(f"model.bounds.{key}: unknown bound")
            elif not _num(v) or v < 0:
                errs.append(f"model.bounds.{key}: must be a nonnegative number")
    return None if B is None else (m, n, B.shape[2])


def _validate_switching(sw, errs, dims):
    m = None if dims is None else dims[0]
    marks = sw.get("marks")
    if marks is not None:
        if not isinstance(marks, list) or not marks or len(set(map(str, marks))) != len(marks):
            errs.append("switching.marks: must be a nonempty list of distinct labels")
        elif m is not None and len(marks) != m:
            errs.append(f"switching.marks: has {len(marks)} labels but the model has {m} marks")
    hb = sw.get("hazard_bound")
    if not _num(hb) or hb <= 0:
        errs.append("switching.hazard_bound: must be a positive number")
    im = sw.get("initial_mark", 0)
    if not _int(im) or im < 0 or (m is not None and im >= m):
        errs.append("switching.initial_mark: must index an existing mark")
    ie = sw.get("initial_elapsed", 0.0)
    if not _num(ie) or ie < 0:
        errs.append("switching.initial_elapsed: must be a nonnegative number")
    hz = sw.get("hazard")
    if not isinstance(hz, dict) or hz.get("family") not in HAZARD_FAMILIES:
        errs.append(f"switching.hazard.family: must be one of {', '.join(HAZARD_FAMILIES)}")
    else:
        need = {"constant": ("rate",), "markov": ("rates",), "linear_in_elapsed": ("slope",),
                "weibull": ("scale", "shape"), "table": ("edges", "values")}[hz["family"]]
        for key in need:
            v = hz.get(key)
            arr = np.asarray(v, float) if v is not None else None
            if arr is None or not np.all(np.isfinite(arr)) or np.any(arr < 0):
                errs.append(f"switching.hazard.{key}: must be nonnegative numbers")
            elif hz["family"] == "markov" and m is not None and arr.shape != (m,):
                errs.append(f"switching.hazard.rates: must list one rate per mark ({m})")
    kern = sw.get("kernel", "swap")
    if kern != "swap":
        K = _array(kern, 2)
        if K is None or (m is not None and K.shape != (m, m)):
            errs.append("switching.kernel: must be \"swap\" or a square matrix over the marks")
        elif np.any(K < 0) or np.abs(K.sum(axis=1) - 1).max() > 1e-12:
            errs.append("switching.kernel: rows must be probability vectors")
    return m


def _validate_grid(cfg, errs):
    g = cfg["grid"]
    h = g.get("horizon")
    if not _num(h) or h <= 0:
        errs.append("grid.horizon: must be a positive number")
    ns = g.get("n_steps")
    if not _int(ns) or ns < 2:
        errs.append("grid.n_steps: must be an integer >= 2")
    em = g.get("e_max")
    if em is not None:
        ie = cfg["switching"].get("initial_elapsed", 0.0)
        if not _num(em) or (_num(h) and _num(ie) and em < h + ie - 1e-12):
            errs.append("grid.e_max: must be at least horizon + switching.initial_elapsed")


def _validate_solver(s, errs):
    if s.get("backend") not in BACKENDS:
        errs.append(f"solver.backend: must be one of {', '.join(BACKENDS)}")
    if not _num(s.get("tol")) or s["tol"] <= 0:
        errs.append("solver.tol: must be a positive number")
    if not _int(s.get("max_iter")) or s["max_iter"] < 1:
        errs.append("solver.max_iter: must be a positive integer")


def _validate_mc(mc, errs):
    if not _int(mc.get("n_paths")) or mc["n_paths"] < 100:
        errs.append("monte_carlo.n_paths: must be an integer >= 100")
    if mc.get("dt_sim") is not None and (not _num(mc["dt_sim"]) or mc["dt_sim"] <= 0):
        errs.append("monte_carlo.dt_sim: must be a positive number")
    if not _int(mc.get("root_seed")) or mc["root_seed"] < 0:
        errs.append("monte_carlo.root_seed: must be a nonnegative integer")


def _validate_state(cfg, dims, errs):
    st = cfg["initial_state"]
    if not _num(st.get("t0")) or st["t0"] < 0:
        errs.append("initial_state.t0: must be a nonnegative number")
    elif _num(cfg["grid"].get("horizon")) and st["t0"] >= cfg["grid"]["horizon"]:
        errs.append("initial_state.t0: must be below grid.horizon")
    x = st.get("x")
    if x is not None:
        a = _array(x, 1)
        if a is None or (dims is not None and a.size != dims[1]):
            errs.append("initial_state.x: must be a vector of the state dimension")


def _validate_experiments(exps, errs):
    if not isinstance(exps, list):
        errs.append("experiments: must be a list")
        return
    for idx, ex in enumerate(exps):
        if not isinstance(ex, dict) or ex.get("kind") not in EXPERIMENT_KINDS:
            errs.append(f"experiments[{idx}].kind: must be one of {', '.join(EXPERIMENT_KINDS)}")
            continue
        params = ex.get("params", {})
        if not isinstance(params, dict):
            errs.append(f"experiments[{idx}].params: must be an object")
            continue
        for key in ("controls", "perturbations", "strict"):
            for c in params.get(key, []):
                if parse_control_label(c) is None:
                    errs.append(f"experiments[{idx}].params.{key}: unknown control {c!r}")
        if ex["kind"] == "convergence" and params.get("target", "riccati") not in ("riccati", "lyapunov", "simulator"):
            errs.append(f"experiments[{idx}].params.target: must be riccati, lyapunov or simulator")
        if ex["kind"] == "compensator":
            for f in params.get("test_functions", ["one"]):
                if not (f == "one" or (isinstance(f, str) and f.startswith("mark:"))):
                    errs.append(f"experiments[{idx}].params.test_functions: unknown test function {f!r}")


def _validate_built(cfg, errs):
    """Checks that need the constructed model: declared bounds and stability."""
    try:
        coeffs, law, grid = build(cfg)
    except (ModelError, ValueError) as exc:
        errs.append(f"model: {exc}")
        return
    for msg in coeffs.check(grid, law.n_marks):
        errs.append(f"model.bounds: {msg}")
    for msg in law.check(grid.horizon):
        errs.append(f"switching.hazard_bound: {msg}")
    q = stability_number(coeffs, law, grid.dt)
    if not q < 1:
        errs.append(f"grid.n_steps: step too coarse, dt*(2M_A + d M_C^2 + 2 hazard_bound) = {q:.4g} must be < 1")


# -------------------------------------------------------------- construction


def build_hazard(hz: dict, bound: float):
    fam = hz["family"]
    if fam == "constant":
        return ConstantHazard(hz["rate"])
    if fam == "markov":
        return MarkovHazard(hz["rates"])
    if fam == "linear_in_elapsed":
        return LinearElapsedHazard(hz["slope"], bound)
    if fam == "weibull":
        return WeibullHazard(hz["scale"], hz["shape"], bound)
    return PiecewiseConstantHazard(hz["edges"], hz["values"])


def build(cfg: dict):
    """``(coeffs, law, grid)`` from a configuration (validated or with defaults applied)."""
    cfg = with_defaults(cfg)
    mod, sw, g = cfg["model"], cfg["switching"], cfg["grid"]
    coeffs = CoefficientSet.per_mark(A=mod["A"], B=mod["B"], S=mod["S"], G=mod["G"],
                                     C=mod.get("C") or None, bounds=mod.get("bounds") or None)
    m = len(mod["A"])
    marks = tuple(str(x) for x in sw.get("marks", range(m)))
    kernel = TransitionKernel.swap(m) if sw.get("kernel", "swap") == "swap" else TransitionKernel(sw["kernel"])
    law = SwitchingLaw(marks, sw.get("initial_mark", 0), build_hazard(sw["hazard"], sw["hazard_bound"]),
                       sw["hazard_bound"], kernel, sw.get("initial_elapsed", 0.0))
    e_max = g.get("e_max")
    if e_max is None:
        e_max = g["horizon"] + law.initial_elapsed
    grid = Grid(g["horizon"], g["n_steps"], e_max=e_max)
    return coeffs, law, grid


# ------------------------------------------------------------------ controls


def parse_control_label(label):
    """``("zero" | "feedback" | "mark_blind" | "constant", offset)`` or ``None``.

    Accepted: ``zero``, ``feedback``, ``feedback+0.1``, ``feedback-0.1``,
    ``constant:0.3`` and ``mark_blind``.
    """
    if not isinstance(label, str):
        return None
    if label in ("zero", "feedback", "mark_blind"):
        return label, 0.0
    for prefix, kind in (("feedback", "feedback"), ("constant:", "constant")):
        if label.startswith(prefix):
            try:
                return kind, float(label[len(prefix):])
            except ValueError:
                return None
    return None


def make_control(label: str, sol, coeffs, law, grid):
    kind, offset = parse_control_label(label)
    k = coeffs.k
    if kind == "zero":
        return ZeroControl(k)
    if kind == "constant":
        return OpenLoopControl.constant([offset] * k, label=label)
    if kind == "mark_blind":
        avg = mark_averaged(coeffs)
        blind = solve_riccati_direct(avg, law, grid, check=False)
        return FeedbackControl(blind, avg, label=label)
    pert = None if offset == 0 else OpenLoopControl.constant([offset] * k, label=f"{offset:+g}")
    return FeedbackControl(sol, coeffs, perturbation=pert, label=label)


def _test_function(name: str):
    if name == "one":
        return lambda t, e, i, j: np.ones(np.shape(t))
    target = int(name.split(":", 1)[1])
    return lambda t, e, i, j: np.broadcast_to(np.asarray(i) == target, np.shape(t)).astype(float)


# ------------------------------------------------------------------- running


@dataclass(frozen=True)
class Row:
    experiment: str
    label: str
    metric: str
    value: float
    reference: float
    std_error: float
    tolerance: float
    test: str
    passed: bool


RESULT_HEADER = [f for f in Row.__dataclass_fields__]


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def experiment_seed(root_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([root_seed, index]).generate_state(1)[0])


@dataclass
class RunResult:
    exit_code: int
    rows: list
    files: dict = field(default_factory=dict)
    output_dir: Path | None = None

    @property
    def passed(self) -> bool:
        return self.exit_code == 0


class _Context:
    def __init__(self, cfg, threads):
        self.cfg = cfg
        self.coeffs, self.law, self.grid = build(cfg)
        self.threads = threads
        mc = cfg["monte_carlo"]
        self.n_paths = mc["n_paths"]
        self.dt_sim = mc["dt_sim"] if mc["dt_sim"] is not None else self.grid.dt
        self.t0 = cfg["initial_state"]["t0"]
        x = cfg["initial_state"]["x"]
        self.x = np.ones(self.coeffs.n) if x is None else np.asarray(x, float)
        self.solutions = {}
        self.optimality_tables = []

    @property
    def sol(self):
        return self.solutions.get("direct") or self.solutions["picard"]

    def value0(self):
        return self.sol.value(self.t0, self.law.initial_elapsed, self.law.initial_mark, self.x)


def _solve(ctx: _Context) -> list[Row]:
    s = ctx.cfg["solver"]
    backends = ("direct", "picard") if s["backend"] == "both" else (s["backend"],)
    rows = []
    for b in backends:
        if b == "direct":
            sol = solve_riccati_direct(ctx.coeffs, ctx.law, ctx.grid, check=False)
        else:
            sol = solve_riccati_picard(ctx.coeffs, ctx.law, ctx.grid, tol=s["tol"], max_iter=s["max_iter"], check=False)
            d = sol.diagnostics
            rows.append(Row("solver", b, "max_contraction", d.max_contraction, 0.0, 0.0, CONTRACTION_LIMIT, "le",
                            d.max_contraction <= CONTRACTION_LIMIT))
            rows.append(Row("solver", b, "max_iterations", float(d.max_iterations), 0.0, 0.0, float(s["max_iter"]),
                            "le", d.max_iterations <= s["max_iter"]))
        ctx.solutions[b] = sol
        rep = apriori_checks(sol)
        rows.append(Row("solver", b, "psd_floor", rep.psd_floor, 0.0, 0.0, -rep.tol_psd, "ge", rep.positive))
        rows.append(Row("solver", b, "max_norm", rep.max_norm, 0.0, 0.0, rep.bound, "le", rep.bounded))
    if len(backends) == 2:
        dist = float(np.abs(ctx.solutions["direct"].P.values - ctx.solutions["picard"].P.values).max())
        tol = max(10 * s["tol"], 5 * ctx.grid.dt)
        rows.append(Row("solver", "both", "backend_distance", dist, 0.0, 0.0, tol, "le", dist <= tol))
    return rows


def _exp_value_check(ctx, p, seed, name):
    rows = []
    val = ctx.value0()
    if p.get("exact") is not None:
        tol = p.get("exact_tolerance") or 2 * ctx.grid.dt
        rows.append(Row(name, "solver", "value", val, float(p["exact"]), 0.0, tol, "abs_diff_le",
                        abs(val - p["exact"]) <= tol))
    if p.get("monte_carlo", True):
        rep = optimality_experiment(ctx.coeffs, ctx.law, ctx.sol, ctx.t0, ctx.x, [], p.get("n_paths", ctx.n_paths),
                                    seed, ctx.dt_sim, ctx.threads)
        f = rep.feedback
        rows.append(Row(name, "feedback", "mc_cost", f.mean, val, f.std_error, 3 * f.std_error + rep.allowance,
                        "abs_diff_le", rep.value_passed))
    return rows


def _exp_relation(ctx, p, seed, name):
    rows = []
    for label in p.get("controls", ["zero", "feedback", "feedback+0.1"]):
        ctrl = make_control(label, ctx.sol, ctx.coeffs, ctx.law, ctx.grid)
        r = fundamental_relation_residual(ctx.sol, ctx.coeffs, ctx.law, ctx.t0, ctx.x, ctrl,
                                          p.get("n_paths", ctx.n_paths), ctx.dt_sim, seed, ctx.threads)
        rows.append(Row(name, label, "residual", r.residual, 0.0, r.std_error, 3 * r.std_error + r.allowance,
                        "abs_diff_le", r.passed()))
    return rows


def _exp_optimality(ctx, p, seed, name):
    labels = p.get("perturbations", ["zero", "feedback+0.1", "feedback-0.1"])
    strict = set(p.get("strict", []))
    ctrls = [make_control(lb, ctx.sol, ctx.coeffs, ctx.law, ctx.grid) for lb in labels]
    rep = optimality_experiment(ctx.coeffs, ctx.law, ctx.sol, ctx.t0, ctx.x, ctrls, p.get("n_paths", ctx.n_paths),
                                seed, ctx.dt_sim, ctx.threads)
    f = rep.feedback
    rows = [Row(name, "feedback", "mc_cost", f.mean, rep.value, f.std_error, 3 * f.std_error + rep.allowance,
                "abs_diff_le", rep.value_passed)]
    for lb, c in zip(labels, rep.comparisons):
        rows.append(Row(name, lb, "cost_gap", c.gap, 0.0, c.gap_se, -(3 * c.gap_se + rep.allowance), "ge", c.dominated))
        if lb in strict:
            rows.append(Row(name, lb, "strict_gap", c.gap, 0.0, c.gap_se, 3 * c.gap_se, "gt", c.strictly_cheaper))
    ctx.optimality_tables.append((name, rep))
    return rows


def _exp_compensator(ctx, p, seed, name):
    rows = []
    for j, fn in enumerate(p.get("test_functions", ["one"])):
        r = compensator_check(ctx.law, ctx.grid.horizon, _test_function(fn), p.get("n_paths", ctx.n_paths),
                              experiment_seed(seed, j), ctx.threads)
        rows.append(Row(name, fn, "jump_sum", r.lhs, r.rhs, r.se_diff, 3 * r.se_diff, "abs_diff_le", r.agrees()))
    return rows


def _exp_moment(ctx, p, seed, name):
    label = p.get("control", "zero")
    ctrl = make_control(label, ctx.sol, ctx.coeffs, ctx.law, ctx.grid)
    r = moment_check(ctx.coeffs, ctx.law, ctrl, ctx.t0, ctx.x, p.get("n_paths", ctx.n_paths), seed,
                     ctx.grid.horizon, ctx.dt_sim, p.get("constant"), ctx.threads)
    return [Row(name, label, "sup_moment", r.sup_moment, 0.0, r.std_error, r.bound, "le", r.passed)]


def _exp_convergence(ctx, p, seed, name):
    target = p.get("target", "riccati")
    levels = p.get("levels", 3)
    if target == "simulator":
        st = weak_error_study(ctx.coeffs, ctx.law, float(ctx.x[0]), ctx.grid.horizon,
                              p.get("dt_sims", [0.1, 0.05, 0.025]), p.get("n_paths", ctx.n_paths), seed, ctx.threads)
    else:
        base = Grid(ctx.grid.horizon, p.get("base_steps", 100), e_max=ctx.grid.e_max)
        i0, e0 = ctx.law.initial_mark, ctx.law.initial_elapsed
        if target == "riccati":
            def solve(g):
                return solve_riccati_direct(ctx.coeffs, ctx.law, g, check=False).P
        else:
            prob = LyapunovProblem(ctx.coeffs, ctx.law, ctx.coeffs.G, ctx.coeffs.S, ctx.coeffs.M_S)

            def solve(g):
                return solve_lyapunov(prob, g).P
        st = field_refinement(solve, base, lambda P: float(ctx.x @ P.evaluate(ctx.t0, e0, i0) @ ctx.x), levels)
    rows = []
    for j, r in enumerate(st.ratios):
        rows.append(Row(name, target, f"ratio_{j + 1}", r, 2.0, 0.0, 0.4, "abs_diff_le", 1.6 <= r <= 2.4))
    return rows


def _exp_markov_approx(ctx, p, seed, name):
    """Solver value against the rate-matched constant-hazard law."""
    approx = rate_matched_markov(ctx.law)
    other = solve_riccati_direct(ctx.coeffs, approx, ctx.grid, check=False)
    val = ctx.value0()
    ref = other.value(ctx.t0, ctx.law.initial_elapsed, ctx.law.initial_mark, ctx.x)
    tol = 5 * ctx.grid.dt * apriori_bound(ctx.coeffs, ctx.grid) * float(ctx.x @ ctx.x)
    return [Row(name, "rate_matched", "value_gap", val - ref, 0.0, 0.0, tol, "abs_gt", abs(val - ref) > tol)]


RUNNERS = {
    "value_check": _exp_value_check,
    "fundamental_relation": _exp_relation,
    "optimality": _exp_optimality,
    "compensator": _exp_compensator,
    "moment": _exp_moment,
    "convergence": _exp_convergence,
    "markov_approximation": _exp_markov_approx,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions():
    import scipy

    return {"switchlq": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def run(cfg: dict, output_dir=None, seed_override: int | None = None, threads: int | None = None) -> RunResult:
    """Validate, solve, run every experiment and write the output files.

    Raises :class:`ConfigError` listing every violation if the configuration
    does not validate.
    """
    cfg = with_defaults(cfg)
    if seed_override is not None:
        cfg["monte_carlo"]["root_seed"] = int(seed_override)
    if output_dir is not None:
        cfg["output_dir"] = str(output_dir)
    errs = validate(cfg)
    if errs:
        raise ConfigError(errs)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, threads)
    files = {}
    solver_rows = _solve(ctx)

    files["field.csv"] = write_field_csv(ctx.sol.P, out / "field.csv", stride=cfg["output"]["field_stride"])
    rows = []
    root = cfg["monte_carlo"]["root_seed"]
    seeds = {}
    if cfg["experiments"]:
        rows.extend(solver_rows)
        for idx, ex in enumerate(cfg["experiments"]):
            name = ex.get("label") or f"{ex['kind']}_{idx}"
            seed = experiment_seed(root, idx)
            seeds[name] = seed
            rows.extend(RUNNERS[ex["kind"]](ctx, ex.get("params", {}), seed, name))
        files["results.csv"] = out / "results.csv"
        _write_csv(files["results.csv"], RESULT_HEADER, [astuple(r) for r in rows])
        files["diagnostics.csv"] = out / "diagnostics.csv"
        diag = []
        for b, sol in ctx.solutions.items():
            diag.extend((b,) + r for r in sol.diagnostics.rows())
        _write_csv(files["diagnostics.csv"], ["backend", "window", "iteration", "distance", "ratio", "max_norm"], diag)
        for name, rep in ctx.optimality_tables:
            path = out / f"{name}.csv"
            _write_csv(path, ["label", "mean", "std_error", "running", "terminal", "energy", "gap", "gap_std_error",
                              "dominated", "strictly_cheaper"], rep.rows())
            files[path.name] = path
        files["plot_results.py"] = out / "plot_results.py"
        files["plot_results.py"].write_text(_plot_script([n for n, _ in ctx.optimality_tables]))
    n_sample = cfg["output"]["sample_paths"]
    if n_sample:
        files["paths.csv"] = _write_paths(ctx, out / "paths.csv", n_sample, experiment_seed(root, 10 ** 6))

    manifest = {
        "config": cfg,
        "seeds": {"root_seed": root, "experiments": seeds},
        "versions": _versions(),
        "files": {name: _sha256(path) for name, path in sorted(files.items())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    files["manifest.json"] = out / "manifest.json"
    ok = all(r.passed for r in rows)
    return RunResult(0 if ok else 1, rows, files, out)


def _write_paths(ctx, path: Path, n_sample: int, seed: int) -> Path:
    ctrl = FeedbackControl(ctx.sol, ctx.coeffs)
    n, k = ctx.coeffs.n, ctx.coeffs.k
    rows = []
    for p in range(n_sample):
        sp = simulate_state(ctx.coeffs, ctx.law, ctrl, ctx.t0, ctx.x, ctx.dt_sim, experiment_seed(seed, p),
                            ctx.grid.horizon)
        for node in range(sp.times.size):
            u = sp.control[node] if node < sp.control.shape[0] else np.full(k, np.nan)
            rows.append((p, node, sp.times[node], sp.elapsed[node], ctx.law.marks[sp.marks[node]],
                         *map(float, sp.state[node]), *map(float, u)))
    header = ["path", "node", "t", "e", "mark"] + [f"x_{a + 1}" for a in range(n)] + [f"u_{a + 1}" for a in range(k)]
    _write_csv(path, header, rows)
    return path


def _plot_script(optimality_files) -> str:
    return f'''"""Render the run's CSV outputs. Requires matplotlib; run from this directory."""

import csv
from collections import defaultdict

import matplotlib.pyplot as plt


def read(name):
    with open(name, newline="") as fh:
        return list(csv.DictReader(fh))


def field_heatmaps():
    rows = read("field.csv")
    by_mark = defaultdict(list)
    for r in rows:
        by_mark[r["mark"]].append(r)
    fig, axes = plt.subplots(1, len(by_mark), figsize=(5 * len(by_mark), 4), squeeze=False)
    for ax, (mark, rs) in zip(axes[0], sorted(by_mark.items())):
        ts = sorted({{float(r["t"]) for r in rs}})
        es = sorted({{float(r["e"]) for r in rs}})
        grid = [[float("nan")] * len(ts) for _ in es]
        ti = {{t: k for k, t in enumerate(ts)}}
        ei = {{e: m for m, e in enumerate(es)}}
        for r in rs:
            grid[ei[float(r["e"])]][ti[float(r["t"])]] = float(r["p_11"])
        im = ax.imshow(grid, origin="lower", aspect="auto", extent=[ts[0], ts[-1], es[0], es[-1]])
        ax.set_title(f"p_11, mark {{mark}}")
        ax.set_xlabel("t")
        ax.set_ylabel("elapsed")
        fig.colorbar(im, ax=ax)
    fig.savefig("field.png", dpi=120, bbox_inches="tight")


def cost_bars(name):
    rows = read(name + ".csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [r["label"] for r in rows]
    means = [float(r["mean"]) for r in rows]
    errs = [3 * float(r["std_error"]) for r in rows]
    ax.bar(labels, means, yerr=errs, capsize=4)
    ax.set_ylabel("cost")
    ax.set_title(name)
    fig.savefig(name + ".png", dpi=120, bbox_inches="tight")


if __name__ == "__main__":
    field_heatmaps()
    for name in {list(optimality_files)!r}:
        cost_bars(name)
'''
