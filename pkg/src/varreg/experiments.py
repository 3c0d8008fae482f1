"""Numerical studies: density, semiconvergence, rates, forward checks, stability.

Every study takes an :class:`ExperimentConfig` and returns a
:class:`StudyReport` whose rows, slope fits and verdicts are written as
``report.csv``, ``slopes.csv`` and ``verdicts.csv``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .errors import ConfigError, DomainError
from .forward_groundwater import (M_REF, DiffusionProblem, FemSolution, GroundwaterModel,
                                  adjoint_apply, assemble_and_solve, frechet_apply, l2_inner,
                                  l2_norm, make_observed_data, mass_matrix, reference_forward)
from .mesh_fields import (ParallelepipedMesh,
                          PiecewiseConstantField, interpolate_nodal, sample_gravity_centers, sample_square_centers)
from .metrics import (StrictMetricSpec, bregman_distance, compute_rate_quantities,
                      estimate_c_nonlin, refine, strict_distance_to_function,
                      strict_metric)
from .regularizers import (Kind, RegularizerSpec, SubgradientElement, evaluate,
                           penalty_operator, subgradient, subgradient_membership_residual)
from .solver import (TikhonovConfig, alpha_for_convergence, alpha_for_rates,
                     minimize_tikhonov)

log = logging.getLogger(__name__)

STUDIES = ("density", "semiconv", "rates", "forward-check", "counterexample", "stability")
SPACES = ("BV_L1", "BV_L2", "BD", "LINF")


# ---------------------------------------------------------------------------
# analytic targets for the density studies


@dataclass(frozen=True)
class Target:
    name: str
    dim: int
    components: int
    f: Callable
    jac: Callable  # (P, dim) -> (P, components, dim)
    sup: Optional[float] = None


def _scalar(name, dim, f, grad, sup=None):
    return Target(name, dim, 1, f, lambda x: grad(x)[:, None, :], sup)


def _bump(x):
    r2 = np.sum((x - 0.5) ** 2, axis=1)
    return np.exp(-10.0 * r2)


TARGETS = {
    "sin2pi_x": _scalar("sin2pi_x", 1, lambda x: np.sin(2 * np.pi * x[:, 0]),
                        lambda x: 2 * np.pi * np.cos(2 * np.pi * x[:, :1]), sup=1.0),
    "bump_1d": _scalar("bump_1d", 1, _bump, lambda x: -20.0 * (x - 0.5) * _bump(x)[:, None], sup=1.0),
    "bump_2d": _scalar("bump_2d", 2, _bump, lambda x: -20.0 * (x - 0.5) * _bump(x)[:, None], sup=1.0),
    "sinx_cosy": _scalar(
        "sinx_cosy", 2,
        lambda x: np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]),
        lambda x: np.pi * np.column_stack([np.cos(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]),
                                           -np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])]),
        sup=1.0),
    "xbump_2d": _scalar(
        "xbump_2d", 2,
        lambda x: np.exp(-10.0 * (x[:, 0] - 0.5) ** 2),
        lambda x: np.column_stack([-20.0 * (x[:, 0] - 0.5) * np.exp(-10.0 * (x[:, 0] - 0.5) ** 2),
                                   np.zeros(len(x))]),
        sup=1.0),
    "ybump_2d": _scalar(
        "ybump_2d", 2,
        lambda x: np.exp(-10.0 * (x[:, 1] - 0.5) ** 2),
        lambda x: np.column_stack([np.zeros(len(x)),
                                   -20.0 * (x[:, 1] - 0.5) * np.exp(-10.0 * (x[:, 1] - 0.5) ** 2)]),
        sup=1.0),
    "affine_x0": Target(
        "affine_x0", 2, 2, lambda x: np.column_stack([x[:, 0], np.zeros(len(x))]),
        lambda x: np.broadcast_to(np.array([[1.0, 0.0], [0.0, 0.0]]), (len(x), 2, 2))),
    "shear_yx": Target(
        "shear_yx", 2, 2, lambda x: np.column_stack([x[:, 1], x[:, 0]]),
        lambda x: np.broadcast_to(np.array([[0.0, 1.0], [1.0, 0.0]]), (len(x), 2, 2))),
    "sinsin_0": Target(
        "sinsin_0", 2, 2,
        lambda x: np.column_stack([np.sin(x[:, 0]) * np.sin(x[:, 1]), np.zeros(len(x))]),
        lambda x: np.stack([np.column_stack([np.cos(x[:, 0]) * np.sin(x[:, 1]),
                                             np.sin(x[:, 0]) * np.cos(x[:, 1])]),
                            np.zeros((len(x), 2))], axis=1)),
    "swirl": Target(
        "swirl", 2, 2,
        lambda x: np.column_stack([np.sin(np.pi * x[:, 1]) * x[:, 0], np.cos(np.pi * x[:, 0]) * 0.5]),
        lambda x: np.stack([np.column_stack([np.sin(np.pi * x[:, 1]), np.pi * np.cos(np.pi * x[:, 1]) * x[:, 0]]),
                            np.column_stack([-0.5 * np.pi * np.sin(np.pi * x[:, 0]), np.zeros(len(x))])], axis=1)),
}

SPACE_REG = {"BV_L1": Kind.TV_L1, "BV_L2": Kind.TV_L2, "BD": Kind.BD, "LINF": Kind.SUP_NORM}


def target_penalty(target: Target, space: str, n_ref: int = 256) -> float:
    """``R(target)`` by composite Gauss quadrature of the analytic derivative."""
    if space == "LINF":
        if target.sup is not None:
            return target.sup
        x = ParallelepipedMesh(target.dim, n_ref).quadrature()[0]
        return float(np.max(np.abs(target.f(x))))
    x, w = ParallelepipedMesh(target.dim, n_ref).quadrature()
    J = target.jac(x)
    if space == "BV_L1":
        return float(np.sum(w * np.abs(J[:, 0, :]).sum(axis=1)))
    if space == "BV_L2":
        return float(np.sum(w * np.linalg.norm(J[:, 0, :], axis=1)))
    if space == "BD":
        E = 0.5 * (J + np.transpose(J, (0, 2, 1)))
        return float(np.sum(w[:, None, None] * np.abs(E)))
    raise ConfigError(f"unknown space {space!r}")


def approximate(target: Target, space: str, n: int):
    """The space's approximation operator applied to the target on grid ``n``."""
    if space in ("BV_L1", "LINF"):
        return sample_gravity_centers(target.f, ParallelepipedMesh(target.dim, n))
    if space == "BV_L2":
        if target.dim != 2:
            raise ConfigError("BV_L2 density runs on 2-D criss-cross triangulations")
        return sample_square_centers(target.f, n)
    if space == "BD":
        return interpolate_nodal(target.f, ParallelepipedMesh(target.dim, n), target.components)
    raise ConfigError(f"unknown space {space!r}")


# ---------------------------------------------------------------------------
# configuration


def _parameter_field(desc, n: Optional[int] = None) -> PiecewiseConstantField:
    """Diffusion coefficient from a JSON descriptor."""
    if isinstance(desc, (int, float)):
        desc = {"type": "constant", "value": desc}
    kind = desc.get("type")
    if kind == "constant":
        cells = n or desc.get("n", 1)
        return PiecewiseConstantField(ParallelepipedMesh(1, cells), np.full(cells, float(desc["value"])))
    if kind == "cells":
        vals = np.asarray(desc["values"], dtype=float)
        field_ = PiecewiseConstantField(ParallelepipedMesh(1, len(vals)), vals)
        return refine(field_, n) if n and n != len(vals) else field_
    if kind == "function":
        cells = n or desc.get("n")
        if cells is None:
            raise ConfigError("function descriptors need n")
        name = desc["name"]
        funcs = {"one_plus_x": lambda x: 1.0 + x[:, 0],
                 "one_plus_half_sin": lambda x: 1.0 + 0.5 * np.sin(2 * np.pi * x[:, 0])}
        if name not in funcs:
            raise ConfigError(f"unknown coefficient function {name!r}")
        return sample_gravity_centers(funcs[name], ParallelepipedMesh(1, cells))
    if kind == "random":
        cells = desc.get("n", n or 8)
        rng = np.random.default_rng(desc.get("seed", 0))
        vals = rng.uniform(desc.get("low", 0.5), desc.get("high", 2.0), size=cells)
        return PiecewiseConstantField(ParallelepipedMesh(1, cells), vals)
    raise ConfigError(f"unknown coefficient descriptor {desc!r}")


@dataclass
class ExperimentConfig:
    study: str
    space: str = "BV_L1"
    target: object = None
    grids: list = field(default_factory=lambda: [4, 8, 16, 32, 64])
    fem: list = field(default_factory=lambda: [64])
    deltas: list = field(default_factory=lambda: [0.0])
    seeds: list = field(default_factory=lambda: [0])
    alpha_rule: dict = field(default_factory=dict)
    problem: dict = field(default_factory=dict)
    reg: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    battery: list = field(default_factory=list)
    perturbations: list = field(default_factory=list)
    c_nonlin: float = 0.0
    omega: object = "engineered"
    metric_p: float = 1.0
    output: Optional[str] = None

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigError(f"study must be one of {STUDIES}, got {self.study!r}")
        if self.space not in SPACES:
            raise ConfigError(f"space must be one of {SPACES}, got {self.space!r}")
        for name in ("grids", "fem", "deltas", "seeds"):
            value = getattr(self, name)
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{name} must be a nonempty list")
        if any(d < 0 for d in self.deltas):
            raise ConfigError("deltas must be nonnegative")
        if any(b > a for a, b in zip(self.deltas, self.deltas[1:])):
            raise ConfigError("deltas must be decreasing")
        if any(int(n) != n or n < 1 for n in self.grids + self.fem):
            raise ConfigError("grids and fem entries must be positive integers")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "study" not in data:
            raise ConfigError("config needs a 'study'")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k != "output"}
        blob = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    # helpers --------------------------------------------------------------

    def diffusion_problem(self) -> DiffusionProblem:
        p = self.problem
        try:
            return DiffusionProblem(f=p.get("f", 1.0), c_lower=p.get("c_lower", 0.5))
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def m_ref(self) -> int:
        return int(self.problem.get("m_ref", M_REF))

    def regularizer(self) -> RegularizerSpec:
        kind = self.reg.get("kind", SPACE_REG[self.space].value)
        try:
            return RegularizerSpec(kind, self.reg.get("p"))
        except (DomainError, ValueError) as exc:
            raise ConfigError(f"bad regularizer: {exc}") from exc

    def tikhonov(self, alpha: float, seed: int = 0) -> TikhonovConfig:
        s = self.solver
        return TikhonovConfig(
            alpha=alpha, reg=self.regularizer(),
            smoothing_schedule=tuple(s.get("smoothing_schedule", (1e-2, 1e-3, 1e-4))),
            max_iters=int(s.get("max_iters", 4000)), grad_tol=float(s.get("grad_tol", 1e-9)),
            restarts=int(s.get("restarts", 1)), seed=int(s.get("seed", seed)))

    def threshold(self, name, default):
        return self.thresholds.get(name, default)

    def targets(self) -> list:
        names = self.target if isinstance(self.target, list) else [self.target]
        out = []
        for name in names:
            if name not in TARGETS:
                raise ConfigError(f"unknown target {name!r}; known: {sorted(TARGETS)}")
            out.append(TARGETS[name])
        return out


# ---------------------------------------------------------------------------
# reports


def fit_loglog(x, y) -> dict:
    """Least-squares line through ``(log x, log y)``: slope, intercept and R^2."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return {"slope": math.nan, "intercept": math.nan, "r2": math.nan, "points": int(ok.sum())}
    res = stats.linregress(np.log(x[ok]), np.log(y[ok]))
    return {"slope": float(res.slope), "intercept": float(res.intercept),
            "r2": float(res.rvalue**2), "points": int(ok.sum())}


def trend_decreasing(values, max_inversions: int = 1, atol: float = 0.0) -> bool:
    """Decreasing in trend: at most ``max_inversions`` increases larger than ``atol``.

    The last value must also not exceed the first by more than ``atol``.
    """
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return True
    inversions = int(np.sum(np.diff(v) > atol))
    return bool(inversions <= max_inversions and v[-1] <= v[0] + atol)


@dataclass
class StudyReport:
    study: str
    config_hash: str
    rows: list = field(default_factory=list)
    fitted_slopes: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    caveats: list = field(default_factory=list)

    def add_verdict(self, name, passed, value, threshold, claim):
        self.verdicts.append({"name": name, "passed": bool(passed), "value": value,
                              "threshold": threshold, "claim": claim})

    def add_slope(self, name, fit):
        row = {"name": name}
        row.update(fit)
        self.fitted_slopes.append(row)

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.verdicts)

    def sorted_rows(self):
        def key(r):
            return (-(r.get("delta") or 0.0), r.get("n") or 0, r.get("m") or 0, r.get("seed") or 0,
                    str(r.get("target", "")), str(r.get("field", "")), r.get("index") or 0)
        return sorted(self.rows, key=key)

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, "report.csv"), self.sorted_rows())
        _write_csv(os.path.join(out_dir, "slopes.csv"), self.fitted_slopes,
                   ["name", "slope", "intercept", "r2", "points"])
        _write_csv(os.path.join(out_dir, "verdicts.csv"), self.verdicts,
                   ["name", "passed", "value", "threshold", "claim"])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def _write_csv(path, rows, columns=None):
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r.get(c)) for c in columns])


def _map(fn, tasks, jobs):
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


# ---------------------------------------------------------------------------
# density


def _density_row(task):
    space, name, n, p = task
    target = TARGETS[name]
    reg = RegularizerSpec(SPACE_REG[space])
    spec = StrictMetricSpec(reg, p)
    r_target = target_penalty(target, space)
    approx = approximate(target, space, n)
    f = target.f if target.components > 1 else (lambda x: target.f(x).reshape(-1))
    d = strict_distance_to_function(spec, approx, f, r_target)
    r_n = evaluate(reg, approx)
    return {"target": name, "n": n, "d": d, "lp_error": d - abs(r_n - r_target),
            "reg_n": r_n, "reg_target": r_target, "reg_gap": abs(r_n - r_target)}


def run_density(config: ExperimentConfig, jobs: int = 1) -> StudyReport:
    report = StudyReport("density", config.config_hash)
    targets = config.targets()
    p = config.metric_p if config.space == "LINF" else 1.0
    for t in targets:
        if config.space == "BD" and t.components != t.dim:
            raise ConfigError(f"target {t.name} is not a vector field for BD")
        if config.space != "BD" and t.components != 1:
            raise ConfigError(f"target {t.name} is not scalar")
    tasks = [(config.space, t.name, n, p) for t in targets for n in config.grids]
    for row in _map(_density_row, tasks, jobs):
        row["config_hash"] = config.config_hash
        row["space"] = config.space
        report.rows.append(row)
    final_max = config.threshold("final_d", 0.05)
    for t in targets:
        rows = sorted((r for r in report.rows if r["target"] == t.name), key=lambda r: r["n"])
        ds = [r["d"] for r in rows]
        report.add_slope(f"d_vs_h[{t.name}]", fit_loglog([1.0 / r["n"] for r in rows], ds))
        floor = config.threshold("roundoff", 1e-12)
        report.add_verdict(f"d_decreasing[{t.name}]", trend_decreasing(ds, atol=floor), ds[-1],
                           f"<=1 inversion beyond {floor:g}", "density of X_n in the strict metric")
        report.add_verdict(f"d_final[{t.name}]", ds[-1] <= final_max, ds[-1], final_max,
                           "density of X_n in the strict metric")
    return report


# ---------------------------------------------------------------------------
# groundwater studies


def _u_bar(config: ExperimentConfig, n=None) -> PiecewiseConstantField:
    desc = config.problem.get("a_true")
    if desc is None:
        raise ConfigError("this study needs problem.a_true (the ground truth)")
    return _parameter_field(desc, n)


def _projection(u_bar: PiecewiseConstantField, n: int) -> Optional[PiecewiseConstantField]:
    """Cell averages of ``u_bar`` on ``n`` cells (exact when the grids nest)."""
    nb = u_bar.mesh.n
    if n % nb == 0:
        return refine(u_bar, n)
    if nb % n == 0:
        return PiecewiseConstantField(ParallelepipedMesh(1, n), u_bar.coeffs.reshape(n, -1).mean(axis=1))
    L = math.lcm(n, nb)
    fine = refine(u_bar, L)
    return PiecewiseConstantField(ParallelepipedMesh(1, n), fine.coeffs.reshape(n, -1).mean(axis=1))


def _resolution(spec: RegularizerSpec, field_, eps: float) -> float:
    """Upper bound of ``|R(u) - R_eps(u)|``: the penalty's resolution at smoothing ``eps``."""
    if spec.kind is Kind.SUP_NORM:
        return eps * (1.0 + math.log(field_.coeffs.size))
    if spec.kind is Kind.SPARSITY and spec.p < 1:
        return field_.coeffs.size * eps**spec.p
    _, w = penalty_operator(spec, field_)
    return float(eps * np.sum(w))


def _semiconv_row(task):
    config_dict, k, seed = task
    config = ExperimentConfig.from_dict(config_dict)
    problem = config.diffusion_problem()
    delta, n, m = config.deltas[k], config.grids[k], config.fem[k]
    u_bar = _u_bar(config)
    y = reference_forward(u_bar, problem, config.m_ref)
    v_n = _projection(u_bar, n)
    approx_res = l2_norm(reference_forward(v_n, problem, config.m_ref) - y)
    rho_m = float(m) ** -2
    rule = config.alpha_rule
    alpha = alpha_for_convergence(delta, rho_m, approx_res, rule.get("c0", 1.0), rule.get("theta", 1.0))
    model = GroundwaterModel(problem, m, config.m_ref)
    data = make_observed_data(u_bar, problem, m, delta, seed, config.m_ref)
    tik = config.tikhonov(alpha, seed)
    sol = minimize_tikhonov(model, data, tik, n, trace=True)
    reg = config.regularizer()
    r_bar = evaluate(reg, u_bar)
    resid = l2_norm(reference_forward(sol.field, problem, config.m_ref) - y)
    d = strict_metric(StrictMetricSpec(reg), sol.field, u_bar)
    return {"delta": delta, "n": n, "m": m, "seed": seed, "alpha": alpha, "rho_m": rho_m,
            "approx_residual_n": approx_res, "residual_to_exact": resid,
            "reg_value": sol.reg_value, "reg_gap": abs(sol.reg_value - r_bar), "strict_d": d,
            "objective": sol.objective, "iterations": sol.iterations, "converged": sol.converged,
            "resolution": _resolution(reg, sol.field, tik.smoothing_schedule[-1]),
            "_trace": sol.trace}


def run_semiconv(config: ExperimentConfig, jobs: int = 1, trace_path=None) -> StudyReport:
    if not (len(config.deltas) == len(config.grids) == len(config.fem)):
        raise ConfigError("semiconv needs deltas, grids and fem of equal length")
    _u_bar(config)
    report = StudyReport("semiconv", config.config_hash)
    report.caveats.append("convergence is subsequential unless the R-minimizing solution is unique")
    tasks = [(config.to_dict() | {"output": None}, k, s)
             for s in config.seeds for k in range(len(config.deltas))]
    rows = _map(_semiconv_row, tasks, jobs)
    for row in rows:
        tr = row.pop("_trace")
        if trace_path:
            _append_trace(trace_path, tr, row)
        row["config_hash"] = config.config_hash
        report.rows.append(row)
    for seed in config.seeds:
        rs = sorted((r for r in report.rows if r["seed"] == seed), key=lambda r: -r["delta"])
        res = [r["residual_to_exact"] for r in rs]
        gaps = [r["reg_gap"] for r in rs]
        atol = max(r["resolution"] for r in rs)
        report.add_verdict(f"residual_to_exact_decreasing[seed={seed}]", trend_decreasing(res),
                           res[-1], "<=1 inversion", "F(u_k) -> y along the parameter rule")
        report.add_verdict(f"reg_gap_decreasing[seed={seed}]", trend_decreasing(gaps, atol=atol),
                           gaps[-1], f"<=1 inversion beyond {atol:.3g}",
                           "R(u_k) -> R(u_bar) along the parameter rule")
        report.add_slope(f"residual_vs_delta[seed={seed}]", fit_loglog([r["delta"] for r in rs], res))
    return report


def _append_trace(path, steps, row):
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    cols = ["delta", "n", "m", "seed", "stage", "iteration", "objective", "residual", "reg_value", "step"]
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not exists:
            writer.writerow(cols)
        for s in steps:
            merged = {**{k: row.get(k) for k in ("delta", "n", "m", "seed")}, **s}
            writer.writerow([_fmt(merged.get(c)) for c in cols])


# -- rates


def engineer_source_element(model: GroundwaterModel, u_bar: PiecewiseConstantField,
                            reg: RegularizerSpec, mode="engineered"):
    """A data-space element ``omega`` with ``F'(u_bar)^* omega`` in ``dR(u_bar)``.

    For jump penalties the dual face variables take ``sign(jump)`` on jumps
    and half of a linear interpolation of those signs elsewhere, so the
    target subgradient lies strictly inside the subdifferential off the
    jump set. ``omega`` is the minimal-L2-norm solution of
    ``F'(u_bar)^* omega = xi``. ``mode="zero"`` gives the degenerate
    ``omega = 0``.
    """
    m = model.m
    if mode == "zero":
        return FemSolution(m, np.zeros(m - 1))
    c = u_bar.coeffs
    if reg.kind in (Kind.TV_L1, Kind.SPARSITY):
        B, w = penalty_operator(reg, u_bar)
        t = B @ c
        jumps = np.flatnonzero(t)
        if jumps.size == 0:
            s = np.zeros_like(t)
        else:
            s = 0.5 * np.interp(np.arange(len(t)), jumps, np.sign(t[jumps]))
            s[jumps] = np.sign(t[jumps])
        xi = B.T @ (w * s)
    elif reg.kind is Kind.SUP_NORM:
        xi = subgradient(reg, u_bar).coeffs
    else:
        raise ConfigError(f"no source element construction for {reg.kind.value}")
    u = model.forward(u_bar)
    A = np.column_stack([adjoint_apply(u_bar, FemSolution(m, e), model.problem, m, u=u)
                         for e in np.eye(m - 1)])
    Mdense = mass_matrix(m).toarray()
    MinvAt = np.linalg.solve(Mdense, A.T)
    lam = np.linalg.lstsq(A @ MinvAt, xi, rcond=None)[0]
    return FemSolution(m, MinvAt @ lam)


def _rates_row(task):
    config_dict, delta, seed, omega_values = task
    config = ExperimentConfig.from_dict(config_dict)
    problem = config.diffusion_problem()
    n, m = config.grids[0], config.fem[0]
    u_bar = _u_bar(config, n)
    model = GroundwaterModel(problem, m, config.m_ref)
    reg = config.regularizer()
    omega = FemSolution(m, omega_values)
    xi = SubgradientElement(model.adjoint(u_bar, omega), u_bar)
    data = make_observed_data(u_bar, problem, m, delta, seed, config.m_ref)
    rho_m = float(m) ** -2
    pre = compute_rate_quantities(model, u_bar, u_bar, omega, reg, xi, delta, rho_m, config.c_nonlin)
    alpha = alpha_for_rates(delta, pre.lambda_n, pre.gamma_n, config.alpha_rule.get("c1", 1.0))
    tik = config.tikhonov(alpha, seed)
    sol = minimize_tikhonov(model, data, tik, n, trace=True)
    q = compute_rate_quantities(model, u_bar, u_bar, omega, reg, xi, delta, rho_m, config.c_nonlin,
                                solution=sol.field, y_exact=data.y_exact)
    breg = bregman_distance(reg, sol.field, u_bar, xi)
    d = strict_metric(StrictMetricSpec(reg), sol.field, u_bar)
    row = q.as_row(n=n, m=m, seed=seed, alpha=alpha, bregman=breg, strict_d=d,
                   residual=sol.residual, converged=sol.converged, iterations=sol.iterations)
    row["_trace"] = sol.trace
    return row


def run_rates(config: ExperimentConfig, jobs: int = 1, trace_path=None) -> StudyReport:
    report = StudyReport("rates", config.config_hash)
    problem = config.diffusion_problem()
    n, m = config.grids[0], config.fem[0]
    u_bar = _u_bar(config, n)
    model = GroundwaterModel(problem, m, config.m_ref)
    reg = config.regularizer()
    if not reg.convex:
        raise ConfigError("rates need a convex penalty")
    omega = engineer_source_element(model, u_bar, reg, config.omega)
    omega_norm = l2_norm(omega)
    # raises PreconditionError when c*||omega|| >= 1
    compute_rate_quantities(model, u_bar, u_bar, omega, reg,
                            SubgradientElement(model.adjoint(u_bar, omega), u_bar),
                            0.0, 0.0, config.c_nonlin)
    xi = model.adjoint(u_bar, omega)
    membership = subgradient_membership_residual(reg, u_bar, xi)
    tol = config.threshold("membership", 1e-6)
    violated = membership > tol
    if omega_norm == 0:
        report.caveats.append("omega = 0: xi = 0 and the rate reduces to the convergence statement")
        log.warning("degenerate source element omega = 0")
    rng = np.random.default_rng(12345)
    samples = [PiecewiseConstantField(u_bar.mesh, np.maximum(u_bar.coeffs * np.exp(0.2 * rng.standard_normal(n)),
                                                             problem.c_lower)) for _ in range(8)]
    c_est = estimate_c_nonlin(model, u_bar, samples, reg, SubgradientElement(xi, u_bar))

    tasks = [(config.to_dict() | {"output": None}, d, s, omega.nodal_values)
             for d in config.deltas for s in config.seeds]
    for row in _map(_rates_row, tasks, jobs):
        tr = row.pop("_trace")
        if trace_path:
            _append_trace(trace_path, tr, row)
        row.update(config_hash=config.config_hash, membership_residual=membership,
                   c_nonlin_estimate=c_est)
        report.rows.append(row)

    deltas = sorted(set(config.deltas), reverse=True)
    mean_breg = [float(np.mean([r["bregman"] for r in report.rows if r["delta"] == d])) for d in deltas]
    fit = fit_loglog(deltas, mean_breg)
    report.add_slope("bregman_vs_delta", fit)
    rho_m = float(m) ** -2
    report.add_verdict("rho_m_coupling", rho_m <= min(d for d in deltas if d > 0), rho_m,
                       "rho_m <= min delta", "rho_m = O(delta + lambda_n + gamma_n)")
    if violated:
        report.caveats.append("source condition violated")
        report.add_verdict("source_condition", True, membership, f"waived (> {tol:g})",
                           "source condition violated; rate criterion waived")
    else:
        report.add_verdict("source_condition", True, membership, f"<= {tol:g}",
                           "xi = F'(u_bar)^* omega lies in dR(u_bar)")
        smin, r2min = config.threshold("slope", 0.8), config.threshold("r2", 0.9)
        floor = config.threshold("bregman_floor", 1e-12)
        if max(abs(b) for b in mean_breg) <= floor:
            # the penalty is affine on the admissible set around u_bar: D_R vanishes
            # identically, the bound holds trivially and no slope is identifiable
            report.caveats.append("Bregman distance vanishes identically; rate slope not identifiable")
            report.add_verdict("bregman_rate_slope", False, fit["slope"],
                               f"D_R <= {floor:g} at every delta: slope not identifiable",
                               "D_R(u, u_bar) = O(delta + lambda_n + gamma_n)")
            report.add_verdict("bregman_trivial_bound", True, max(abs(b) for b in mean_breg),
                               f"<= {floor:g}", "D_R(u, u_bar) = O(delta) holds trivially")
            return report
        report.add_verdict("bregman_rate_slope", fit["slope"] >= smin and fit["r2"] >= r2min,
                           fit["slope"], f">= {smin} with R2 >= {r2min} (R2={fit['r2']:.4f})",
                           "D_R(u, u_bar) = O(delta + lambda_n + gamma_n)")
    return report


# -- forward check


def run_forward_check(config: ExperimentConfig, jobs: int = 1) -> StudyReport:
    report = StudyReport("forward-check", config.config_hash)
    problem = config.diffusion_problem()
    battery = config.battery or [{"type": "constant", "value": 1.0},
                                 {"type": "function", "name": "one_plus_x", "n": 8},
                                 {"type": "random", "n": 8, "low": 0.5, "high": 2.0, "seed": 3}]
    lo, hi = config.threshold("slope_low", 1.8), config.threshold("slope_high", 2.2)
    r2min = config.threshold("r2", 0.95)
    for i, desc in enumerate(battery):
        a = _parameter_field(desc)
        ref = reference_forward(a, problem, config.m_ref)
        errs = []
        for m in config.fem:
            err = l2_norm(assemble_and_solve(a, problem, m) - ref)
            errs.append(err)
            report.rows.append({"field": f"a{i}", "index": i, "m": m, "n": a.mesh.n,
                                "error_l2": err, "config_hash": config.config_hash})
        # decay order: slope of the error against h = 1/m
        fit = fit_loglog([1.0 / m for m in config.fem], errs)
        report.add_slope(f"rho_m[a{i}]", fit)
        report.add_verdict(f"rho_m_slope[a{i}]", lo <= fit["slope"] <= hi and fit["r2"] >= r2min,
                           fit["slope"], f"[{lo}, {hi}] with R2 >= {r2min}", "rho_m = m^-2")

    # adjoint duality and derivative remainder on a seeded random coefficient
    rng = np.random.default_rng(config.seeds[0])
    m = config.fem[len(config.fem) // 2]
    n = 8
    worst = 0.0
    pairs = int(config.threshold("adjoint_pairs", 100))
    for _ in range(pairs):
        a = rng.uniform(0.5, 2.0, n)
        h = rng.standard_normal(n)
        w = FemSolution(m, rng.standard_normal(m - 1))
        lhs = l2_inner(frechet_apply(a, h, problem, m), w)
        rhs = float(h @ adjoint_apply(a, w, problem, m))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    tol = config.threshold("adjoint_rel", 1e-10)
    report.add_verdict("adjoint_duality", worst <= tol, worst, tol, "F'(a)^* is the adjoint of F'(a)")

    a = rng.uniform(0.5, 2.0, n)
    h = rng.standard_normal(n)
    u0 = assemble_and_solve(a, problem, m)
    lin = frechet_apply(a, h, problem, m)
    ts = [1e-2, 1e-3, 1e-4, 1e-5]
    rem = [l2_norm(assemble_and_solve(a + t * h, problem, m) - u0 - lin * t) / t for t in ts]
    for t, r in zip(ts, rem):
        report.rows.append({"field": "fd", "index": 0, "m": m, "n": n, "step": t, "fd_remainder": r,
                            "config_hash": config.config_hash})
    fit = fit_loglog(ts, rem)
    report.add_slope("fd_remainder_vs_t", fit)
    report.add_verdict("fd_remainder_slope", 0.9 <= fit["slope"] <= 1.1, fit["slope"], "[0.9, 1.1]",
                       "F is Frechet differentiable")
    return report


# -- counterexample


_ANTIDERIVATIVES = {
    "1": lambda t: t,
    "t": lambda t: t * t / 2.0,
    "t^2": lambda t: t**3 / 3.0,
    "sin t": lambda t: -np.cos(t),
}


def rademacher_pairing(n: int, antiderivative) -> float:
    """``int_0^1 f_n(t) phi(t) dt`` exactly, ``f_n = (-1)^(i+1)`` on the i-th dyadic interval."""
    k = 2**n
    edges = np.arange(k + 1) / k
    pieces = antiderivative(edges[1:]) - antiderivative(edges[:-1])
    signs = np.where(np.arange(k) % 2 == 0, 1.0, -1.0)
    return float(np.sum(signs * pieces))


def run_counterexample(config: ExperimentConfig, jobs: int = 1) -> StudyReport:
    report = StudyReport("counterexample", config.config_hash)
    n_max = int(config.threshold("n_max", 12))
    tol = config.threshold("pairing", 1e-3)
    for n in range(1, n_max + 1):
        k = 2**n
        values = np.where(np.arange(k) % 2 == 0, 1.0, -1.0)
        g_sup = float(max(np.max(np.abs(values)), 1.0))  # g_n = 1 on [1, 2]
        l1 = float(np.sum(np.abs(values - 0.0)) / k)     # chi = 0 on [0, 1); equal on [1, 2]
        row = {"n": n, "sup_norm": g_sup, "l1_distance": l1, "config_hash": config.config_hash}
        for name, anti in _ANTIDERIVATIVES.items():
            row[f"pairing[{name}]"] = rademacher_pairing(n, anti)
        report.rows.append(row)
    rows = report.rows
    report.add_verdict("sup_norm_constant", all(r["sup_norm"] == 1.0 for r in rows), 1.0, "== 1",
                       "||g_n||_inf = ||chi_[1,2]||_inf = 1")
    report.add_verdict("l1_distance_constant", all(r["l1_distance"] == 1.0 for r in rows), rows[-1]["l1_distance"],
                       "== 1", "no L1 convergence of g_n")
    for name in _ANTIDERIVATIVES:
        vals = [abs(r[f"pairing[{name}]"]) for r in rows]
        report.add_verdict(f"weak_star_pairing[{name}]", vals[-1] < tol, vals[-1], tol,
                           "g_n -> chi_[1,2] weakly star")
    report.add_verdict("strict_metric_not_vanishing", rows[-1]["l1_distance"] + 0.0 >= 1.0,
                       rows[-1]["l1_distance"], ">= 1", "weak-star plus norm convergence is weaker than d")
    return report


# -- stability


def _stability_row(task):
    config_dict, eta, seed = task
    config = ExperimentConfig.from_dict(config_dict)
    problem = config.diffusion_problem()
    n, m = config.grids[0], config.fem[0]
    u_bar = _u_bar(config)
    model = GroundwaterModel(problem, m, config.m_ref)
    delta = config.deltas[0]
    data = make_observed_data(u_bar, problem, m, delta, seed, config.m_ref)
    y = data.y_delta
    if eta > 0:
        rng = np.random.default_rng(10_000 + seed)
        direction = FemSolution(m, rng.standard_normal(m - 1))
        y = y + direction * (eta / l2_norm(direction))
    alpha = float(config.alpha_rule.get("alpha", 1e-3))
    tik = config.tikhonov(alpha, seed)
    sol = minimize_tikhonov(model, y, tik, n, trace=True)
    return {"perturbation": eta, "seed": seed, "n": n, "m": m, "delta": delta, "alpha": alpha,
            "coeffs": sol.field.coeffs.tolist(), "reg_value": sol.reg_value,
            "objective": sol.objective, "converged": sol.converged,
            "resolution": _resolution(config.regularizer(), sol.field, tik.smoothing_schedule[-1]),
            "_trace": sol.trace}


def run_stability(config: ExperimentConfig, jobs: int = 1, trace_path=None) -> StudyReport:
    report = StudyReport("stability", config.config_hash)
    _u_bar(config)
    ladder = [0.0] + sorted((float(p) for p in (config.perturbations or [1e-1, 1e-2, 1e-3]) if p > 0),
                            reverse=True)
    tasks = [(config.to_dict() | {"output": None}, eta, s) for s in config.seeds for eta in ladder]
    raw = _map(_stability_row, tasks, jobs)
    reg = config.regularizer()
    mesh = ParallelepipedMesh(1, config.grids[0])
    for seed in config.seeds:
        rs = [r for r in raw if r["seed"] == seed]
        base = next(r for r in rs if r["perturbation"] == 0.0)
        u0 = PiecewiseConstantField(mesh, base["coeffs"])
        gaps, dists = [], []
        for r in sorted(rs, key=lambda r: -r["perturbation"]):
            tr = r.pop("_trace")
            if trace_path:
                _append_trace(trace_path, tr, r)
            u = PiecewiseConstantField(mesh, r["coeffs"])
            r["reg_gap"] = abs(r["reg_value"] - base["reg_value"])
            r["strict_d"] = strict_metric(StrictMetricSpec(reg), u, u0)
            r["coeffs"] = " ".join(repr(float(c)) for c in r["coeffs"])
            r["config_hash"] = config.config_hash
            report.rows.append(r)
            if r["perturbation"] > 0:
                gaps.append(r["reg_gap"])
                dists.append(r["strict_d"])
        atol = max(r["resolution"] for r in rs)
        report.add_verdict(f"reg_gap_decreasing[seed={seed}]", trend_decreasing(gaps, atol=atol),
                           gaps[-1], f"<=1 inversion beyond {atol:.3g}", "minimizers are stable in R")
        report.add_verdict(f"strict_d_decreasing[seed={seed}]", trend_decreasing(dists, atol=atol),
                           dists[-1], f"<=1 inversion beyond {atol:.3g}", "minimizers are stable in d")
    return report


RUNNERS = {
    "density": run_density,
    "semiconv": run_semiconv,
    "rates": run_rates,
    "forward-check": run_forward_check,
    "counterexample": run_counterexample,
    "stability": run_stability,
}


def run_study(config: ExperimentConfig, jobs: int = 1, trace_path=None) -> StudyReport:
    runner = RUNNERS[config.study]
    if config.study in ("semiconv", "rates", "stability"):
        return runner(config, jobs=jobs, trace_path=trace_path)
    return runner(config, jobs=jobs)
