"""Minimization of the discretized Tikhonov functional.

    min ||F_m(a) - y_delta||^2 + alpha * R(a)   subject to  a >= c_lower

over piecewise-constant ``a`` on ``n`` cells. The penalty is smoothed and
the smoothing is driven to the last level of a decreasing schedule;
each level is solved by projected gradient descent with a Barzilai-Borwein
trial step and Armijo backtracking along the projection arc.
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, SolverError
from .forward_groundwater import (DataMisfit, FemSolution, GroundwaterModel, ObservedData,
                                  load_vector, mass_matrix, cross_load, l2_inner)
from .mesh_fields import ParallelepipedMesh, PiecewiseConstantField
from .regularizers import RegularizerSpec, evaluate, gradient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TikhonovConfig:
    alpha: float
    reg: RegularizerSpec
    smoothing_schedule: tuple = (1e-2, 1e-3, 1e-4)
    max_iters: int = 4000
    grad_tol: float = 1e-9
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    restarts: int = 1
    seed: int = 0
    initial: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")
        if not self.grad_tol > 0:
            raise DomainError("grad_tol must be positive")
        sched = tuple(float(e) for e in self.smoothing_schedule)
        if not sched or any(e <= 0 for e in sched) or any(b >= a for a, b in zip(sched, sched[1:])):
            raise DomainError("smoothing schedule must be positive and strictly decreasing")
        object.__setattr__(self, "smoothing_schedule", sched)
        if self.restarts < 1:
            raise DomainError("restarts must be >= 1")
        if not 0 < self.shrink < 1 or not 0 < self.sufficient_decrease < 1:
            raise DomainError("line-search parameters must lie in (0, 1)")


@dataclass
class RegularizedSolution:
    field: PiecewiseConstantField
    objective: float
    residual: float
    reg_value: float
    iterations: int
    converged: bool
    alpha: float = float("nan")
    grid_slack: float = 0.0
    trace: list = field(default_factory=list, repr=False)

    @property
    def exact_objective(self) -> float:
        """``residual^2 + alpha * R(field)`` with the unsmoothed penalty."""
        return self.residual**2 + self.alpha * self.reg_value


def _data_of(y) -> FemSolution:
    return y.y_delta if isinstance(y, ObservedData) else y


def _projected_gradient_norm(a, g, c):
    return float(np.linalg.norm(a - np.maximum(a - g, c)))


def _stage(misfit: DataMisfit, mesh, reg: RegularizerSpec, alpha, a0, config: TikhonovConfig,
           c_lower, trace, stage_index):
    """Projected gradient on one smoothing level; returns (a, objective, iters, converged)."""

    def phi(a):
        f = PiecewiseConstantField(mesh, a)
        j, gj = misfit.value_and_gradient(a)
        r = evaluate(reg, f)
        val = j + alpha * r
        if not np.isfinite(val):
            raise SolverError("non-finite objective", iterate=a.copy())
        return val, gj + alpha * gradient(reg, f), j, r

    a = np.maximum(a0, c_lower)
    val, g, j, r = phi(a)
    step = 1.0 / max(np.linalg.norm(g), 1e-12)
    a_prev = g_prev = None
    it = 0
    converged = False
    for it in range(1, config.max_iters + 1):
        pg = _projected_gradient_norm(a, g, c_lower)
        if pg <= config.grad_tol:
            converged = True
            it -= 1
            break
        if a_prev is not None:
            s, yv = a - a_prev, g - g_prev
            sy = float(s @ yv)
            step = float(s @ s) / sy if sy > 0 else step * 2.0
            step = min(max(step, 1e-12), 1e12)
        t = step
        while True:
            trial = np.maximum(a - t * g, c_lower)
            d = trial - a
            tval, tg, tj, tr = phi(trial)
            if tval <= val + config.sufficient_decrease * float(g @ d):
                break
            t *= config.shrink
            if t < 1e-18:
                break
        if tval > val:
            # no descent possible at machine precision
            converged = pg <= 10 * config.grad_tol
            break
        a_prev, g_prev = a, g
        a, val, g, j, r = trial, tval, tg, tj, tr
        step = t
        if trace is not None:
            trace.append({"stage": stage_index, "iteration": it, "objective": val,
                          "residual": float(np.sqrt(j)), "reg_value": r, "step": t})
    return a, val, it, converged


def minimize_tikhonov(model: GroundwaterModel, y_delta, config: TikhonovConfig, n: int,
                      trace: bool = False, initial: Optional[np.ndarray] = None) -> RegularizedSolution:
    """Approximate minimizer ``u_{m,n}^{alpha,delta}`` on ``n`` parameter cells."""
    if n < 1:
        raise DomainError("n must be >= 1")
    mesh = ParallelepipedMesh(1, n)
    c_lower = model.problem.c_lower
    misfit = model.misfit(_data_of(y_delta))
    rng = np.random.default_rng(config.seed)
    start = np.full(n, max(c_lower, config.initial)) if initial is None else np.asarray(initial, float)
    best = None
    for restart in range(config.restarts):
        a = start.copy()
        if restart > 0:
            a = a * np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=n))
        steps = [] if trace else None
        total = 0
        converged = False
        for k, eps in enumerate(config.smoothing_schedule):
            a, val, iters, converged = _stage(misfit, mesh, config.reg.with_eps(eps), config.alpha,
                                              a, config, c_lower, steps, k)
            total += iters
        f = PiecewiseConstantField(mesh, a)
        j = misfit.value(a)
        sol = RegularizedSolution(
            field=f,
            objective=j + config.alpha * evaluate(config.reg.with_eps(config.smoothing_schedule[-1]), f),
            residual=float(np.sqrt(j)),
            reg_value=evaluate(config.reg.with_eps(0.0), f),
            iterations=total,
            converged=converged,
            alpha=config.alpha,
            trace=steps or [],
        )
        if best is None or sol.exact_objective < best.exact_objective:
            best = sol
    if not best.converged:
        log.debug("solver stopped at max_iters (n=%d, alpha=%g)", n, config.alpha)
    return best


def write_trace_csv(solution: RegularizedSolution, path) -> None:
    cols = ["stage", "iteration", "objective", "residual", "reg_value", "step"]
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        if fh.tell() == 0:
            writer.writeheader()
        for row in solution.trace:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# parameter choice


def alpha_for_convergence(delta: float, rho_m: float, approx_residual_n: float,
                          c0: float = 1.0, theta: float = 1.0) -> float:
    """``alpha = c0 * max(delta, rho_m, approx_residual_n)**theta``."""
    vals = (delta, rho_m, approx_residual_n)
    if any(v < 0 for v in vals):
        raise DomainError("inputs must be nonnegative")
    top = max(vals)
    if top == 0:
        raise DomainError("alpha is undefined when all inputs vanish")
    if not 0 < theta < 2:
        raise DomainError("theta must lie in (0, 2)")
    return c0 * top**theta


def alpha_for_rates(delta: float, lambda_n: float, gamma_n: float, c1: float = 1.0) -> float:
    """``alpha = c1 * max(delta, lambda_n, gamma_n)``."""
    vals = (delta, lambda_n, gamma_n)
    if any(v < 0 for v in vals):
        raise DomainError("inputs must be nonnegative")
    top = max(vals)
    if top == 0:
        raise DomainError("alpha is undefined when all inputs vanish")
    return c1 * top


# ---------------------------------------------------------------------------
# brute-force oracle


def _batched_forward(A: np.ndarray, n: int, m: int, load: np.ndarray) -> np.ndarray:
    """Galerkin solutions for a batch of coefficient rows, by a vectorized Thomas sweep.

    Independent of the kernels used by :func:`minimize_tikhonov`: the element
    means are formed from an explicit overlap matrix.
    """
    cuts = np.union1d(np.arange(n + 1) / n, np.arange(m + 1) / m)
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    lengths = np.diff(cuts)
    T = np.zeros((m, n))
    np.add.at(T, (np.minimum((mids * m).astype(int), m - 1), np.minimum((mids * n).astype(int), n - 1)),
              lengths * m)
    abar = A @ T.T                                       # (B, m)
    diag = m * (abar[:, :-1] + abar[:, 1:])              # (B, m-1)
    off = -m * abar[:, 1:-1]                             # (B, m-2)
    k = m - 1
    c = np.zeros_like(diag)
    d = np.zeros_like(diag)
    c[:, 0] = off[:, 0] / diag[:, 0] if k > 1 else 0.0
    d[:, 0] = load[0] / diag[:, 0]
    for i in range(1, k):
        denom = diag[:, i] - off[:, i - 1] * c[:, i - 1]
        if i < k - 1:
            c[:, i] = off[:, i] / denom
        d[:, i] = (load[i] - off[:, i - 1] * d[:, i - 1]) / denom
    x = np.empty_like(d)
    x[:, -1] = d[:, -1]
    for i in range(k - 2, -1, -1):
        x[:, i] = d[:, i] - c[:, i] * x[:, i + 1]
    return x


def brute_force_minimize(model: GroundwaterModel, y_delta, alpha: float, reg: RegularizerSpec,
                         n: int, bounds=None, grid_points: int = 101, batch: int = 20000):
    """Exhaustive grid search of the exact objective for ``n <= 3`` cells.

    ``grid_slack`` of the result is the largest objective change to an axis
    neighbour of the grid argmin, the grid-resolution tolerance for
    comparing against a continuous minimizer.
    """
    if n > 3:
        raise DomainError("brute force is limited to n <= 3 cells")
    if n < 1:
        raise DomainError("n must be >= 1")
    if alpha < 0:
        raise DomainError("alpha must be nonnegative")
    lo, hi = bounds if bounds is not None else (model.problem.c_lower, 3.0)
    axis = np.linspace(lo, hi, grid_points)
    y = _data_of(y_delta)
    m = model.m
    M = mass_matrix(m)
    g = cross_load(y, m)
    yy = l2_inner(y, y)
    load = np.asarray(load_vector(model.problem, m))
    mesh = ParallelepipedMesh(1, n)
    reg0 = reg.with_eps(0.0)

    grid = np.array(list(itertools.product(range(grid_points), repeat=n)))
    values = np.empty(len(grid))
    for s in range(0, len(grid), batch):
        A = axis[grid[s:s + batch]]
        U = _batched_forward(A, n, m, load)
        J = np.einsum("bi,bi->b", U, (M @ U.T).T) - 2 * U @ g + yy
        R = np.array([evaluate(reg0, PiecewiseConstantField(mesh, a)) for a in A]) if alpha else 0.0
        values[s:s + batch] = np.maximum(J, 0.0) + alpha * R
    best = int(np.argmin(values))
    idx = grid[best]
    shape = (grid_points,) * n
    slack = 0.0
    for k in range(n):
        for step in (-1, 1):
            nb = idx.copy()
            nb[k] += step
            if 0 <= nb[k] < grid_points:
                slack = max(slack, abs(values[np.ravel_multi_index(tuple(nb), shape)] - values[best]))
    a = axis[idx]
    f = PiecewiseConstantField(mesh, a)
    j = model.misfit(y).value(a)
    sol = RegularizedSolution(field=f, objective=float(values[best]), residual=float(np.sqrt(j)),
                              reg_value=evaluate(reg0, f), iterations=len(grid), converged=True,
                              alpha=alpha, grid_slack=float(slack))
    return sol
