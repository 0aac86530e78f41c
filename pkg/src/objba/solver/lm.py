"""Levenberg-Marquardt over the block-sparse system."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import factors as F
from ..graph import Problem
from .linear import back_substitute, schur_reduce, solve_dense_spd
from .system import BlockLayout, LinearizationPlan, batch_cost, linearize


class SolveError(RuntimeError):
    pass


@dataclass
class LMConfig:
    max_iters: int = 50
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    lambda_max: float = 1e10
    tol: float = 1e-12
    step_tol: float = 1e-12
    backend: str | None = None

    def __post_init__(self):
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not (self.lambda_init > 0 and self.lambda_up > 1 and 0 < self.lambda_down < 1):
            raise ValueError("need lambda_init > 0, lambda_up > 1 and 0 < lambda_down < 1")
        if self.tol < 0 or self.step_tol < 0:
            raise ValueError("tolerances must be non-negative")


@dataclass
class SolveStats:
    iterations: int = 0
    accepted: int = 0
    rejected: int = 0
    cost_trace: list = field(default_factory=list)
    linear_solve_seconds: list = field(default_factory=list)
    invalid_factors: list = field(default_factory=list)
    n_residuals: int = 0
    n_free_dofs: int = 0
    converged: bool = False
    reason: str = ""

    @property
    def initial_cost(self) -> float:
        return self.cost_trace[0] if self.cost_trace else float("nan")

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1] if self.cost_trace else float("nan")

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        d["initial_cost"], d["final_cost"] = self.initial_cost, self.final_cost
        if not timings:
            d.pop("linear_solve_seconds")
        return d

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=2, sort_keys=True)


def apply_update(p: Problem, layout: BlockLayout, dx: np.ndarray) -> Problem:
    """Retract every free variable by its slice of ``dx``; fixed ones are untouched."""
    out = p.copy()
    for key in layout.keys():
        o = layout.offset(key)
        out.values[key] = F.retract_value(p.values[key], dx[o:o + layout.dim(key)])
    return out


def levenberg_marquardt(p: Problem, config: LMConfig | None = None):
    """Minimize the robust cost of ``p``; returns ``(optimized problem, SolveStats)``.

    Damping is multiplicative on the diagonal. Each candidate step is solved by
    eliminating the point blocks and factoring the reduced system densely.
    """
    cfg = config or LMConfig()
    plan = LinearizationPlan.build(p)
    layout = plan.layout
    stats = SolveStats(n_free_dofs=layout.size)
    lam = cfg.lambda_init
    cur = p
    sys = linearize(cur, plan, backend=cfg.backend)
    if not np.isfinite(sys.cost):
        raise SolveError(f"initial cost is not finite ({sys.cost}); {sys.n_invalid} invalid factors")
    stats.cost_trace.append(sys.cost)
    stats.invalid_factors.append(sys.n_invalid)
    stats.n_residuals = sys.n_residuals
    if layout.size == 0:
        stats.converged, stats.reason = True, "no free variables"
        return cur, stats
    if sys.cost == 0.0:
        stats.converged, stats.reason = True, "zero cost"
        return cur, stats

    while stats.iterations < cfg.max_iters:
        stats.iterations += 1
        t0 = time.perf_counter()
        damped = sys.damped(lam)
        H_red, b_red, Vinv = schur_reduce(damped, cfg.backend)
        x_co = solve_dense_spd(H_red, -b_red)
        x_p = back_substitute(damped, Vinv, x_co, b_p=-damped.b_p, backend=cfg.backend)
        dx = np.concatenate([x_co, x_p.reshape(-1)])
        stats.linear_solve_seconds.append(time.perf_counter() - t0)
        if not np.all(np.isfinite(dx)):
            raise SolveError(f"non-finite step at iteration {stats.iterations} (lambda={lam:g})")

        cand = apply_update(cur, layout, dx)
        new_cost, _ = batch_cost(cand, plan)
        if not np.isfinite(new_cost):
            new_cost = np.inf
        if new_cost < sys.cost:
            rel = (sys.cost - new_cost) / max(sys.cost, 1e-300)
            cur = cand
            stats.accepted += 1
            lam = max(lam * cfg.lambda_down, 1e-15)
            sys = linearize(cur, plan, backend=cfg.backend)
            stats.cost_trace.append(sys.cost)
            stats.invalid_factors.append(sys.n_invalid)
            stats.n_residuals = sys.n_residuals
            if rel < cfg.tol or sys.cost == 0.0:
                stats.converged, stats.reason = True, "relative cost change below tol"
                break
            if np.max(np.abs(dx)) < cfg.step_tol:
                stats.converged, stats.reason = True, "step below step_tol"
                break
        else:
            stats.rejected += 1
            if np.max(np.abs(dx)) < cfg.step_tol:
                stats.converged, stats.reason = True, "step below step_tol"
                break
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                stats.converged, stats.reason = True, "damping reached lambda_max"
                break
    else:
        stats.reason = "max_iters reached"
    return cur, stats


def reduced_covariance(p: Problem, backend=None):
    """Gauss-Newton covariance of all free camera/object variables.

    Inverting the reduced (points eliminated) matrix gives exactly the CO
    block of the full inverse. Returns ``(layout, covariance)``.
    """
    sys = linearize(p, backend=backend)
    H_red, _, _ = schur_reduce(sys, backend)
    return sys.layout, np.linalg.inv(H_red)


def marginal_covariance(p: Problem, keys=None, backend=None) -> dict:
    """6x6 marginal covariance per camera/object variable."""
    L, cov = reduced_covariance(p, backend)
    keys = L.co_keys if keys is None else keys
    out = {}
    for k in keys:
        o = L.offset(k)
        out[k] = cov[o:o + 6, o:o + 6]
    return out
