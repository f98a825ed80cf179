"""Iteration driver for RRR and related splitting schemes.

The engine sees only a flat state vector and two black-box projections;
all constraint structure and metric weighting lives inside the
projection callables supplied by the trainers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

Proj = Callable[[np.ndarray], np.ndarray]


@dataclass
class SplitProblem:
    """Two-set feasibility problem over a flat vector of `dimension`.

    work_per_iter carries the weight-multiply count |K|*|E| of one
    iteration so logs can report GWMs.
    """

    dimension: int
    proj_A: Proj
    proj_B: Proj
    work_per_iter: float = 0.0


@dataclass
class IterationLog:
    errs: List[float] = field(default_factory=list)
    iter_count: int = 0
    work_per_iter: float = 0.0

    @property
    def gwm_counter(self) -> float:
        return 1e-9 * self.iter_count * self.work_per_iter

    def record(self, err: float) -> None:
        self.errs.append(err)
        self.iter_count += 1


def rrr_step(x, proj_a, proj_b, beta):
    """One update x' = x + beta*(P_B(2 P_A(x) - x) - P_A(x)).

    Exactly one evaluation of each projection.  Returns (x', pa, pb) with
    pa = P_A(x) and pb = P_B(2 pa - x), the pair that defines RRR_err.
    """
    pa = proj_a(x)
    pb = proj_b(2.0 * pa - x)
    return x + beta * (pb - pa), pa, pb


def rrr_step_general(x, proj_a, proj_b, beta, gamma):
    """Generalized update
    x' = x + beta*(P_B((1+gamma) P_A(x) - gamma x) - P_A((1-gamma) P_B(x) + gamma x)).

    gamma = 1 delegates to rrr_step, so the two agree bitwise there; other
    gamma values cost two evaluations of each projection.
    """
    if gamma == 1.0:
        return rrr_step(x, proj_a, proj_b, beta)
    pa = proj_a(x)
    pb = proj_b((1.0 + gamma) * pa - gamma * x)
    pb0 = proj_b(x)
    pa2 = proj_a((1.0 - gamma) * pb0 + gamma * x)
    return x + beta * (pb - pa2), pa, pb


def admm_step(x, y_dual, proj_a, proj_b, alpha):
    """One ADMM cycle: z' = P_A(x - y); y' = y + alpha*(z' - x);
    x' = P_B(z' + y').  Returns (x', y_dual')."""
    z = proj_a(x - y_dual)
    y1 = y_dual + alpha * (z - x)
    return proj_b(z + y1), y1


def run(problem: SplitProblem, hyper, init, tol: Optional[float] = None,
        rrr_iter: Optional[int] = None,
        metric: Optional[Callable[[np.ndarray, np.ndarray], float]] = None):
    """Iterate RRR from `init` until RRR_err < tol or the iteration cap.

    The stopping test runs after each step (step, compute error, test), so
    tol = inf stops after one iteration and rrr_iter = 0 returns the
    initial vector untouched.  `metric` maps the step's (P_A(x),
    P_B(2P_A(x)-x)) pair to the scalar RRR_err; the default is their
    Euclidean distance.  Returns (final vector, IterationLog).
    """
    x = np.asarray(init, dtype=float).copy()
    if x.shape != (problem.dimension,):
        raise ValueError(f"init has shape {x.shape}, expected ({problem.dimension},)")
    tol = hyper.tol if tol is None else tol
    n_iter = hyper.rrr_iter if rrr_iter is None else rrr_iter
    log = IterationLog(work_per_iter=problem.work_per_iter)
    for _ in range(n_iter):
        x, pa, pb = rrr_step_general(x, problem.proj_A, problem.proj_B,
                                     hyper.beta, hyper.gamma)
        err = metric(pa, pb) if metric is not None else float(np.linalg.norm(pb - pa))
        log.record(err)
        if not np.isfinite(err):
            raise FloatingPointError(
                f"RRR_err became non-finite at iteration {log.iter_count}")
        if err < tol:
            break
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(
            f"iterate became non-finite after {log.iter_count} iterations")
    return x, log
