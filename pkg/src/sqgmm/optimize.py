"""Numerical engines: damped Newton root finding and simulated annealing.

Both solvers respect per-coordinate box constraints.  The annealer is fully
deterministic given its seed: proposals, acceptance draws, and the automatic
initial temperature all come from one counter-based generator stream, and
every comparison is scale free so rescaling the objective by a positive
constant leaves the visited path unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "SolverReport",
    "newton_root",
    "AnnealingSchedule",
    "simulated_annealing",
]


@dataclass
class SolverReport:
    """Outcome of one solver invocation."""

    converged: bool
    iterations: int
    final_norm: float
    tol: float = np.nan
    message: str = ""
    path: list | None = None

    def __post_init__(self):
        if self.converged and np.isfinite(self.tol):
            assert self.final_norm <= self.tol


def _project(x: np.ndarray, box: np.ndarray | None) -> np.ndarray:
    if box is None:
        return x
    return np.clip(x, box[:, 0], box[:, 1])


def newton_root(
    residual_fn: Callable[[np.ndarray], np.ndarray],
    jacobian_fn: Callable[[np.ndarray], np.ndarray],
    x0,
    box: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 60,
    keep_path: bool = False,
) -> tuple[np.ndarray, SolverReport]:
    """Solve residual_fn(x) = 0 by damped Newton steps.

    The full step is tried first, then halved until the residual norm
    decreases; iterates are projected into the box.  A singular Jacobian or
    a stalled line search ends the iteration with ``converged=False`` so the
    caller can fall back (for the moment solvers: restart at a larger
    bandwidth).
    """
    x = _project(np.asarray(x0, dtype=float).copy(), box)
    path = [] if keep_path else None
    r = np.atleast_1d(np.asarray(residual_fn(x), dtype=float))
    norm = float(np.linalg.norm(r))
    message = "max iterations reached"
    iterations = 0
    for iterations in range(1, max_iter + 1):
        if keep_path:
            path.append((x.copy(), norm))
        if norm <= tol:
            return x, SolverReport(True, iterations - 1, norm, tol, "converged", path)
        jac = np.atleast_2d(np.asarray(jacobian_fn(x), dtype=float))
        try:
            step = np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.all(np.isfinite(step)):
            # Rank-deficient Jacobian: move along the informative directions
            # only; if nothing is informative the step is zero and the line
            # search below ends the iteration.
            step, *_ = np.linalg.lstsq(jac, r, rcond=None)
            if not np.all(np.isfinite(step)) or not np.any(step):
                return x, SolverReport(
                    False, iterations - 1, norm, tol, "singular jacobian", path
                )
        improved = False
        # Try the Newton direction first; if no damping of it helps, fall
        # back to the steepest-descent direction of the squared norm, which
        # rescues the iteration in curved valleys where the Newton direction
        # points uphill.
        grad_dir = jac.T @ r
        grad_scale = float(np.linalg.norm(grad_dir))
        directions = [(step, 2.0**-24)]
        if grad_scale > 0:
            directions.append(
                (grad_dir * (float(np.linalg.norm(step)) or 1.0) / grad_scale, 2.0**-10)
            )
        for direction, lam_min in directions:
            lam = 1.0
            while lam >= lam_min:
                candidate = _project(x - lam * direction, box)
                r_new = np.atleast_1d(np.asarray(residual_fn(candidate), dtype=float))
                norm_new = float(np.linalg.norm(r_new))
                if np.isfinite(norm_new) and norm_new < norm:
                    x, r, norm = candidate, r_new, norm_new
                    improved = True
                    break
                lam *= 0.5
            if improved:
                break
        if not improved:
            message = "line search stalled"
            break
    converged = norm <= tol
    if converged:
        message = "converged"
    return x, SolverReport(converged, iterations, norm, tol, message, path)


@dataclass(frozen=True)
class AnnealingSchedule:
    """Cooling schedule for :func:`simulated_annealing`.

    ``proposals_per_temp`` defaults to 200 per parameter dimension and
    ``n_temps`` to 50, giving the default evaluation budget of 1e4 per
    dimension.  ``initial_temp=None`` sets the starting temperature from the
    objective's spread over ``spread_samples`` random box points, which keeps
    the whole chain invariant to positive rescaling of the objective.

    After the cooling blocks a zero-temperature phase spends
    ``freeze_fraction`` of the same budget on pure downhill proposals with a
    step size that halves whenever a block brings no improvement; this is
    what lets the annealer refine a smooth minimum to high accuracy instead
    of stalling at the last temperature's noise level.
    """

    cooling: float = 0.95
    proposals_per_temp: int | None = None
    n_temps: int = 50
    initial_temp: float | None = None
    spread_samples: int = 50
    step_fraction: float = 0.5
    freeze_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.cooling < 1.0:
            raise ValueError("cooling factor must be in (0, 1)")
        if self.n_temps < 0:
            raise ValueError("n_temps must be nonnegative")
        if not 0.0 <= self.freeze_fraction <= 1.0:
            raise ValueError("freeze_fraction must be in [0, 1]")


def simulated_annealing(
    objective_fn: Callable[[np.ndarray], float],
    box: np.ndarray,
    x0,
    schedule: AnnealingSchedule = AnnealingSchedule(),
    rng_seed: int = 0,
) -> tuple[np.ndarray, SolverReport]:
    """Minimize a black-box objective over a box by simulated annealing.

    Returns the best point visited, which is never worse than the starting
    point.  Non-finite objective values at proposals count as rejections.
    Ties between equal best values keep the earliest visit.
    """
    box = np.asarray(box, dtype=float)
    x0 = _project(np.asarray(x0, dtype=float).copy(), box)
    d = x0.size
    f0 = float(objective_fn(x0))
    if not np.isfinite(f0):
        raise ValueError("objective must be finite at the starting point")
    rng = np.random.Generator(np.random.Philox(key=[int(rng_seed) & (2**64 - 1), 0]))

    proposals = (
        schedule.proposals_per_temp
        if schedule.proposals_per_temp is not None
        else 200 * d
    )
    widths = box[:, 1] - box[:, 0]
    finite_w = np.where(np.isfinite(widths), widths, 10.0 * np.maximum(1.0, np.abs(x0)))

    best_x, best_f = x0.copy(), f0
    path = [best_f]
    evals = 0
    if schedule.n_temps == 0 or proposals == 0:
        return best_x, SolverReport(True, 0, best_f, np.inf, "empty schedule", path)

    if schedule.initial_temp is None:
        probe = rng.random((schedule.spread_samples, d))
        lo = np.where(np.isfinite(box[:, 0]), box[:, 0], x0 - finite_w)
        probe_vals = []
        for row in probe:
            val = objective_fn(_project(lo + row * finite_w, box))
            evals += 1
            if np.isfinite(val):
                probe_vals.append(float(val))
        spread = (max(probe_vals) - min(probe_vals)) if len(probe_vals) >= 2 else 0.0
        t0 = spread if spread > 0 else abs(f0) if f0 != 0 else 1.0
    else:
        t0 = float(schedule.initial_temp)

    # The cooling ratio is tracked separately from the temperature so that
    # proposal geometry never depends on the objective's scale.
    x, f = x0.copy(), f0
    ratio = 1.0
    for _ in range(schedule.n_temps):
        scale = max(schedule.step_fraction * ratio, 1e-6)
        temp = t0 * ratio
        for _ in range(proposals):
            candidate = _project(
                x + finite_w * scale * rng.uniform(-1.0, 1.0, size=d), box
            )
            f_cand = float(objective_fn(candidate))
            evals += 1
            if not np.isfinite(f_cand):
                continue
            delta = f_cand - f
            if delta <= 0.0 or rng.random() < np.exp(-delta / max(temp, 1e-300)):
                x, f = candidate, f_cand
                if f < best_f:
                    best_x, best_f = x.copy(), f
        path.append(best_f)
        ratio *= schedule.cooling

    # Zero-temperature refinement: greedy proposals around the incumbent with
    # a step size that halves after any block without improvement.
    freeze_budget = int(schedule.freeze_fraction * schedule.n_temps * proposals)
    block = max(4, 10 * d)
    scale = max(schedule.step_fraction * ratio, 1e-6)
    x, f = best_x.copy(), best_f
    spent = 0
    while spent < freeze_budget and scale > 1e-14:
        improved = False
        for _ in range(min(block, freeze_budget - spent)):
            candidate = _project(
                x + finite_w * scale * rng.uniform(-1.0, 1.0, size=d), box
            )
            f_cand = float(objective_fn(candidate))
            spent += 1
            evals += 1
            if np.isfinite(f_cand) and f_cand < f:
                x, f = candidate, f_cand
                improved = True
        if f < best_f:
            best_x, best_f = x.copy(), f
            path.append(best_f)
        if not improved:
            scale *= 0.5
    return best_x, SolverReport(True, evals, best_f, np.inf, "completed", path)
