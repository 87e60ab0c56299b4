"""Point estimators for quantile moment conditions.

Exactly identified models are solved by driving the smoothed moment vector
to zero with damped Newton steps, restarting from larger bandwidths when the
target bandwidth leaves the Jacobian degenerate.  Over-identified models
minimize the weighted quadratic moment criterion by simulated annealing from
a cheap consistent start, followed by a Gauss-Newton polish.  Classical
two-stage least squares and plain quantile regression are provided as
comparison baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize as scipy_minimize

from sqgmm.covariance import (
    CovarianceSpec,
    IdentificationError,
    asym_cov_gmm,
    asym_cov_mm,
    long_run_variance,
    andrews_bandwidth,
    omega_hac,
    omega_iid,
    robust_inv,
    sigma_iid_quantile,
)
from sqgmm.model import Dataset, ResidualModel
from sqgmm.moments import (
    MomentContext,
    smoothed_moments,
    smoothed_moments_and_jacobian,
    moment_jacobian,
    unsmoothed_moments,
)
from sqgmm.optimize import AnnealingSchedule, SolverReport, newton_root, simulated_annealing

__all__ = [
    "EstimateResult",
    "estimate_mm",
    "estimate_one_step",
    "estimate_gmm",
    "projection_instruments",
    "estimate_2sls",
    "estimate_qr",
]


@dataclass
class EstimateResult:
    """Parameter estimate with covariance and solver diagnostics."""

    beta: np.ndarray
    cov: np.ndarray
    std_errors: np.ndarray
    tau: float | None
    bandwidth: float | None
    kind: str
    solver: SolverReport
    n: int
    notes: str = ""

    @property
    def converged(self) -> bool:
        return self.solver.converged


def _finish(ctx, beta, solver, kind, cov_spec, sigma_source, weighting=None):
    """Clip into the box and attach the covariance matrix."""
    model = ctx.model
    beta = model.clip_to_box(np.asarray(beta, dtype=float))
    d = model.dim_beta
    cov = np.full((d, d), np.nan)
    notes = ""
    try:
        g_matrix = moment_jacobian(ctx, beta)
        sigma = sigma_source(ctx, beta, cov_spec)
        if weighting is None:
            cov = asym_cov_mm(g_matrix, sigma, ctx.dataset.n)
        else:
            cov = asym_cov_gmm(g_matrix, weighting, sigma, ctx.dataset.n)
    except (IdentificationError, np.linalg.LinAlgError) as exc:
        notes = f"covariance unavailable: {exc}"
    std = np.sqrt(np.maximum(np.diag(cov), 0.0)) if np.all(np.isfinite(cov)) else np.full(d, np.nan)
    return EstimateResult(
        beta=beta,
        cov=cov,
        std_errors=std,
        tau=ctx.tau,
        bandwidth=ctx.bandwidth,
        kind=kind,
        solver=solver,
        n=ctx.dataset.n,
        notes=notes,
    )


def _sigma_quantile(ctx, beta, cov_spec):
    if cov_spec.mode == "iid":
        return sigma_iid_quantile(ctx.dataset, ctx.tau)
    return omega_hac(ctx, beta, cov_spec)


def _sigma_outer(ctx, beta, cov_spec):
    if cov_spec.mode == "iid":
        return omega_iid(ctx, beta)
    return omega_hac(ctx, beta, cov_spec)


def _initial_value(ctx: MomentContext) -> np.ndarray:
    """Cheap consistent starting point: 2SLS for linear models, the model's
    default start otherwise."""
    model = ctx.model
    if model.structure is not None:
        try:
            fit = estimate_2sls(
                ctx.dataset,
                outcome_col=model.structure.outcome_col,
                cov_spec=CovarianceSpec(),
                want_cov=False,
            )
            if np.all(np.isfinite(fit.beta)):
                return model.clip_to_box(fit.beta)
        except (ValueError, np.linalg.LinAlgError):
            pass
    return model.clip_to_box(model.start_point())


def _residual_scale(ctx: MomentContext, beta) -> float:
    resid = ctx.model.residuals(ctx.dataset, beta)
    q75, q25 = np.quantile(resid, [0.75, 0.25])
    scale = (q75 - q25) / 1.349
    if not np.isfinite(scale) or scale <= 0:
        scale = float(np.std(resid))
    return scale if np.isfinite(scale) and scale > 0 else 1.0


def estimate_mm(
    ctx: MomentContext,
    *,
    initial=None,
    cov_spec: CovarianceSpec = CovarianceSpec(),
    tol: float | None = None,
    max_iter: int = 60,
    want_cov: bool = True,
    kind: str = "mm",
    rescue_seed: int = 0,
) -> EstimateResult:
    """Solve the smoothed moment conditions exactly (d_z == dim_beta).

    Newton is tried at the target bandwidth first.  On failure the solve is
    restarted from a bandwidth large enough for the Jacobian to be
    informative and walked down geometrically (covering the 8h, 4h, 2h, h
    ladder), warm-starting each stage.  If the final Newton stage stalls, a
    derivative-free simplex polish on the squared moment norm makes the last
    step across the narrow smoothing window.
    """
    dataset, model = ctx.dataset, ctx.model
    if dataset.d_z != model.dim_beta:
        raise ValueError(
            f"exact identification requires d_z == dim_beta "
            f"(got {dataset.d_z} != {model.dim_beta})"
        )
    if tol is None:
        tol = 1e-8 * dataset.d_z
    x0 = model.clip_to_box(
        np.asarray(initial, dtype=float) if initial is not None else _initial_value(ctx)
    )

    def solve_at(h, start, iters=max_iter):
        c = ctx.with_bandwidth(h)
        return newton_root(
            lambda b: smoothed_moments(c, b),
            lambda b: moment_jacobian(c, b),
            start,
            box=model.parameter_box,
            tol=tol,
            max_iter=iters,
        )

    h_target = ctx.bandwidth
    scale = _residual_scale(ctx, x0)
    h_top = max(8.0 * h_target, scale * dataset.n ** (-1.0 / 7.0))

    linear = model.structure is not None

    def final_stage(start, iters_box):
        # Newton at the target bandwidth; for linear models thread the
        # smoothing windows with coordinate scans when Newton stalls.
        out, rep = solve_at(h_target, start)
        iters_box[0] += rep.iterations
        if not rep.converged and linear:
            scanned, _ = _line_scan_polish(ctx, out, tol)
            cand, cand_rep = solve_at(h_target, scanned)
            iters_box[0] += cand_rep.iterations
            if cand_rep.final_norm < rep.final_norm:
                out, rep = cand, cand_rep
        if not rep.converged and linear:
            threaded = _pair_threading(ctx, out, tol)
            if threaded is not None:
                norm = float(np.linalg.norm(smoothed_moments(ctx, threaded)))
                out = threaded
                rep = SolverReport(True, rep.iterations, norm, tol, "pair threading")
        if not rep.converged and not linear:
            out, rep, extra = _simplex_root_polish(ctx, out, tol)
            iters_box[0] += extra
        return out, rep

    def ladder(start):
        # Warm-start Newton down a bandwidth ladder (ending 8h, 4h, 2h, h).
        # Linear models thread the smoothing windows by coordinate scans at
        # every stalled stage: a global scan at the widest rung navigates to
        # the right basin, and cheap local scans afterwards follow the root
        # as window membership rearranges between rungs.
        current = np.asarray(start, dtype=float)
        iters_box = [0]
        n_stages = max(3, math.ceil(math.log2(h_top / h_target))) if h_top > h_target else 3
        for k in range(n_stages, 0, -1):
            h = h_target * 2.0**k
            current, stage_rep = solve_at(h, current, iters=25)
            iters_box[0] += stage_rep.iterations
            if linear and not stage_rep.converged:
                scanned, _ = _line_scan_polish(
                    ctx.with_bandwidth(h), current, tol, max_rounds=4
                )
                cand, cand_rep = solve_at(h, scanned, iters=25)
                iters_box[0] += cand_rep.iterations
                if cand_rep.final_norm < stage_rep.final_norm:
                    current = cand
        out, rep = final_stage(current, iters_box)
        return out, rep, iters_box[0]

    beta, report = solve_at(h_target, x0)
    total_iters = report.iterations
    if not report.converged:
        cand, cand_rep, iters = ladder(x0)
        total_iters += iters
        if cand_rep.final_norm < report.final_norm:
            beta, report = cand, cand_rep
    if not report.converged:
        # A wild starting value (2SLS has no moments under heavy tails) can
        # strand the whole continuation; retry once from the model's neutral
        # start before rescuing.
        neutral = model.clip_to_box(model.start_point())
        if float(np.linalg.norm(neutral - x0)) > 1e-8 * (1.0 + float(np.linalg.norm(x0))):
            cand, cand_rep, iters = ladder(neutral)
            total_iters += iters
            if cand_rep.final_norm < report.final_norm:
                beta, report = cand, cand_rep
    at_box_edge = np.any(
        (np.abs(beta - model.lower) <= 1e-9 * (1.0 + np.abs(model.lower)))
        | (np.abs(beta - model.upper) <= 1e-9 * (1.0 + np.abs(model.upper)))
    )
    if not report.converged and not at_box_edge:
        # Rescue: a short annealing search on the squared moment norm at the
        # informative bandwidth pulls the iterate out of a bad basin before
        # re-running the final stage.  Deterministic given rescue_seed.  A
        # solve that ran away to the box edge is skipped: that is the
        # signature of a sample whose moment equations have no root.
        rescued = _rescue_start(ctx, beta, h_top, scale, rescue_seed)
        iters_box = [0]
        cand, cand_rep = final_stage(rescued, iters_box)
        total_iters += iters_box[0]
        if cand_rep.final_norm < report.final_norm:
            beta, report = cand, cand_rep
    report = SolverReport(
        converged=report.final_norm <= tol,
        iterations=total_iters,
        final_norm=report.final_norm,
        tol=tol,
        message=report.message,
        path=report.path,
    )
    if not want_cov:
        return EstimateResult(
            beta=model.clip_to_box(beta),
            cov=np.full((model.dim_beta,) * 2, np.nan),
            std_errors=np.full(model.dim_beta, np.nan),
            tau=ctx.tau,
            bandwidth=ctx.bandwidth,
            kind=kind,
            solver=report,
            n=dataset.n,
        )
    return _finish(ctx, beta, report, kind, cov_spec, _sigma_quantile)


def _line_scan_polish(ctx, beta, tol, max_rounds=8, t_range=None):
    """Exact line minimization of the squared moment norm along coordinates.

    For linear-in-parameters models the residual is affine along any search
    direction, so every smoothing-window boundary along a line is available
    in closed form.  Scanning the segments between those boundaries makes
    the search immune to the flat plateaus that defeat derivative methods
    when the bandwidth is far below the observation spacing.  ``t_range``
    restricts the scan to a local window around the incumbent, used by the
    warm-started continuation stages where the root moves only a little.
    """
    model, ds = ctx.model, ctx.dataset
    h, tau, kern = ctx.bandwidth, ctx.tau, ctx.kernel
    z, n = ds.z, ds.n
    beta = model.clip_to_box(np.asarray(beta, dtype=float).copy())
    grads = model.gradients(ds, beta)  # constant in beta for linear models
    z_total = z.sum(axis=0)

    def qval(b):
        m = smoothed_moments(ctx, b)
        return float(m @ m)

    def moments_at_mids(mids, r0, d):
        # Moment vectors at all segment midpoints along one direction.
        # Observations fully past their window contribute step values,
        # accumulated by sorted suffix/prefix sums; only in-window
        # observations need kernel evaluations.  Falls back to the dense
        # matrix when the windows blanket most segments (wide bandwidth).
        n_mids = mids.size
        pos = d > 0
        neg = d < 0
        zer = ~pos & ~neg
        base = np.zeros(z.shape[1])
        if np.any(zer):
            base = (kern.cdf(-r0[zer] / h)) @ z[zer]
        m_out = np.tile(base - tau * z_total, (n_mids, 1))
        total_cover = 0
        pieces = []
        for mask, flip in ((pos, False), (neg, True)):
            if not np.any(mask):
                continue
            di, ri, zi = d[mask], r0[mask], z[mask]
            t_full = (-h - ri) / di  # residual hits -h (fully counted side)
            t_zero = (h - ri) / di  # residual hits +h (zeroed side)
            lo = np.minimum(t_full, t_zero)
            hi = np.maximum(t_full, t_zero)
            seg_lo = np.searchsorted(mids, lo)
            seg_hi = np.searchsorted(mids, hi)
            total_cover += int(np.sum(seg_hi - seg_lo))
            pieces.append((di, ri, zi, t_full, lo, hi, seg_lo, seg_hi, flip))
        if total_cover > 6 * n_mids + 4 * n:
            resid_mat = r0[None, :] + mids[:, None] * d[None, :]
            return (kern.cdf(-resid_mat / h) - tau) @ z / n
        for di, ri, zi, t_full, lo, hi, seg_lo, seg_hi, flip in pieces:
            # Step contribution: counted (value 1) while the midpoint is on
            # the "fully below" side of the window.
            if not flip:
                order = np.argsort(t_full)
                sorted_t = t_full[order]
                suffix = np.vstack([zi[order][::-1].cumsum(axis=0)[::-1], np.zeros(z.shape[1])])
                idx = np.searchsorted(sorted_t, mids, side="left")
                m_out += suffix[idx]
            else:
                order = np.argsort(t_full)
                sorted_t = t_full[order]
                prefix = np.vstack([np.zeros(z.shape[1]), zi[order].cumsum(axis=0)])
                idx = np.searchsorted(sorted_t, mids, side="right")
                m_out += prefix[idx]
            lens = seg_hi - seg_lo
            covered = lens > 0
            if not np.any(covered):
                continue
            lens_c = lens[covered]
            obs_idx = np.repeat(np.flatnonzero(covered), lens_c)
            starts = seg_lo[covered]
            offsets = np.arange(lens_c.sum()) - np.repeat(
                np.concatenate([[0], lens_c.cumsum()[:-1]]), lens_c
            )
            mid_idx = np.repeat(starts, lens_c) + offsets
            u = -(ri[obs_idx] + mids[mid_idx] * di[obs_idx]) / h
            vals = kern.cdf(u)
            np.add.at(m_out, mid_idx, vals[:, None] * zi[obs_idx])
        return m_out / n

    def refine_segments(t_lo, t_hi, d, r0):
        # Guarded 1-d Gauss-Newton on the squared norm inside each candidate
        # segment, batched across segments; the window segments are narrow,
        # so a handful of steps lands on the interior minimum.
        t = 0.5 * (t_lo + t_hi)
        scaled = -d / h
        for _ in range(7):
            u = -(r0[None, :] + t[:, None] * d[None, :]) / h
            m = (kern.cdf(u) - tau) @ z / n
            m_prime = (kern.deriv(u) * scaled[None, :]) @ z / n
            den = np.einsum("ij,ij->i", m_prime, m_prime)
            num = np.einsum("ij,ij->i", m, m_prime)
            step = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
            t = np.minimum(np.maximum(t - step, t_lo), t_hi)
        u = -(r0[None, :] + t[:, None] * d[None, :]) / h
        m = (kern.cdf(u) - tau) @ z / n
        return t, np.einsum("ij,ij->i", m, m)

    q = qval(beta)
    target = (0.5 * tol) ** 2
    for _ in range(max_rounds):
        if q <= target:
            break
        improved = False
        r0 = model.residuals(ds, beta)
        # Scan exogenous coordinates (intercepts) before endogenous ones;
        # fixing the level first keeps the slope scan out of compensating
        # far-away basins.
        for j in reversed(range(model.dim_beta)):
            d = grads[:, j]
            lo_t = model.lower[j] - beta[j]
            hi_t = model.upper[j] - beta[j]
            if t_range is not None:
                lo_t = max(lo_t, -t_range)
                hi_t = min(hi_t, t_range)
            if hi_t <= lo_t:
                continue
            nz = d != 0
            if not np.any(nz):
                continue
            ts = np.concatenate([(h - r0[nz]) / d[nz], (-h - r0[nz]) / d[nz]])
            ts = ts[(ts > lo_t) & (ts < hi_t)]
            ts = np.unique(np.concatenate([[lo_t, 0.0, hi_t], ts]))
            mids = 0.5 * (ts[:-1] + ts[1:])
            m_all = moments_at_mids(mids, r0, d)
            qs = np.einsum("ij,ij->i", m_all, m_all)
            # Refine the most promising segments; a window segment whose
            # midpoint value loses to a neighboring flat can still contain
            # the crossing.
            order = np.argsort(qs)[: min(5, qs.size)]
            cand_t, cand_q = refine_segments(ts[order], ts[order + 1], d, r0)
            pick = int(np.argmin(cand_q))
            t_star, q_star = 0.0, q
            if cand_q[pick] < q_star:
                t_star, q_star = float(cand_t[pick]), float(cand_q[pick])
            if q_star < q * (1.0 - 1e-14):
                beta[j] += t_star
                beta = model.clip_to_box(beta)
                r0 = r0 + t_star * d
                q = q_star
                improved = True
        if not improved:
            break
    return beta, q


def _pair_threading(ctx, beta, tol, n_candidates=32):
    """Land exactly on a moment root by placing d observations in-window.

    Near a root of an exactly identified linear system, all but ``dim_beta``
    observations sit strictly outside their smoothing windows and contribute
    steps; the remaining ones must sit at fractional window positions that
    balance the moments exactly.  This enumerates candidate observation
    pairs (taken from those with the smallest residuals), solves the linear
    system for the required fractional values and the implied parameter, and
    verifies the exact root.  Returns None if no candidate verifies.
    """
    from scipy.optimize import brentq

    model, ds = ctx.model, ctx.dataset
    d_beta = model.dim_beta
    if model.structure is None or d_beta != 2:
        return None
    h, tau, kern = ctx.bandwidth, ctx.tau, ctx.kernel
    z, n = ds.z, ds.n
    beta = np.asarray(beta, dtype=float)
    regressors = -model.gradients(ds, beta)  # rows r_i with resid = y - r_i @ beta
    offsets = model.residuals(ds, beta) + regressors @ beta  # the y_i part

    resid0 = model.residuals(ds, beta)
    order = np.argsort(np.abs(resid0))[: min(n_candidates, n)]
    # Monotone center branch of the smoothed step, used to invert fractions.
    u_hi = 1.0 / np.sqrt(3.0)
    w_lo, w_hi = float(kern.cdf(np.array(-u_hi))), float(kern.cdf(np.array(u_hi)))

    pairs = [(order[a], order[b]) for a in range(len(order)) for b in range(a + 1, len(order))]
    z_total = z.sum(axis=0)
    for i, j in pairs:
        rows = regressors[[i, j]]
        if abs(np.linalg.det(rows)) < 1e-12:
            continue
        trial = beta
        for _ in range(2):
            resid = offsets - regressors @ trial
            outside = np.ones(n, dtype=bool)
            outside[[i, j]] = False
            counted = outside & (resid <= 0.0)
            target = tau * z_total - z[counted].sum(axis=0)
            try:
                w = np.linalg.solve(z[[i, j]].T, target)
            except np.linalg.LinAlgError:
                break
            if not (w_lo <= w[0] <= w_hi and w_lo <= w[1] <= w_hi):
                break
            u = np.array(
                [
                    brentq(lambda v, wk=wk: float(kern.cdf(np.array(v))) - wk, -u_hi, u_hi, xtol=1e-16)
                    for wk in w
                ]
            )
            # Want I((-resid_k)/h) = w_k, i.e. resid_k = -h * u_k.
            try:
                cand = np.linalg.solve(rows, offsets[[i, j]] + h * u)
            except np.linalg.LinAlgError:
                break
            cand = model.clip_to_box(cand)
            m = smoothed_moments(ctx, cand)
            if float(np.linalg.norm(m)) <= tol:
                return cand
            trial = cand
    return None


def _rescue_start(ctx, beta, h_top, scale, seed):
    """Global look-around for the root when Newton gets trapped.

    Minimizes the squared moment norm at the informative top bandwidth over
    a local box a few residual scales wide, by a small annealing run.
    """
    model = ctx.model
    c = ctx.with_bandwidth(h_top)
    crit = lambda b: float(np.sum(smoothed_moments(c, model.clip_to_box(b)) ** 2))
    halfwidth = np.full(beta.size, 6.0 * scale)
    lo = np.maximum(model.lower, beta - halfwidth)
    hi = np.minimum(model.upper, beta + halfwidth)
    hi = np.where(hi > lo, hi, lo + 1e-8)
    schedule = AnnealingSchedule(
        n_temps=12, proposals_per_temp=12 * beta.size, freeze_fraction=0.3
    )
    x, _ = simulated_annealing(crit, np.column_stack([lo, hi]), beta, schedule, seed)
    return x


def _simplex_root_polish(ctx, beta, tol):
    """Derivative-free fallback for the last continuation stage.

    At very small bandwidths the moment map is flat between smoothing
    windows, which starves Newton of slope information even though a root
    exists; a simplex search on the squared norm crosses those flats.
    """
    model = ctx.model
    crit = lambda b: float(np.sum(smoothed_moments(ctx, model.clip_to_box(b)) ** 2))
    step = np.maximum(10.0 * ctx.bandwidth, 1e-9 * np.maximum(1.0, np.abs(beta)))
    simplex = [np.asarray(beta, dtype=float)]
    for j in range(beta.size):
        v = np.asarray(beta, dtype=float).copy()
        v[j] += step[j]
        simplex.append(v)
    res = scipy_minimize(
        crit,
        beta,
        method="Nelder-Mead",
        options={
            "initial_simplex": np.array(simplex),
            "xatol": 1e-14,
            "fatol": (0.01 * tol) ** 2,
            "maxfev": 800 * beta.size,
        },
    )
    cand = model.clip_to_box(res.x)
    norm = math.sqrt(max(crit(cand), 0.0))
    report = SolverReport(
        converged=norm <= tol,
        iterations=int(res.nfev),
        final_norm=norm,
        tol=tol,
        message="simplex fallback",
    )
    return cand, report, int(res.nfev)


def estimate_one_step(
    ctx: MomentContext,
    beta_bar,
    cov_spec: CovarianceSpec = CovarianceSpec(),
) -> EstimateResult:
    """One Newton-Raphson-type update from a consistent initial estimate.

    The step is the weighted regression of the sample moments on the moment
    Jacobian, with the inverse moment covariance as weight.
    """
    model = ctx.model
    beta_bar = np.asarray(beta_bar, dtype=float)
    if not np.all(np.isfinite(beta_bar)):
        raise ValueError("initial estimate must be finite")
    beta_bar = model.clip_to_box(beta_bar)
    moments, g_matrix = smoothed_moments_and_jacobian(ctx, beta_bar)
    omega = _sigma_outer(ctx, beta_bar, cov_spec)
    omega_inv = robust_inv(omega)
    bread = g_matrix.T @ omega_inv @ g_matrix
    try:
        step = np.linalg.solve(bread, g_matrix.T @ omega_inv @ moments)
    except np.linalg.LinAlgError:
        raise IdentificationError("G'Omega^{-1}G is singular") from None
    if not np.all(np.isfinite(step)):
        raise IdentificationError("G'Omega^{-1}G is singular")
    beta = model.clip_to_box(beta_bar - step)
    norm = float(np.linalg.norm(smoothed_moments(ctx, beta)))
    report = SolverReport(
        converged=True, iterations=1, final_norm=norm, tol=np.inf, message="one step"
    )
    result = _finish(ctx, beta, report, "one_step", cov_spec, _sigma_outer)
    return result


def projection_instruments(dataset: Dataset, endog_col: int = 1) -> Dataset:
    """Exactly-identifying instrument block from a first-stage projection.

    Regresses the endogenous regressor (a Y column) on the full instrument
    block and uses the fitted values as the lone excluded instrument next to
    the exogenous block.  Requires a constant column among the instruments
    and a full-rank instrument block.
    """
    endog_col = int(endog_col)
    if endog_col < 0 or endog_col >= dataset.d_y:
        raise ValueError("endog_col outside the Y block")
    z = dataset.z
    has_constant = any(
        np.all(z[:, j] == z[0, j]) and z[0, j] != 0 for j in range(dataset.d_z)
    )
    if not has_constant:
        raise ValueError("instrument block must include a constant column")
    target = dataset.y[:, endog_col]
    coef, _, rank, _ = np.linalg.lstsq(z, target, rcond=None)
    if rank < dataset.d_z:
        raise ValueError("collinear instrument block")
    fitted = z @ coef
    z_new = np.column_stack([dataset.x, fitted])
    return dataset.with_instruments(z_new, tuple(range(dataset.d_x)))


def _gmm_initial(ctx: MomentContext, cov_spec: CovarianceSpec) -> np.ndarray:
    """Starting point for the GMM search: exactly-identified solve on
    projection instruments when available, else the plain initial value."""
    model = ctx.model
    spec = model.structure
    if (
        spec is not None
        and len(spec.endog_cols) == 1
        and ctx.dataset.d_z > model.dim_beta
    ):
        try:
            ds_proj = projection_instruments(ctx.dataset, spec.endog_cols[0])
            fit = estimate_mm(
                ctx.with_dataset(ds_proj), cov_spec=cov_spec, want_cov=False
            )
            if np.all(np.isfinite(fit.beta)):
                return fit.beta
        except (ValueError, np.linalg.LinAlgError):
            pass
    return _initial_value(ctx)


def _criterion(ctx, w):
    def crit(beta):
        m = smoothed_moments(ctx, ctx.model.clip_to_box(np.asarray(beta, float)))
        return float(m @ w @ m)

    return crit


def _gauss_newton_polish(ctx, w, beta0, max_iter=80):
    """Damped Gauss-Newton descent on the quadratic moment criterion."""
    model = ctx.model
    crit = _criterion(ctx, w)
    beta = model.clip_to_box(np.asarray(beta0, dtype=float))
    q = crit(beta)
    evals = 1
    for _ in range(max_iter):
        moments, g_matrix = smoothed_moments_and_jacobian(ctx, beta)
        bread = g_matrix.T @ w @ g_matrix
        try:
            step = np.linalg.solve(bread, g_matrix.T @ w @ moments)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        lam = 1.0
        improved = False
        while lam >= 2.0**-40:
            cand = model.clip_to_box(beta - lam * step)
            qc = crit(cand)
            evals += 1
            if np.isfinite(qc) and qc < q * (1.0 - 1e-12):
                beta, q = cand, qc
                improved = True
                break
            lam *= 0.5
        if not improved or float(np.linalg.norm(step)) < 1e-12:
            break
    return beta, q, evals


def estimate_gmm(
    ctx: MomentContext,
    weighting="two_step",
    *,
    initial=None,
    cov_spec: CovarianceSpec = CovarianceSpec(),
    sa_schedule: AnnealingSchedule | None = None,
    sa_seed: int = 0,
    final_unsmoothed: bool = False,
) -> EstimateResult:
    """Minimize the weighted quadratic norm of the smoothed moments.

    ``weighting`` is "identity", "two_step" (inverse moment covariance at a
    consistent initial estimate), or an explicit symmetric positive definite
    matrix.  The search runs simulated annealing from the initial estimate
    (projection-instrument solve, improved by a one-step update when
    possible) and then polishes with damped Gauss-Newton steps.
    """
    dataset, model = ctx.dataset, ctx.model
    if dataset.d_z < model.dim_beta:
        raise ValueError("need at least as many instruments as parameters")

    if initial is None:
        initial = _gmm_initial(ctx, cov_spec)
    start = model.clip_to_box(np.asarray(initial, dtype=float))
    if dataset.d_z > model.dim_beta:
        try:
            one = estimate_one_step(ctx, start, cov_spec)
            if np.all(np.isfinite(one.beta)):
                start = one.beta
        except (IdentificationError, np.linalg.LinAlgError, ValueError):
            pass

    if isinstance(weighting, str):
        if weighting == "identity":
            w = np.eye(dataset.d_z)
            kind = "gmm_id"
        elif weighting == "two_step":
            w = robust_inv(_sigma_outer(ctx, start, cov_spec))
            kind = "gmm2s"
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
    else:
        w = np.asarray(weighting, dtype=float)
        if w.shape != (dataset.d_z, dataset.d_z):
            raise ValueError("weighting matrix has wrong shape")
        kind = "gmm_custom"

    crit = _criterion(ctx, w)
    schedule = sa_schedule if sa_schedule is not None else AnnealingSchedule()
    sa_x, sa_report = simulated_annealing(
        crit, model.parameter_box, start, schedule, sa_seed
    )
    beta, q, polish_evals = _gauss_newton_polish(ctx, w, sa_x)
    if crit(start) < q:  # keep the better of polish result and warm start
        beta, q, extra = _gauss_newton_polish(ctx, w, start)
        polish_evals += extra

    if final_unsmoothed:
        rough = lambda b: float(
            (lambda m: m @ w @ m)(unsmoothed_moments(ctx, model.clip_to_box(np.asarray(b, float))))
        )
        cand, _ = simulated_annealing(
            rough, model.parameter_box, beta, AnnealingSchedule(n_temps=10), sa_seed + 1
        )
        if crit(cand) < q:
            beta, q = model.clip_to_box(cand), crit(cand)

    report = SolverReport(
        converged=bool(np.isfinite(q)),
        iterations=sa_report.iterations + polish_evals,
        final_norm=q,
        tol=np.inf,
        message="annealing + polish",
        path=sa_report.path,
    )
    if kind == "gmm2s":
        return _finish(ctx, beta, report, kind, cov_spec, _sigma_outer)
    return _finish(ctx, beta, report, kind, cov_spec, _sigma_outer, weighting=w)


def estimate_2sls(
    dataset: Dataset,
    outcome_col: int = 0,
    cov_spec: CovarianceSpec = CovarianceSpec(),
    want_cov: bool = True,
) -> EstimateResult:
    """Classical two-stage least squares on (Y columns, X block) with the
    dataset's instruments; the mean-regression comparison baseline.

    Coefficients are ordered (endogenous regressors, exogenous regressors)
    to match the linear residual model.
    """
    y = dataset.y[:, outcome_col]
    endog = [c for c in range(dataset.d_y) if c != outcome_col]
    regressors = np.hstack([dataset.y[:, endog], dataset.x])
    z = dataset.z
    n = dataset.n
    k = regressors.shape[1]
    if dataset.d_z < k:
        raise ValueError("2SLS needs at least as many instruments as regressors")
    coef, _, rank, _ = np.linalg.lstsq(z, regressors, rcond=None)
    if rank < dataset.d_z:
        raise ValueError("rank-deficient instrument block")
    fitted = z @ coef
    bread = fitted.T @ regressors
    try:
        beta = np.linalg.solve(bread, fitted.T @ y)
    except np.linalg.LinAlgError:
        raise ValueError("rank-deficient first stage") from None
    resid = y - regressors @ beta
    report = SolverReport(
        converged=True,
        iterations=1,
        final_norm=float(np.linalg.norm(z.T @ resid / n)),
        tol=np.inf,
        message="closed form",
    )
    d = beta.size
    cov = np.full((d, d), np.nan)
    std = np.full(d, np.nan)
    notes = ""
    if want_cov:
        g_matrix = z.T @ regressors / n
        w_gmm = robust_inv(z.T @ z / n)
        if cov_spec.mode == "iid":
            sigma = float(resid @ resid / n) * (z.T @ z) / n
        else:
            g_rows = z * resid[:, None]
            bw = cov_spec.hac_bandwidth
            if bw == "auto":
                bw = andrews_bandwidth(g_rows, cov_spec.hac_kernel)
            sigma = long_run_variance(g_rows, cov_spec.hac_kernel, bw)
        try:
            cov = asym_cov_gmm(g_matrix, w_gmm, sigma, n)
            std = np.sqrt(np.maximum(np.diag(cov), 0.0))
        except (IdentificationError, np.linalg.LinAlgError) as exc:
            notes = f"covariance unavailable: {exc}"
    return EstimateResult(
        beta=beta,
        cov=cov,
        std_errors=std,
        tau=None,
        bandwidth=None,
        kind="2sls",
        solver=report,
        n=n,
        notes=notes,
    )


def estimate_qr(
    dataset: Dataset,
    outcome_col: int,
    tau: float,
    bandwidth: float,
    *,
    cov_spec: CovarianceSpec = CovarianceSpec(),
    want_cov: bool = True,
) -> EstimateResult:
    """Plain quantile regression: the exactly-identified solve with the
    regressor block standing in for the instruments (endogeneity ignored)."""
    from sqgmm.model import linear_residual_model

    endog = tuple(c for c in range(dataset.d_y) if c != outcome_col)
    exog = tuple(range(dataset.d_x))
    model = linear_residual_model(outcome_col, endog, exog)
    z_qr = np.hstack([dataset.y[:, endog], dataset.x])
    mapping = tuple(len(endog) + i for i in range(dataset.d_x))
    ds_qr = Dataset(dataset.y, dataset.x, z_qr, mapping)
    ctx = MomentContext(ds_qr, model, tau, bandwidth)
    return estimate_mm(ctx, cov_spec=cov_spec, want_cov=want_cov, kind="qr")
