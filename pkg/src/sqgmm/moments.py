"""Sample moment vectors for smoothed quantile estimation.

The per-observation moment is the instrument row scaled by the (smoothed)
below-zero indicator of the residual minus the quantile level.  The smoothed
version replaces the indicator by the kernel step evaluated at minus the
residual over the bandwidth; its derivative in the parameters is available in
closed form and drives the Newton-type solvers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from sqgmm.model import Dataset, ResidualModel
from sqgmm.smoothing import DEFAULT_KERNEL, SmoothKernel

__all__ = [
    "MomentContext",
    "smoothed_moments",
    "unsmoothed_moments",
    "moment_jacobian",
    "smoothed_moments_and_jacobian",
    "moment_contributions",
]

MIN_BANDWIDTH = 1e-12


@dataclass(frozen=True)
class MomentContext:
    """Everything needed to evaluate sample moments at a parameter value."""

    dataset: Dataset
    model: ResidualModel
    tau: float
    bandwidth: float
    kernel: SmoothKernel = DEFAULT_KERNEL

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie strictly between 0 and 1")
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.model.dim_beta > self.dataset.d_z:
            raise ValueError(
                "model has more parameters than instruments "
                f"({self.model.dim_beta} > {self.dataset.d_z})"
            )
        if self.bandwidth < MIN_BANDWIDTH:
            warnings.warn(
                f"bandwidth {self.bandwidth:g} clamped to {MIN_BANDWIDTH:g}; "
                "the moment Jacobian degenerates as the bandwidth shrinks",
                RuntimeWarning,
                stacklevel=2,
            )
            object.__setattr__(self, "bandwidth", MIN_BANDWIDTH)

    def with_bandwidth(self, h: float) -> "MomentContext":
        return replace(self, bandwidth=float(h))

    def with_dataset(self, dataset: Dataset) -> "MomentContext":
        return replace(self, dataset=dataset)


def smoothed_moments(ctx: MomentContext, beta) -> np.ndarray:
    """Average of Z_i times (smoothed below-zero indicator - tau)."""
    resid = ctx.model.residuals(ctx.dataset, beta)
    smooth = ctx.kernel.cdf(-resid / ctx.bandwidth)
    return ctx.dataset.z.T @ (smooth - ctx.tau) / ctx.dataset.n


def unsmoothed_moments(ctx: MomentContext, beta) -> np.ndarray:
    """Average of Z_i times (1{residual <= 0} - tau)."""
    resid = ctx.model.residuals(ctx.dataset, beta)
    ind = (resid <= 0.0).astype(float)
    return ctx.dataset.z.T @ (ind - ctx.tau) / ctx.dataset.n


def moment_jacobian(ctx: MomentContext, beta) -> np.ndarray:
    """Derivative of the smoothed moments in beta, shape (d_z, dim_beta).

    Entry (k, j) is minus the bandwidth-scaled average of the kernel
    derivative times Z column k times the residual gradient column j.
    """
    _, jac = smoothed_moments_and_jacobian(ctx, beta)
    return jac


def smoothed_moments_and_jacobian(ctx: MomentContext, beta):
    """Moments and Jacobian from a single residual pass."""
    h = ctx.bandwidth
    resid = ctx.model.residuals(ctx.dataset, beta)
    u = -resid / h
    z = ctx.dataset.z
    n = ctx.dataset.n
    moments = z.T @ (ctx.kernel.cdf(u) - ctx.tau) / n
    weights = ctx.kernel.deriv(u)
    grads = ctx.model.gradients(ctx.dataset, beta)
    jac = -(z.T @ (weights[:, None] * grads)) / (n * h)
    return moments, jac


def moment_contributions(ctx: MomentContext, beta) -> np.ndarray:
    """Per-observation smoothed moment rows, shape (n, d_z)."""
    resid = ctx.model.residuals(ctx.dataset, beta)
    smooth = ctx.kernel.cdf(-resid / ctx.bandwidth)
    return ctx.dataset.z * (smooth - ctx.tau)[:, None]
