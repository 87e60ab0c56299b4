"""Smoothed method-of-moments and GMM estimation for conditional quantile
restrictions with instrumental variables."""

from sqgmm.smoothing import (
    SmoothKernel,
    DEFAULT_KERNEL,
    smoothed_indicator,
    smoothed_indicator_deriv,
    kernel_moment,
)

__version__ = "0.1.0"
