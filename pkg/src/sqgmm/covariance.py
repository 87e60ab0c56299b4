"""Moment covariance and long-run variance estimation.

For independent data the moment covariance is the outer-product average of
the per-observation moment rows.  For time series it is replaced by a
heteroskedasticity-and-autocorrelation-consistent (HAC) long-run variance
with Bartlett or quadratic-spectral lag weights and an optional AR(1)
plug-in bandwidth.  No formal consistency result exists for HAC applied to
these smoothed quantile moments; the estimators are provided because they
are standard practice, and callers should treat HAC-based standard errors
for dependent data as approximate.

The asymptotic covariance matrices follow the usual method-of-moments and
GMM sandwich forms, scaled by the sample size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sqgmm.model import Dataset
from sqgmm.moments import MomentContext, moment_contributions

__all__ = [
    "CovarianceSpec",
    "IdentificationError",
    "omega_iid",
    "omega_hac",
    "long_run_variance",
    "andrews_bandwidth",
    "sigma_iid_quantile",
    "asym_cov_mm",
    "asym_cov_gmm",
    "floor_eigenvalues",
    "robust_inv",
]

EIG_FLOOR_REL = 1e-10


class IdentificationError(ValueError):
    """The moment Jacobian is rank deficient: parameters are not locally
    identified by these instruments."""


@dataclass(frozen=True)
class CovarianceSpec:
    """How to estimate the moment covariance.

    mode "iid" uses outer products (and the quantile-specific form for
    standard errors); mode "hac" uses a long-run variance with the given
    kernel and bandwidth.  ``hac_bandwidth`` may be a positive number or
    "auto" for the AR(1) plug-in rule.
    """

    mode: str = "iid"
    hac_kernel: str = "bartlett"
    hac_bandwidth: float | str = "auto"

    def __post_init__(self):
        if self.mode not in ("iid", "hac"):
            raise ValueError(f"unknown covariance mode {self.mode!r}")
        if self.hac_kernel not in ("bartlett", "quadratic_spectral"):
            raise ValueError(f"unknown HAC kernel {self.hac_kernel!r}")
        if isinstance(self.hac_bandwidth, str):
            if self.hac_bandwidth != "auto":
                raise ValueError("hac_bandwidth must be a positive number or 'auto'")
        elif not self.hac_bandwidth > 0:
            raise ValueError("hac_bandwidth must be positive")


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def omega_iid(ctx: MomentContext, beta) -> np.ndarray:
    """Outer-product average of the smoothed moment rows at beta."""
    g = moment_contributions(ctx, beta)
    return _sym(g.T @ g / g.shape[0])


def omega_hac(ctx: MomentContext, beta, spec: CovarianceSpec) -> np.ndarray:
    """Long-run variance of the smoothed moment rows at beta."""
    g = moment_contributions(ctx, beta)
    bandwidth = spec.hac_bandwidth
    if bandwidth == "auto":
        bandwidth = andrews_bandwidth(g, spec.hac_kernel)
    return long_run_variance(g, spec.hac_kernel, bandwidth)


def _qs_weight(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x != 0
    a = 6.0 * np.pi * x[nz] / 5.0
    out[nz] = 25.0 / (12.0 * np.pi**2 * x[nz] ** 2) * (np.sin(a) / a - np.cos(a))
    return out


def long_run_variance(g: np.ndarray, kernel: str, bandwidth: float) -> np.ndarray:
    """Weighted sum of sample autocovariances of the rows of g.

    Lag 0 enters with weight 1; lag j enters with weight w(j / bandwidth)
    where w is the Bartlett or quadratic-spectral window.  Bartlett weights
    vanish for j >= bandwidth, so a bandwidth of 1 or less reproduces the
    outer-product estimator exactly.
    """
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    if bandwidth <= 0 or not np.isfinite(bandwidth):
        raise ValueError("HAC bandwidth must be positive and finite")
    if kernel == "bartlett":
        nominal_lag = min(n - 1, max(0, math.ceil(bandwidth) - 1))
        lag_weight = lambda j: max(0.0, 1.0 - j / bandwidth)
    elif kernel == "quadratic_spectral":
        nominal_lag = min(n - 1, math.ceil(bandwidth))
        lag_weight = lambda j: float(_qs_weight(np.array(j / bandwidth)))
    else:
        raise ValueError(f"unknown HAC kernel {kernel!r}")
    if n < 2 * nominal_lag:
        raise ValueError(
            f"need at least {2 * nominal_lag} observations for HAC bandwidth "
            f"{bandwidth:g}, got {n}"
        )
    total = g.T @ g / n
    max_lag = n - 1 if kernel == "quadratic_spectral" else nominal_lag
    for j in range(1, max_lag + 1):
        w = lag_weight(j)
        if w == 0.0:
            if kernel == "bartlett":
                break
            continue
        gamma_j = g[j:].T @ g[:-j] / n
        total = total + w * (gamma_j + gamma_j.T)
    return _sym(total)


def andrews_bandwidth(g: np.ndarray, kernel: str, constant: float | None = None) -> float:
    """AR(1) plug-in bandwidth for the long-run variance.

    Fits a first-order autoregression to each moment coordinate and combines
    them with equal weights; the kernel-specific rate constants are the
    standard ones (1.1447 for Bartlett at rate n^(1/3), 1.3221 for quadratic
    spectral at rate n^(1/5)) unless overridden.
    """
    g = np.asarray(g, dtype=float)
    n, d = g.shape
    if n < 4:
        return 1.0
    num = 0.0
    den = 0.0
    for a in range(d):
        s = g[:, a] - g[:, a].mean()
        denom = float(s[:-1] @ s[:-1])
        rho = float(s[1:] @ s[:-1]) / denom if denom > 0 else 0.0
        rho = min(0.97, max(-0.97, rho))
        resid = s[1:] - rho * s[:-1]
        sig2 = float(resid @ resid) / max(1, n - 1)
        if sig2 <= 0:
            continue
        if kernel == "bartlett":
            num += 4.0 * rho**2 * sig2**2 / ((1 - rho) ** 6 * (1 + rho) ** 2)
        else:
            num += 4.0 * rho**2 * sig2**2 / (1 - rho) ** 8
        den += sig2**2 / (1 - rho) ** 4
    alpha = num / den if den > 0 else 0.0
    if kernel == "bartlett":
        c = 1.1447 if constant is None else constant
        bw = c * (alpha * n) ** (1.0 / 3.0)
    else:
        c = 1.3221 if constant is None else constant
        bw = c * (alpha * n) ** (1.0 / 5.0)
    return max(bw, 1.0)


def sigma_iid_quantile(dataset: Dataset, tau: float) -> np.ndarray:
    """Moment covariance implied by an exact conditional quantile fit with
    independent data: tau(1-tau) times the instrument second-moment matrix."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie strictly between 0 and 1")
    z = dataset.z
    return _sym(tau * (1.0 - tau) * (z.T @ z) / dataset.n)


def floor_eigenvalues(a: np.ndarray, rel: float = EIG_FLOOR_REL) -> np.ndarray:
    """Raise small or negative eigenvalues of a symmetric matrix to a floor
    proportional to the largest eigenvalue, making it safely invertible."""
    a = _sym(np.asarray(a, dtype=float))
    vals, vecs = np.linalg.eigh(a)
    top = float(vals[-1])
    if top <= 0.0:
        # Degenerate matrix: fall back to a scaled identity.
        scale = max(abs(top), 1.0)
        return np.eye(a.shape[0]) * rel * scale
    floored = np.maximum(vals, rel * top)
    if np.array_equal(floored, vals):
        return a
    return _sym((vecs * floored) @ vecs.T)


def robust_inv(a: np.ndarray, rel: float = EIG_FLOOR_REL) -> np.ndarray:
    """Inverse after eigenvalue flooring; always symmetric."""
    a = floor_eigenvalues(a, rel)
    vals, vecs = np.linalg.eigh(a)
    return _sym((vecs / vals) @ vecs.T)


def _check_weighting(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("weighting matrix must be square")
    if not np.allclose(w, w.T, atol=1e-10 * max(1.0, np.abs(w).max())):
        raise ValueError("weighting matrix must be symmetric")
    vals = np.linalg.eigvalsh(_sym(w))
    if vals[0] <= 0:
        raise ValueError("weighting matrix must be positive definite")
    return _sym(w)


def asym_cov_mm(g_matrix: np.ndarray, sigma: np.ndarray, n: int) -> np.ndarray:
    """Covariance of the exactly-identified estimator: the inverse of
    G' Sigma^{-1} G, divided by the sample size."""
    g_matrix = np.asarray(g_matrix, dtype=float)
    d_beta = g_matrix.shape[1]
    if np.linalg.matrix_rank(g_matrix) < d_beta:
        raise IdentificationError(
            "moment Jacobian is rank deficient; parameters are not locally identified"
        )
    sinv = robust_inv(sigma)
    bread = g_matrix.T @ sinv @ g_matrix
    return _sym(robust_inv(bread)) / n


def asym_cov_gmm(
    g_matrix: np.ndarray, w: np.ndarray, sigma: np.ndarray, n: int
) -> np.ndarray:
    """Sandwich covariance of the weighted GMM estimator divided by n:
    (G'WG)^{-1} G'W Sigma WG (G'WG)^{-1}."""
    g_matrix = np.asarray(g_matrix, dtype=float)
    w = _check_weighting(w)
    sigma = _sym(np.asarray(sigma, dtype=float))
    bread = g_matrix.T @ w @ g_matrix
    try:
        bread_inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        raise IdentificationError("G'WG is singular") from None
    if not np.all(np.isfinite(bread_inv)):
        raise IdentificationError("G'WG is singular")
    meat = g_matrix.T @ w @ sigma @ w @ g_matrix
    return _sym(bread_inv @ meat @ bread_inv.T) / n
