"""Smoothed step function used in place of the indicator inside quantile moments.

The built-in kernel replaces ``1{u >= 0}`` by a piecewise polynomial that is 0
below -1, 1 above +1, and a degree-7 polynomial in between.  Its derivative is
a symmetric fourth-order kernel supported on [-1, 1]: the first three moments
of the derivative vanish while the fourth does not, which keeps the smoothing
bias at O(h^4) for bandwidth h.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

__all__ = [
    "SmoothKernel",
    "DEFAULT_KERNEL",
    "smoothed_indicator",
    "smoothed_indicator_deriv",
    "kernel_moment",
    "register_kernel",
    "get_kernel",
]


@dataclass(frozen=True)
class SmoothKernel:
    """A smoothed step function and its derivative on the support [-1, 1].

    Parameters
    ----------
    name : str
        Registry key.
    order_r : int
        Number of vanishing moments of the derivative (its kernel order).
    cdf : callable
        Vectorized smoothed step: 0 for u <= -1, 1 for u >= 1, in [-1, 2]
        on the interior.
    deriv : callable
        Vectorized derivative, zero outside [-1, 1], symmetric inside.
    deriv_coeffs : tuple of Fraction
        Exact polynomial coefficients of the derivative on [-1, 1] in
        ascending powers.  Used for exact moment integration.
    """

    name: str
    order_r: int
    cdf: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    deriv_coeffs: tuple[Fraction, ...] = field(repr=False)


def _check_finite(u):
    arr = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("smoothed indicator requires finite input")
    return arr


# Interior polynomial: 0.5 + (105/64) * (u - (5/3) u^3 + (7/5) u^5 - (3/7) u^7).
_C1 = 105.0 / 64.0
_C3 = _C1 * (-5.0 / 3.0)
_C5 = _C1 * (7.0 / 5.0)
_C7 = _C1 * (-3.0 / 7.0)

# Derivative on [-1, 1]: (105/64) * (1 - 5 u^2 + 7 u^4 - 3 u^6).
_D0 = _C1
_D2 = _C1 * -5.0
_D4 = _C1 * 7.0
_D6 = _C1 * -3.0


def _poly4_cdf(u: np.ndarray) -> np.ndarray:
    u2 = u * u
    interior = 0.5 + u * (_C1 + u2 * (_C3 + u2 * (_C5 + u2 * _C7)))
    return np.where(u <= -1.0, 0.0, np.where(u >= 1.0, 1.0, interior))


def _poly4_deriv(u: np.ndarray) -> np.ndarray:
    u2 = u * u
    interior = _D0 + u2 * (_D2 + u2 * (_D4 + u2 * _D6))
    # Defined as 0 at the boundary; the interior polynomial also vanishes
    # there, so there is no jump.
    return np.where(np.abs(u) >= 1.0, 0.0, interior)


_F = Fraction(105, 64)

DEFAULT_KERNEL = SmoothKernel(
    name="poly4",
    order_r=4,
    cdf=_poly4_cdf,
    deriv=_poly4_deriv,
    deriv_coeffs=(_F, Fraction(0), -5 * _F, Fraction(0), 7 * _F, Fraction(0), -3 * _F),
)

_REGISTRY: dict[str, SmoothKernel] = {DEFAULT_KERNEL.name: DEFAULT_KERNEL}


def register_kernel(kernel: SmoothKernel) -> None:
    """Register an alternative smoothing kernel under its name."""
    if kernel.order_r < 2:
        raise ValueError("kernel order must be at least 2")
    _REGISTRY[kernel.name] = kernel


def get_kernel(name: str) -> SmoothKernel:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown smoothing kernel {name!r}") from None


def smoothed_indicator(u, kernel: SmoothKernel = DEFAULT_KERNEL):
    """Smoothed version of the step function 1{u >= 0}.

    Exactly 0 for u <= -1 and exactly 1 for u >= 1; the interior values may
    exceed 1 (they are bounded by [-1, 2]).  Rejects non-finite input.
    """
    arr = _check_finite(u)
    out = kernel.cdf(arr)
    if np.isscalar(u) or arr.ndim == 0:
        return float(out)
    return out


def smoothed_indicator_deriv(u, kernel: SmoothKernel = DEFAULT_KERNEL):
    """Derivative of :func:`smoothed_indicator`; zero outside [-1, 1].

    At u = +-1 the value is defined as 0, matching the interior limit.
    """
    arr = _check_finite(u)
    out = kernel.deriv(arr)
    if np.isscalar(u) or arr.ndim == 0:
        return float(out)
    return out


def kernel_moment(k: int, kernel: SmoothKernel = DEFAULT_KERNEL) -> float:
    """Exact integral of u^k times the kernel derivative over [-1, 1].

    The integrand is a polynomial, so the moment is computed by term-wise
    rational integration and is exact up to the final float conversion.
    Moment 0 is 1 and moments 1..order_r-1 vanish for a kernel of the
    declared order.
    """
    if k < 0 or k > 8:
        raise ValueError("moment order must be in 0..8")
    total = Fraction(0)
    for j, c in enumerate(kernel.deriv_coeffs):
        if c == 0:
            continue
        p = k + j
        if p % 2 == 0:  # odd-power terms integrate to zero on [-1, 1]
            total += c * Fraction(2, p + 1)
    return float(total)
