"""Bandwidth selection policies for the smoothing scale.

Three policies: a fixed constant, a rate policy c * n**exponent with the
default exponent -1/7 (the optimal rate for a fourth-order kernel), and a
rough plug-in that scales a robust residual spread by n**(-1/7).  The
plug-in is an explicitly labeled approximation: reports always carry the
realized bandwidth so callers can override it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sqgmm.model import Dataset, ResidualModel

__all__ = ["BandwidthPolicy", "select_bandwidth", "parse_bandwidth_policy"]

DEFAULT_RATE_EXPONENT = -1.0 / 7.0


@dataclass(frozen=True)
class BandwidthPolicy:
    """How to choose the smoothing bandwidth.

    kind "fixed" returns ``h`` unchanged; "rate" returns ``c * n**exponent``;
    "plugin" returns a robust residual scale times n**(-1/7).  ``floor`` is
    the minimal numerically feasible value.
    """

    kind: str = "rate"
    h: float = 0.1
    c: float = 1.0
    exponent: float = DEFAULT_RATE_EXPONENT
    floor: float = 1e-12

    def __post_init__(self):
        if self.kind not in ("fixed", "rate", "plugin"):
            raise ValueError(f"unknown bandwidth policy {self.kind!r}")
        if self.kind == "fixed" and not self.h > 0:
            raise ValueError("fixed bandwidth must be positive")
        if self.kind == "rate" and not self.c > 0:
            raise ValueError("rate constant must be positive")
        if self.kind == "rate" and not self.exponent < 0:
            raise ValueError("rate exponent must be negative")
        if not self.floor > 0:
            raise ValueError("bandwidth floor must be positive")

    def describe(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.h:g}"
        if self.kind == "rate":
            return f"rate:{self.c:g},{self.exponent:g}"
        return "plugin"


def parse_bandwidth_policy(text: str) -> BandwidthPolicy:
    """Parse ``fixed:H``, ``rate:C,E`` (E optional), or ``plugin``."""
    text = text.strip()
    if text == "plugin":
        return BandwidthPolicy(kind="plugin")
    if text.startswith("fixed:"):
        return BandwidthPolicy(kind="fixed", h=float(text.split(":", 1)[1]))
    if text.startswith("rate:"):
        parts = text.split(":", 1)[1].split(",")
        c = float(parts[0])
        exponent = float(parts[1]) if len(parts) > 1 else DEFAULT_RATE_EXPONENT
        return BandwidthPolicy(kind="rate", c=c, exponent=exponent)
    raise ValueError(f"cannot parse bandwidth policy {text!r}")


def _pilot_residual_scale(dataset: Dataset, model: ResidualModel) -> float:
    """Robust spread of residuals at a cheap pilot parameter value."""
    beta = None
    if model.structure is not None:
        # Least-squares pilot for linear models: regress the outcome on the
        # endogenous and exogenous blocks directly.
        spec = model.structure
        design = np.hstack([dataset.y[:, spec.endog_cols], dataset.x[:, spec.exog_cols]])
        outcome = dataset.y[:, spec.outcome_col]
        try:
            beta, *_ = np.linalg.lstsq(design, outcome, rcond=None)
        except np.linalg.LinAlgError:
            beta = None
    if beta is None:
        beta = model.start_point()
    beta = model.clip_to_box(beta)
    resid = model.residuals(dataset, beta)
    q75, q25 = np.quantile(resid, [0.75, 0.25])
    scale = (q75 - q25) / 1.349
    if not np.isfinite(scale) or scale <= 0:
        scale = float(np.std(resid))
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    return scale


def select_bandwidth(
    policy: BandwidthPolicy,
    dataset: Dataset,
    model: ResidualModel,
    tau: float,
) -> float:
    """Resolve a policy to a positive bandwidth for this sample."""
    if dataset.n < 2:
        raise ValueError("need at least 2 observations to pick a bandwidth")
    n = dataset.n
    if policy.kind == "fixed":
        h = policy.h
    elif policy.kind == "rate":
        h = policy.c * n**policy.exponent
    else:
        h = _pilot_residual_scale(dataset, model) * n ** (-1.0 / 7.0)
    return max(float(h), policy.floor)
