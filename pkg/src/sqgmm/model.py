"""Data container and pluggable residual functions.

A :class:`Dataset` holds aligned observation blocks: endogenous variables Y
(outcome plus endogenous regressors), exogenous regressors X, and the full
instrument block Z, with X's columns declared to sit inside Z.  A
:class:`ResidualModel` supplies the scalar residual and its parameter
gradient row by row; the built-in models also carry vectorized versions used
by the moment code.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "ResidualModel",
    "LinearSpec",
    "linear_residual_model",
    "euler_residual_model",
    "load_dataset_csv",
    "load_column_roles",
]


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Aligned observation matrices for one sample.

    ``x_cols_in_z`` maps each column of X to its position in Z.  The mapping
    is declared by the caller and validated for shape only, never by value
    comparison.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    x_cols_in_z: tuple[int, ...] = ()

    def __post_init__(self):
        y = _as_matrix(self.y, "Y")
        x = _as_matrix(self.x, "X")
        z = _as_matrix(self.z, "Z")
        if not (y.shape[0] == x.shape[0] == z.shape[0]):
            raise ValueError("Y, X, Z must share the same number of rows")
        if y.shape[0] == 0:
            raise ValueError("dataset has no observations")
        mapping = tuple(int(j) for j in self.x_cols_in_z)
        if len(mapping) != x.shape[1]:
            raise ValueError("x_cols_in_z must name one Z column per X column")
        if any(j < 0 or j >= z.shape[1] for j in mapping):
            raise ValueError("x_cols_in_z indexes outside Z")
        y.setflags(write=False)
        x.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x_cols_in_z", mapping)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    def with_instruments(self, z, x_cols_in_z=None) -> "Dataset":
        """Copy of the dataset with a replacement instrument block."""
        mapping = self.x_cols_in_z if x_cols_in_z is None else x_cols_in_z
        return Dataset(self.y, self.x, z, mapping)


@dataclass(frozen=True)
class LinearSpec:
    """Column layout of a linear-in-parameters residual."""

    outcome_col: int
    endog_cols: tuple[int, ...]
    exog_cols: tuple[int, ...]


@dataclass(frozen=True)
class ResidualModel:
    """Residual function and its parameter gradient.

    ``evaluate`` and ``gradient`` act on single rows; ``evaluate_all`` and
    ``gradient_all`` are optional vectorized forms over a whole dataset.  The
    parameter box bounds the compact search region for the estimators.
    """

    dim_beta: int
    evaluate: Callable[[np.ndarray, np.ndarray, np.ndarray], float]
    gradient: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    parameter_box: np.ndarray
    evaluate_all: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None
    gradient_all: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None
    structure: LinearSpec | None = None
    default_start: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        box = np.asarray(self.parameter_box, dtype=float)
        if box.shape != (self.dim_beta, 2):
            raise ValueError("parameter_box must have shape (dim_beta, 2)")
        if np.any(box[:, 0] >= box[:, 1]):
            raise ValueError("parameter_box lower bounds must be below uppers")
        box.setflags(write=False)
        object.__setattr__(self, "parameter_box", box)
        if self.default_start is not None:
            start = np.asarray(self.default_start, dtype=float)
            start.setflags(write=False)
            object.__setattr__(self, "default_start", start)

    @property
    def lower(self) -> np.ndarray:
        return self.parameter_box[:, 0]

    @property
    def upper(self) -> np.ndarray:
        return self.parameter_box[:, 1]

    def clip_to_box(self, beta: np.ndarray) -> np.ndarray:
        return np.clip(beta, self.lower, self.upper)

    def start_point(self) -> np.ndarray:
        if self.default_start is not None:
            return self.default_start.copy()
        box = self.parameter_box
        mid = np.where(np.isfinite(box).all(axis=1), box.mean(axis=1), 0.0)
        return mid

    def residuals(self, dataset: Dataset, beta) -> np.ndarray:
        """Residual vector over all rows."""
        beta = self._check_beta(beta)
        if self.evaluate_all is not None:
            return self.evaluate_all(dataset.y, dataset.x, beta)
        out = np.empty(dataset.n)
        for i in range(dataset.n):
            out[i] = self.evaluate(dataset.y[i], dataset.x[i], beta)
        return out

    def gradients(self, dataset: Dataset, beta) -> np.ndarray:
        """(n, dim_beta) matrix of residual gradients."""
        beta = self._check_beta(beta)
        if self.gradient_all is not None:
            return self.gradient_all(dataset.y, dataset.x, beta)
        out = np.empty((dataset.n, self.dim_beta))
        for i in range(dataset.n):
            out[i] = self.gradient(dataset.y[i], dataset.x[i], beta)
        return out

    def _check_beta(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.dim_beta,):
            raise ValueError(
                f"beta has shape {beta.shape}, expected ({self.dim_beta},)"
            )
        return beta


def linear_residual_model(
    outcome_col: int,
    endog_cols: Sequence[int],
    exog_cols: Sequence[int],
    box_halfwidth: float = 1e3,
    parameter_box: np.ndarray | None = None,
) -> ResidualModel:
    """Linear residual: outcome minus endogenous and exogenous index.

    The residual is ``y[outcome] - y[endog] @ b1 - x[exog] @ b2`` with the
    parameter vector ordered (endogenous coefficients, exogenous
    coefficients).  The gradient is the constant row ``-(y[endog], x[exog])``.
    """
    outcome_col = int(outcome_col)
    endog = tuple(int(c) for c in endog_cols)
    exog = tuple(int(c) for c in exog_cols)
    if outcome_col in endog:
        raise ValueError("outcome column cannot also be an endogenous regressor")
    if len(set(endog)) != len(endog) or len(set(exog)) != len(exog):
        raise ValueError("duplicate column indices")
    d_beta = len(endog) + len(exog)
    if d_beta == 0:
        raise ValueError("model has no parameters")

    def evaluate(y_row, x_row, beta):
        b1 = beta[: len(endog)]
        b2 = beta[len(endog):]
        return float(
            y_row[outcome_col] - y_row[list(endog)] @ b1 - x_row[list(exog)] @ b2
        )

    def gradient(y_row, x_row, beta):
        return -np.concatenate([y_row[list(endog)], x_row[list(exog)]])

    def evaluate_all(y, x, beta):
        _validate_cols(y, x)
        b1 = beta[: len(endog)]
        b2 = beta[len(endog):]
        return y[:, outcome_col] - y[:, endog] @ b1 - x[:, exog] @ b2

    def gradient_all(y, x, beta):
        _validate_cols(y, x)
        return -np.hstack([y[:, endog], x[:, exog]])

    def _validate_cols(y, x):
        cols = (outcome_col, *endog)
        if max(cols) >= y.shape[1] or min(cols) < 0:
            raise ValueError("column index outside Y block")
        if exog and (max(exog) >= x.shape[1] or min(exog) < 0):
            raise ValueError("column index outside X block")

    if parameter_box is None:
        parameter_box = np.column_stack(
            [np.full(d_beta, -box_halfwidth), np.full(d_beta, box_halfwidth)]
        )
    return ResidualModel(
        dim_beta=d_beta,
        evaluate=evaluate,
        gradient=gradient,
        parameter_box=np.asarray(parameter_box, dtype=float),
        evaluate_all=evaluate_all,
        gradient_all=gradient_all,
        structure=LinearSpec(outcome_col, endog, exog),
        default_start=np.zeros(d_beta),
        name="linear",
    )


def euler_residual_model(
    discount_bounds: tuple[float, float] = (0.5, 1.5),
    curvature_bounds: tuple[float, float] = (-1000.0, 1000.0),
) -> ResidualModel:
    """Consumption-growth residual for the intertemporal optimality condition.

    The Y block must hold (consumption ratio, gross return) in levels, both
    strictly positive.  With parameters (b, g) the residual is
    ``b * gross_return * ratio**(-g) - 1``; the gradient follows by direct
    differentiation.  The default curvature bounds are wide enough to cover
    the extreme estimates that arise on quarterly aggregate data.
    """

    def _check_positive(ratio, ret):
        if np.any(ratio <= 0) or np.any(ret <= 0):
            raise ValueError("consumption ratios and gross returns must be positive")

    def evaluate(y_row, x_row, beta):
        ratio, ret = y_row[0], y_row[1]
        _check_positive(ratio, ret)
        b, g = beta
        return float(b * ret * ratio ** (-g) - 1.0)

    def gradient(y_row, x_row, beta):
        ratio, ret = y_row[0], y_row[1]
        _check_positive(ratio, ret)
        b, g = beta
        core = ret * ratio ** (-g)
        return np.array([core, -b * core * np.log(ratio)])

    def evaluate_all(y, x, beta):
        ratio, ret = y[:, 0], y[:, 1]
        _check_positive(ratio, ret)
        b, g = beta
        return b * ret * np.exp(-g * np.log(ratio)) - 1.0

    def gradient_all(y, x, beta):
        ratio, ret = y[:, 0], y[:, 1]
        _check_positive(ratio, ret)
        b, g = beta
        log_ratio = np.log(ratio)
        core = ret * np.exp(-g * log_ratio)
        return np.column_stack([core, -b * core * log_ratio])

    box = np.array(
        [
            [discount_bounds[0], discount_bounds[1]],
            [curvature_bounds[0], curvature_bounds[1]],
        ]
    )
    return ResidualModel(
        dim_beta=2,
        evaluate=evaluate,
        gradient=gradient,
        parameter_box=box,
        evaluate_all=evaluate_all,
        gradient_all=gradient_all,
        default_start=np.array([0.99, 5.0]),
        name="euler",
    )


def load_column_roles(path) -> dict:
    """Read a sidecar TOML file mapping column names to roles.

    Recognized keys: ``outcome`` (string), ``endogenous``, ``exogenous``,
    ``instruments`` (lists of strings), and ``add_constant`` (bool, default
    true).
    """
    try:
        import tomllib  # Python 3.11+
    except ModuleNotFoundError:  # pragma: no cover - version dependent
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return raw


def load_dataset_csv(
    csv_path,
    roles: Mapping,
) -> tuple[Dataset, ResidualModel]:
    """Build a dataset and matching linear residual model from a CSV file.

    The CSV must have a header row.  ``roles`` maps column names to roles:
    ``outcome`` names the outcome column, ``endogenous`` and ``exogenous``
    list regressor columns, ``instruments`` lists excluded instruments, and
    ``add_constant`` (default True) prepends an intercept to both the
    exogenous block and the instruments.
    """
    csv_path = Path(csv_path)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader if r and not r[0].lstrip().startswith("#")]
    if len(rows) < 2:
        raise ValueError(f"{csv_path} has no data rows")
    header = [h.strip() for h in rows[0]]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise ValueError(f"non-numeric value in {csv_path}: {exc}") from None

    def col(name: str) -> np.ndarray:
        try:
            return data[:, header.index(name)]
        except ValueError:
            raise KeyError(f"column {name!r} not found in {csv_path}") from None

    outcome = str(roles["outcome"])
    endog = [str(c) for c in roles.get("endogenous", [])]
    exog = [str(c) for c in roles.get("exogenous", [])]
    instruments = [str(c) for c in roles.get("instruments", [])]
    add_constant = bool(roles.get("add_constant", True))

    n = data.shape[0]
    y_cols = [col(outcome)] + [col(c) for c in endog]
    x_cols = [col(c) for c in exog]
    z_cols = [col(c) for c in exog] + [col(c) for c in instruments]
    if add_constant:
        ones = np.ones(n)
        x_cols = [ones] + x_cols
        z_cols = [ones] + z_cols
    if not z_cols:
        raise ValueError("no instrument columns specified")
    y = np.column_stack(y_cols)
    x = np.column_stack(x_cols) if x_cols else np.empty((n, 0))
    z = np.column_stack(z_cols)
    dataset = Dataset(y, x, z, x_cols_in_z=tuple(range(x.shape[1])))
    model = linear_residual_model(
        outcome_col=0,
        endog_cols=tuple(range(1, 1 + len(endog))),
        exog_cols=tuple(range(x.shape[1])),
    )
    return dataset, model
