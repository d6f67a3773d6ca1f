"""Evaluation metrics and plain (non-traced) loss values.

The mean absolute constraint violation averages, per point and per constraint
row, |differential residual| + |equality residual| + max(inequality, 0).  For
the projected model the differential rows are evaluated with the projected
derivative variables; the unprojected baselines use the network's own
propagated derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kkt import ConstraintSet, smallest_signed_violation
from .symbolic import Bindings


@dataclass
class Metrics:
    mse_data: float
    rmse: float
    abs_violation: Optional[float]
    mse_derivative: Optional[float] = None
    nonconverged_fraction: float = 0.0

    def as_dict(self):
        return {
            "mse_data": self.mse_data,
            "rmse": self.rmse,
            "abs_violation": self.abs_violation,
            "mse_derivative": self.mse_derivative,
            "nonconverged_fraction": self.nonconverged_fraction,
        }


def loss_mlp(predictions, targets) -> float:
    """MSE over batch and outputs."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    return float(np.mean((p - t) ** 2))


def loss_pinn(
    predictions,
    ad_derivatives,
    targets,
    constraints: ConstraintSet,
    weight: float,
    inputs=None,
    params=None,
) -> float:
    """MSE(data) + weight * mean squared constraint residual (inequalities
    enter through a squared positive part)."""
    data = loss_mlp(predictions, targets)
    res = _constraint_residuals(constraints, inputs, predictions, ad_derivatives, params)
    if not res:
        return data
    total, count = 0.0, 0
    nd, ne = constraints.n_diff, constraints.n_eq
    for i, r in enumerate(res):
        r = np.atleast_1d(np.asarray(r, dtype=np.float64))
        if i >= nd + ne:
            r = np.maximum(r, 0.0)
        total += float(np.sum(r * r))
        count += r.size
    return data + weight * total / count


def loss_daehn(projected, ad_derivatives, targets, omega: float) -> float:
    """MSE(y_proj, targets) + omega * MSE(d_proj, propagated derivatives)."""
    data = loss_mlp(projected.y_proj, targets)
    d_proj = np.asarray(projected.d_proj, dtype=np.float64)
    if d_proj.size == 0:
        return data
    ad = np.asarray(ad_derivatives, dtype=np.float64)
    return data + omega * float(np.mean((d_proj - ad) ** 2))


def _constraint_residuals(constraints, inputs, outputs, derivs, params):
    if not constraints.all_rows():
        return []
    out = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    b = Bindings(
        inputs=None if inputs is None else list(np.atleast_2d(inputs).T),
        outputs=list(out.T),
        derivs=None if derivs is None else list(np.atleast_2d(derivs).T),
        params=params or {},
    )
    return smallest_signed_violation(constraints, b)


def mean_abs_violation(
    constraints: ConstraintSet, inputs, outputs, derivs, params=None
) -> Optional[float]:
    """(1 / (N m)) sum over points of sum |U| + sum |h| + sum max(g, 0)."""
    res = _constraint_residuals(constraints, inputs, outputs, derivs, params)
    m = len(res)
    if m == 0:
        return None
    nd, ne = constraints.n_diff, constraints.n_eq
    N = np.atleast_2d(outputs).shape[0]
    total = 0.0
    for i, r in enumerate(res):
        r = np.broadcast_to(np.asarray(r, dtype=np.float64), (N,))
        total += float(np.sum(np.maximum(r, 0.0) if i >= nd + ne else np.abs(r)))
    return total / (N * m)


def data_metrics(y_pred, targets) -> tuple[float, float]:
    mse = loss_mlp(y_pred, targets)
    return mse, float(np.sqrt(mse))
