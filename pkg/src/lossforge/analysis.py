"""Binary-reduction landscape analysis of classification losses.

For two classes a loss becomes a function of ``p = y_pred[0]`` once
``y_pred = (p, 1 - p)`` and ``y_real = (r, 1 - r)``.  Sampling that function
over ``p`` in [0, 1] shows whether a loss keeps rewarding confidence
(monotone) or has an interior minimum.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .expr import EvaluationError
from .losses import LossFn

MONO_TOL = 1e-9
NEAR_ONE_TOL = 1e-6

SHAPES = ("monotone-decreasing", "monotone-increasing", "interior-minimum", "other")


def _points(p, r):
    p = np.asarray(p, dtype=float)
    y_pred = np.stack([p, 1.0 - p], axis=-1)
    y_real = np.broadcast_to(np.array([r, 1.0 - r], dtype=float), y_pred.shape)
    return y_pred, y_real


def binary_reduce(loss: LossFn) -> Callable:
    """``g(p, r)``: the loss at y_pred = (p, 1-p), y_real = (r, 1-r).

    ``p`` may be a scalar or an array.
    """
    def g(p, r):
        return loss.value(*_points(p, r))
    return g


def binary_reduce_grad(loss: LossFn) -> Callable:
    """``dg/dp`` through y_pred[1] = 1 - p."""
    def dg(p, r):
        d = loss.grad(*_points(p, r))
        out = d[..., 0] - d[..., 1]
        return float(out) if np.ndim(out) == 0 else out
    return dg


@dataclass
class LandscapeCurve:
    y_real_fixed: int
    grid: np.ndarray
    values: np.ndarray
    gradient_values: np.ndarray
    loss_name: str = ""
    fn: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if not len(self.grid) == len(self.values) == len(self.gradient_values):
            raise ValueError("grid, values and gradient_values differ in length")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["y_pred0", "value", "gradient"])
        for row in zip(self.grid, self.values, self.gradient_values):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


@dataclass(frozen=True)
class LandscapeReport:
    argmin: float
    min_value: float
    shape: str
    increase_near_1: bool
    loss_name: str = ""
    y_real_fixed: int = 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def sample_landscape(loss: LossFn, y_real_fixed: int = 1, grid_step: float = 1e-3
                     ) -> LandscapeCurve:
    if not 0 < grid_step <= 0.5:
        raise ValueError("grid_step must be in (0, 0.5]")
    if y_real_fixed not in (0, 1):
        raise ValueError("y_real_fixed must be 0 or 1")
    grid = np.linspace(0.0, 1.0, int(round(1.0 / grid_step)) + 1)
    g, dg = binary_reduce(loss), binary_reduce_grad(loss)
    try:
        values = np.asarray(g(grid, y_real_fixed))
        grads = np.asarray(dg(grid, y_real_fixed))
    except EvaluationError as err:
        bad = _first_bad_point(g, dg, grid, y_real_fixed)
        raise EvaluationError(f"{err} at y_pred0={bad}", err.class_index) from err
    return LandscapeCurve(y_real_fixed, grid, values, grads, loss.name,
                          fn=lambda p: float(g(p, y_real_fixed)))


def _first_bad_point(g, dg, grid, r):
    for p in grid:
        try:
            g(p, r)
            dg(p, r)
        except EvaluationError:
            return float(p)
    return None


def classify(values: np.ndarray, tol: float = MONO_TOL) -> str:
    """Shape from the sign pattern of discrete differences (|d| <= tol is flat)."""
    d = np.diff(values)
    signs = np.where(d > tol, 1, np.where(d < -tol, -1, 0))
    s = signs[signs != 0]
    if len(s) == 0:
        return "other"
    if np.all(s < 0):
        return "monotone-decreasing"
    if np.all(s > 0):
        return "monotone-increasing"
    # one sign change, from decreasing to increasing
    changes = np.flatnonzero(np.diff(s))
    if len(changes) == 1 and s[0] < 0:
        return "interior-minimum"
    return "other"


def analyze(curve: LandscapeCurve, tol: float = 1e-6) -> LandscapeReport:
    """Locate the minimum (grid scan, then golden-section refinement on the
    bracketing interval when the curve carries its function) and classify
    the landscape."""
    if len(curve.grid) < 3:
        raise ValueError("curve needs at least 3 points")
    grid, values = curve.grid, curve.values
    k = int(np.argmin(values))
    x_min, f_min = float(grid[k]), float(values[k])
    if curve.fn is not None and 0 < k < len(grid) - 1:
        a, b, c = grid[k - 1], grid[k], grid[k + 1]
        if values[k] < values[k - 1] and values[k] < values[k + 1]:
            res = optimize.minimize_scalar(curve.fn, bracket=(a, b, c), method="golden",
                                           tol=tol)
            if a <= res.x <= c and res.fun <= f_min:
                x_min, f_min = float(res.x), float(res.fun)
    return LandscapeReport(
        argmin=x_min,
        min_value=f_min,
        shape=classify(values),
        increase_near_1=bool(values[-1] > f_min + NEAR_ONE_TOL),
        loss_name=curve.loss_name,
        y_real_fixed=curve.y_real_fixed,
    )
