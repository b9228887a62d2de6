"""Uncertainty evaluation: RMSE, marginal Gaussian NLL, chi-squared statistic,
hyperparameter calibration by log-grid search, and autoregressive rollouts.

All metrics are means over points and channels (per-point values), so numbers
are comparable across resolutions.  Reported results average these per-pair
values over the test pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Trajectory
from .field import Field

__all__ = [
    "MetricRecord",
    "CalibrationResult",
    "rmse",
    "marginal_nll",
    "chi2",
    "calibrate",
    "rollout",
    "STD_FLOOR",
]

# floor applied to empirical ensemble stds before likelihood evaluation, so a
# degenerate member set cannot produce infinite NLL
STD_FLOOR = 1e-12


@dataclass(frozen=True)
class MetricRecord:
    method: str
    dataset: str
    rmse: float
    chi2: float
    nll: float
    n_pairs: int

    def __post_init__(self):
        if self.rmse < 0 or self.chi2 < 0:
            raise ValueError("rmse and chi2 must be nonnegative")


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Field) else np.asarray(x, dtype=np.float64)


def rmse(pred_mean, target) -> float:
    """Root mean squared residual over all channels and points."""
    mu, y = _values(pred_mean), _values(target)
    if mu.shape != y.shape:
        raise ValueError("prediction/target shape mismatch")
    return float(np.sqrt(np.mean((y - mu) ** 2)))


def marginal_nll(pred_mean, pred_std, target) -> float:
    """Mean per-point Gaussian negative log-likelihood.

    ``0.5 log(2 pi sigma^2) + (y - mu)^2 / (2 sigma^2)`` averaged over points;
    raises on nonpositive standard deviations.
    """
    mu, sd, y = _values(pred_mean), _values(pred_std), _values(target)
    if mu.shape != y.shape or sd.shape != y.shape:
        raise ValueError("shape mismatch")
    if np.any(sd <= 0):
        raise ValueError("standard deviations must be positive")
    return float(
        np.mean(0.5 * np.log(2.0 * np.pi * sd**2) + (y - mu) ** 2 / (2.0 * sd**2))
    )


def chi2(pred_mean, pred_std, target) -> float:
    """Mean squared residual normalized by the predicted variance (1 = calibrated)."""
    mu, sd, y = _values(pred_mean), _values(pred_std), _values(target)
    if mu.shape != y.shape or sd.shape != y.shape:
        raise ValueError("shape mismatch")
    if np.any(sd <= 0):
        raise ValueError("standard deviations must be positive")
    return float(np.mean((y - mu) ** 2 / sd**2))


@dataclass(frozen=True)
class CalibrationResult:
    best: float
    grid: np.ndarray
    curve: np.ndarray

    def __post_init__(self):
        idx = int(np.nanargmin(self.curve))
        if self.curve[idx] != np.nanmin(self.curve):
            raise ValueError("best value must attain the curve minimum")


def calibrate(
    nll_of_hyper, grid_center: float, n_points: int = 500, span_decades: float = 3.0
) -> CalibrationResult:
    """Minimize the validation NLL over a log-spaced hyperparameter grid.

    The grid has ``n_points`` values spanning ``span_decades`` decades on each
    side of ``grid_center`` (constant consecutive ratios).  Deterministic; an
    all-NaN curve is an error.
    """
    if grid_center <= 0:
        raise ValueError("grid_center must be positive")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if n_points == 1:
        grid = np.array([grid_center])
    else:
        grid = np.geomspace(
            grid_center * 10.0 ** (-span_decades),
            grid_center * 10.0 ** (span_decades),
            n_points,
        )
    curve = np.array([nll_of_hyper(val) for val in grid], dtype=np.float64)
    if np.all(np.isnan(curve)):
        raise ValueError("calibration curve is entirely NaN")
    best = float(grid[np.nanargmin(curve)])
    return CalibrationResult(best=best, grid=grid, curve=curve)


def rollout(
    predict,
    trajectory: Trajectory,
    window: int,
    n_steps: int | None = None,
) -> tuple[np.ndarray, list[dict]]:
    """Autoregressive next-step rollout feeding the mean prediction back.

    ``predict`` maps an input Field (window frames plus any auxiliary channels)
    to ``(mean Field, std Field or None)``.  Auxiliary channels are held fixed
    throughout.  Returns the predicted frames ``(n_steps, c_sol, *shape)`` and
    one record per step with rmse (and nll / chi2 when a std is supplied)
    against the ground-truth trajectory.
    """
    if n_steps is None:
        n_steps = trajectory.n_frames - window
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if trajectory.n_frames < window + n_steps:
        raise ValueError("trajectory too short for the requested rollout")
    grid = trajectory.grid
    buf = trajectory.frames[:window].copy()  # (window, c_sol, *shape)
    preds = np.empty((n_steps, trajectory.sol_channels) + grid.shape)
    records = []
    for step in range(n_steps):
        stacked = buf.reshape((-1,) + grid.shape)
        if trajectory.aux is not None:
            stacked = np.concatenate([stacked, trajectory.aux], axis=0)
        mean, std = predict(Field(grid, stacked))
        if np.abs(mean.values).max() > 1e6:
            raise RuntimeError(f"rollout blew up at step {step}")
        truth = trajectory.frames[window + step]
        record = {"step": step, "rmse": rmse(mean.values, truth)}
        if std is not None:
            sd = np.maximum(std.values, STD_FLOOR)
            record["nll"] = marginal_nll(mean.values, sd, truth)
            record["chi2"] = chi2(mean.values, sd, truth)
        records.append(record)
        preds[step] = mean.values
        buf = np.concatenate([buf[1:], mean.values[None]], axis=0)
    return preds, records
