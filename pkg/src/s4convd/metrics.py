"""Regression metrics for meter forecasts."""
from __future__ import annotations

import numpy as np

from .core import ValidationError


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise ValidationError(f"length mismatch: {pred.shape[0]} predictions vs {actual.shape[0]} actuals")
    if pred.size == 0:
        raise ValidationError("metric of empty arrays is undefined")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(actual))):
        raise ValidationError("metric inputs must be finite")
    return pred, actual


def rmsle(pred, actual) -> float:
    """Root mean squared error of natural log(x + 1); inputs must be non-negative."""
    pred, actual = _pair(pred, actual)
    if np.any(pred < 0) or np.any(actual < 0):
        raise ValidationError("RMSLE is defined for non-negative values only; clamp predictions first")
    diff = np.log1p(pred) - np.log1p(actual)
    return float(np.sqrt(np.mean(diff * diff)))


def rmse(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    diff = pred - actual
    return float(np.sqrt(np.mean(diff * diff)))
