"""Parameter-space losses: translation MAE, rotation MSE, and their blend.

Translation errors enter through the mean absolute error and rotation errors
through the mean squared error; the combined objective is
``mu * mse(rotation) + mae(translation)`` with a non-negative empirical
weight mu (default 1.0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParamLossConfig:
    """Weight of the squared-error (rotation) term; mu >= 0."""

    mu: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.mu) or self.mu < 0:
            raise ValueError(f"mu must be a non-negative finite number, got {self.mu}")


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("empty vectors")
    return pred, truth


def mse(pred, truth) -> float:
    """Mean of squared componentwise differences."""
    pred, truth = _check_pair(pred, truth)
    diff = pred - truth
    return float(np.mean(diff * diff))


def mae(pred, truth) -> float:
    """Mean of absolute componentwise differences."""
    pred, truth = _check_pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def composite(pred_trans, truth_trans, pred_rot, truth_rot, cfg: ParamLossConfig = ParamLossConfig()) -> float:
    """mu * mse(rotation) + mae(translation)."""
    return cfg.mu * mse(pred_rot, truth_rot) + mae(pred_trans, truth_trans)


def mse_grad(pred, truth) -> np.ndarray:
    """d(mse)/d(pred) = 2 (pred - truth) / n."""
    pred, truth = _check_pair(pred, truth)
    return 2.0 * (pred - truth) / pred.size


def mae_grad(pred, truth) -> np.ndarray:
    """d(mae)/d(pred) = sign(pred - truth) / n, with sign(0) taken as 0."""
    pred, truth = _check_pair(pred, truth)
    return np.sign(pred - truth) / pred.size


def composite_grad(
    pred_trans, truth_trans, pred_rot, truth_rot, cfg: ParamLossConfig = ParamLossConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the composite loss w.r.t. (pred_trans, pred_rot)."""
    d_trans = mae_grad(pred_trans, truth_trans)
    d_rot = cfg.mu * mse_grad(pred_rot, truth_rot)
    return d_trans, d_rot
