"""Training losses with explicit VJPs."""

from __future__ import annotations

import numpy as np

# Probability clamp for the cross-entropy loss; keeps gradients bounded.
P_CLAMP = 1e-7


def bce_loss(probs, target):
    """Mean binary cross entropy; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(probs, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(target, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def bce_loss_vjp(probs, target, upstream=1.0):
    """Gradient w.r.t. probs; zero where the clamp is active."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    p = np.clip(probs, P_CLAMP, 1.0 - P_CLAMP)
    grad = (p - y) / (p * (1.0 - p)) / probs.size
    grad = np.where((probs > P_CLAMP) & (probs < 1.0 - P_CLAMP), grad, 0.0)
    return grad * upstream


def l1_depth_loss(pred, target, valid_mask):
    """Mean absolute depth error over valid pixels."""
    mask = np.asarray(valid_mask, dtype=bool)
    if not mask.any():
        raise ValueError("l1_depth_loss: empty valid mask")
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.abs(diff[mask]).mean())


def l1_depth_loss_vjp(pred, target, valid_mask, upstream=1.0):
    """Subgradient w.r.t. pred; zero at exact ties."""
    mask = np.asarray(valid_mask, dtype=bool)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    grad = np.where(mask, np.sign(diff) / mask.sum(), 0.0)
    return grad * upstream
