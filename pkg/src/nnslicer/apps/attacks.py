"""Gradient-based adversarial input generation (FGSM and PGD).

Inputs live in [0, 1]; outputs are clipped there and stay inside the
L-infinity eps-ball of the original sample.
"""

from __future__ import annotations

import numpy as np

from .. import engine
from ..modelir import ModelGraph


def _input_grad(m: ModelGraph, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    _, _, dx = engine.loss_and_gradients(m, x, labels)
    return dx


def fgsm(m: ModelGraph, xi: np.ndarray, label, eps: float) -> np.ndarray:
    """xi' = clip(xi + eps * sign(grad_x loss), 0, 1)."""
    out = fgsm_batch(m, xi[None], np.asarray([label]), eps)
    return out[0]


def fgsm_batch(m: ModelGraph, xs: np.ndarray, labels: np.ndarray, eps: float) -> np.ndarray:
    if eps < 0:
        raise ValueError(f"eps {eps} must be >= 0")
    g = _input_grad(m, xs, labels)
    adv = np.clip(xs + np.float32(eps) * np.sign(g, dtype=np.float32), 0.0, 1.0)
    return np.clip(adv, xs - eps, xs + eps).astype(np.float32)


def pgd(m: ModelGraph, xi: np.ndarray, label, eps: float, alpha: float, iters: int, seed: int = 0) -> np.ndarray:
    """Projected gradient descent with a random start inside the eps-ball."""
    out = pgd_batch(m, xi[None], np.asarray([label]), eps, alpha, iters, seed)
    return out[0]


def pgd_batch(
    m: ModelGraph,
    xs: np.ndarray,
    labels: np.ndarray,
    eps: float,
    alpha: float,
    iters: int,
    seed: int = 0,
) -> np.ndarray:
    if eps < 0:
        raise ValueError(f"eps {eps} must be >= 0")
    rng = np.random.default_rng(seed)
    x = xs + rng.uniform(-eps, eps, size=xs.shape).astype(np.float32)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    for _ in range(iters):
        g = _input_grad(m, x, labels)
        x = x + np.float32(alpha) * np.sign(g, dtype=np.float32)
        x = np.clip(x, xs - eps, xs + eps)
        x = np.clip(x, 0.0, 1.0).astype(np.float32)
    return x
