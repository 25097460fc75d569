"""Composite objective: ``lambda * L_act + L_br``.

``L_br`` is a weighted binary cross entropy on per-snippet boundary
membership probabilities. ``L_act`` is a weighted, positive-reweighted BCE on
raw class logits evaluated in log-sum-exp form. Both are means over their
indexed terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError

DEFAULT_LAMBDA = 128.0


@dataclass
class LossWeights:
    lam: float = DEFAULT_LAMBDA
    pos_class_weight: np.ndarray | None = None  # (C,)
    snippet_weight: np.ndarray | None = None  # (N,)
    class_weight: np.ndarray | None = None  # (N, C)

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ConfigError(f"lambda must be positive and finite, got {self.lam}")
        for name in ("pos_class_weight", "snippet_weight", "class_weight"):
            w = getattr(self, name)
            if w is not None:
                w = np.asarray(w, dtype=np.float64)
                if not (np.all(np.isfinite(w)) and np.all(w > 0)):
                    raise ConfigError(f"{name} must be positive and finite")
                setattr(self, name, w)


def br_loss(y_br, y_hat_br, w=None):
    """Weighted BCE on probabilities. Returns ``(loss, d loss / d y_hat)``."""
    y = np.asarray(y_br, dtype=np.float64)
    p = np.asarray(y_hat_br, dtype=np.float64)
    if y.shape != p.shape:
        raise DimensionError(f"boundary target shape {y.shape} != prediction shape {p.shape}")
    w = np.ones_like(y) if w is None else np.broadcast_to(np.asarray(w, dtype=np.float64), y.shape)
    n = y.size
    loss = -np.sum(w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))) / n
    grad = -w * (y / p - (1.0 - y) / (1.0 - p)) / n
    return float(loss), grad


def _softplus(x):
    return np.logaddexp(0.0, x)


def act_loss(y_s, logits, pos_weight=None, w=None):
    """BCE-with-logits with per-class positive weight. Returns ``(loss, d loss / d logits)``.

    Per element: ``(1 - y) x + (p y + 1 - y) softplus(-x)``, which equals
    ``-[p y log s(x) + (1 - y) log(1 - s(x))]`` without overflow.
    """
    y = np.asarray(y_s, dtype=np.float64)
    x = np.asarray(logits, dtype=np.float64)
    if y.shape != x.shape:
        raise DimensionError(f"class target shape {y.shape} != logit shape {x.shape}")
    pc = 1.0 if pos_weight is None else np.asarray(pos_weight, dtype=np.float64)
    w = 1.0 if w is None else np.asarray(w, dtype=np.float64)
    coef = pc * y + 1.0 - y
    n = y.size
    loss = np.sum(w * ((1.0 - y) * x + coef * _softplus(-x))) / n
    grad = w * ((1.0 - y) - coef * expit(-x)) / n
    return float(loss), grad


def total_loss(act: float, br: float, weights: LossWeights | None = None) -> float:
    lam = DEFAULT_LAMBDA if weights is None else weights.lam
    return lam * act + br
