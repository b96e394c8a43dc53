"""RMSProp with global-norm gradient clipping."""
from __future__ import annotations

import logging

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.

    Returns the applied scale factor (1.0 when no clipping happened).
    """
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        seen: set[int] = set()  # scale each distinct buffer once even if aliased
        for g in grads:
            if id(g) not in seen:
                g *= factor
                seen.add(id(g))
        return factor
    return 1.0


def global_norm(grads: list[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


class RmsProp:
    """acc <- alpha*acc + (1-alpha)*g^2;  p <- p - lr*g/(sqrt(acc)+eps)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, alpha: float = 0.99,
                 eps: float = 1e-5):
        self.params = list(params)
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.acc = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> bool:
        """Apply one update. Skips the whole step (and logs) on any
        non-finite gradient; missing gradients are treated as zero."""
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                log.warning("rmsprop: non-finite gradient, step skipped")
                return False
        for p, acc in zip(self.params, self.acc):
            g = p.grad if p.grad is not None else 0.0
            acc *= self.alpha
            acc += (1.0 - self.alpha) * np.square(g)
            p.data = p.data - self.lr * g / (np.sqrt(acc) + self.eps)
        return True

    def zero_grad(self):
        for p in self.params:
            p.grad = None
