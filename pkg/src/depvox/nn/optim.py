"""Adam with bias correction."""

from __future__ import annotations

from typing import Iterable

import numpy as np


class Adam:
    """Bias-corrected Adam over (name, param, grad) triples.

    Parameters are updated in place. ``grad_scale`` maps a parameter name to
    a multiplier applied to its gradient before the moment updates.
    """

    def __init__(self, named_params: Iterable[tuple[str, np.ndarray, np.ndarray]], lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8,
                 grad_scale: dict[str, float] | None = None):
        self.entries = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.grad_scale = grad_scale or {}
        self.m = [np.zeros_like(p) for _, p, _ in self.entries]
        self.v = [np.zeros_like(p) for _, p, _ in self.entries]
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for (name, p, g), m, v in zip(self.entries, self.m, self.v):
            scale = self.grad_scale.get(name)
            if scale is not None:
                g = g * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_grad_norm(named_params: Iterable[tuple[str, np.ndarray, np.ndarray]], max_norm: float) -> float:
    entries = list(named_params)
    total = float(np.sqrt(sum(float((g * g).sum()) for _, _, g in entries)))
    if max_norm > 0 and total > max_norm:
        for _, _, g in entries:
            g *= max_norm / total
    return total
