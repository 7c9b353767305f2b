"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: str = ""
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    """``|a - n| / max(|a|, |n|, floor)``.

    Central differences carry ~1e-11 of round-off at h = 1e-5, so gradients far below
    ``floor`` are judged by absolute error (scaled by ``1 / floor``) instead.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn: Callable[[], float], params: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
               n_samples: int | None = 20, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` recomputes the scalar loss from the current contents of the
    arrays in ``params`` (perturbed in place and restored). Up to
    ``n_samples`` coordinates per parameter are probed, all if ``None``.
    The step is ``1e-5 * max(1, |theta|)``.
    """
    rng = rng or np.random.default_rng(0)
    worst_err, worst_name, count = 0.0, "", 0
    per_param = {}
    for name, p in params.items():
        g = analytic[name]
        flat = p.reshape(-1)
        if n_samples is None or n_samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=n_samples, replace=False)
        perr = 0.0
        for j in idx:
            old = flat[j]
            h = 1e-5 * max(1.0, abs(old))
            flat[j] = old + h
            lp = loss_fn()
            flat[j] = old - h
            lm = loss_fn()
            flat[j] = old
            num = (lp - lm) / (2 * h)
            err = relative_error(float(g.reshape(-1)[j]), num)
            perr = max(perr, err)
            count += 1
            if err > worst_err:
                worst_err, worst_name = err, f"{name}[{j}]"
        per_param[name] = perr
    return GradCheckReport(worst_err, count, worst_name, per_param)


def check_module(module, forward: Callable[[], np.ndarray], backward: Callable[[np.ndarray], object],
                 n_samples: int | None = 20, seed: int = 0, inputs: dict[str, np.ndarray] | None = None,
                 input_grads: Callable[[], dict[str, np.ndarray]] | None = None) -> GradCheckReport:
    """Gradient-check a module against the loss ``sum(R * forward())``.

    ``R`` is a fixed random projection so every output contributes. Extra
    ``inputs`` (e.g. the input tensor) can be checked alongside parameters;
    ``input_grads`` must then return their analytic gradients after backward.
    """
    rng = np.random.default_rng(seed)
    out = forward()
    R = rng.standard_normal(out.shape)
    module.zero_grad()
    backward(R)
    analytic = {name: g.copy() for name, _, g in module.named_parameters()}
    params = {name: p for name, p, _ in module.named_parameters()}
    if inputs:
        params.update(inputs)
        analytic.update({k: v.copy() for k, v in input_grads().items()})
    return grad_check(lambda: float((R * forward()).sum()), params, analytic, n_samples, rng)
