"""Central finite-difference checks against the tape's analytic gradients.

ReLU and max make the networks here piecewise smooth. A central difference
whose +h/-h evaluations land on different pieces than the base point measures
a blend of slopes and disagrees with the (correct) analytic gradient by an
amount proportional to h. With ``freeze_kinks=True`` the piecewise choices made
at the base point are replayed at the perturbed points, so the difference is
taken on the smooth piece the analytic gradient belongs to. Where no choice
would have changed, the result is bit-identical to the plain difference; the
number of choices that would have changed is reported as ``flips``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad, record_selections, replay_selections, zero_grad

DEFAULT_H = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


@dataclass
class NumericGrad:
    grad: np.ndarray
    flips: int = 0


def numeric_grad(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    h: float = DEFAULT_H,
    freeze_kinks: bool = False,
) -> NumericGrad:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``param``.

    ``param.data`` is perturbed in place and restored exactly afterwards.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    flips = 0
    with no_grad():
        if freeze_kinks:
            with record_selections() as pattern:
                loss_fn()

        def evaluate():
            nonlocal flips
            if not freeze_kinks:
                return loss_fn().item()
            with replay_selections(pattern):
                value = loss_fn().item()
            flips += pattern.flips
            pattern.flips = 0
            return value

        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = evaluate()
            flat[i] = orig - h
            down = evaluate()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
    return NumericGrad(grad, flips)


@dataclass
class GradCheckResult:
    errors: dict[str, float]
    flips: dict[str, int]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = DEFAULT_H,
    freeze_kinks: bool = False,
) -> GradCheckResult:
    """Max relative error per named parameter.

    The error measure is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    zero_grad(params.values())
    loss_fn().backward()
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for name, p in params.items()}
    zero_grad(params.values())
    errors, flips = {}, {}
    for name, p in params.items():
        numeric = numeric_grad(loss_fn, p, h, freeze_kinks)
        errors[name] = float(relative_error(analytic[name], numeric.grad).max(initial=0.0))
        flips[name] = numeric.flips
    return GradCheckResult(errors, flips)
