"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, no_grad
from .errors import EvaluationError


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_grad():
        value = f().item()
    if not np.isfinite(value):
        raise EvaluationError("objective is not finite")
    return value


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _evaluate(f)
        flat[i] = orig - h
        fm = _evaluate(f)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(param.shape)


def grad_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6
) -> float:
    """Largest relative error between analytic and numeric gradients.

    ``f`` rebuilds the scalar objective from the current values of
    ``params`` each time it is called.  For every parameter tensor the error
    is ``||a - n|| / max(1e-8, ||a|| + ||n||)`` with ``a`` the backprop
    gradient and ``n`` the central difference at step ``h``; the maximum
    over tensors is returned.
    """
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.item()):
        raise EvaluationError("objective is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(f, p, h)
        num = float(np.linalg.norm(analytic - numeric))
        den = max(1e-8, float(np.linalg.norm(analytic) + np.linalg.norm(numeric)))
        worst = max(worst, num / den)
    return worst
