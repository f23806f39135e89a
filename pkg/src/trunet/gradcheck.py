"""Central finite-difference verification of backward rules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_index: tuple | None = None
    analytic: float = 0.0
    numeric: float = 0.0


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                     indices: Optional[np.ndarray] = None) -> np.ndarray:
    """(f(x + eps e_i) - f(x - eps e_i)) / (2 eps) at the flat ``indices`` of ``x``
    (every element by default); unvisited entries stay 0."""
    base = x.data
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    visit = range(flat.size) if indices is None else indices
    with no_grad():
        for i in visit:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      tol: float = 1e-4, max_entries: Optional[int] = None,
                      seed: int = 0) -> GradCheckReport:
    """Compare backward() gradients of scalar ``f`` at ``x`` with central differences.

    ``x`` should hold float64 data; it is perturbed in place and restored.
    With ``max_entries`` only that many randomly chosen elements are compared.
    """
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = np.asarray(x.grad, dtype=np.float64).copy()
    x.grad = None
    indices = None
    if max_entries is not None and max_entries < x.data.size:
        indices = np.random.default_rng(seed).choice(x.data.size, size=max_entries, replace=False)
    numeric = numeric_gradient(f, x, eps, indices)
    err = relative_error(analytic, numeric)
    if indices is not None:
        mask = np.zeros(err.size, dtype=bool)
        mask[indices] = True
        err = np.where(mask.reshape(err.shape), err, 0.0)
    if err.size == 0:
        return GradCheckReport(0.0, True)
    worst = np.unravel_index(int(np.argmax(err)), err.shape)
    max_err = float(err[worst])
    return GradCheckReport(max_err, bool(max_err <= tol), tuple(int(i) for i in worst),
                           float(analytic[worst]), float(numeric[worst]))
