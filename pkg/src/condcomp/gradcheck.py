"""Central-difference gradient checking against the reverse-mode path."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_index: tuple | None
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def _numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    base = x.reshape(-1)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + h
        hi = f(Tensor(x)).item()
        base[i] = orig - h
        lo = f(Tensor(x)).item()
        base[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor,
                   h: float = 1e-6, tol: float = 1e-4) -> GradCheckResult:
    """Compare reverse-mode d f / d x with central finite differences.

    ``f`` must be scalar-valued, smooth at ``x``, and deterministic (freeze
    any sampling noise before calling). Relative error per component is
    |a - b| / max(1, |a|, |b|).
    """
    if h <= 0:
        raise ValueError("gradient_check: h must be positive")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError("gradient_check: f must be scalar-valued")
    if out.node is not None and out.requires_grad:
        backward(out)
    analytic = (leaf.grad.copy() if leaf.grad is not None
                else np.zeros_like(leaf.data))
    numeric = _numeric_gradient(f, x.data.copy(), h)

    if not np.all(np.isfinite(analytic)):
        idx = tuple(np.argwhere(~np.isfinite(analytic))[0])
        return GradCheckResult(False, np.inf, idx, "non-finite analytic gradient")
    if not np.all(np.isfinite(numeric)):
        idx = tuple(np.argwhere(~np.isfinite(numeric))[0])
        return GradCheckResult(False, np.inf, idx, "non-finite numeric gradient")

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    max_rel = float(rel.reshape(-1)[worst])
    idx = tuple(np.unravel_index(worst, rel.shape)) if rel.size else None
    return GradCheckResult(max_rel <= tol, max_rel, idx)


def param_gradient_check(loss_fn: Callable[[], Tensor], param: Tensor,
                         h: float = 1e-6, tol: float = 1e-4) -> GradCheckResult:
    """Gradient-check a loss with respect to a live module parameter.

    ``loss_fn`` recomputes the scalar loss from scratch; ``param`` is the
    leaf tensor it reads. The parameter is perturbed in place for the
    numeric side and restored afterwards.
    """
    if h <= 0:
        raise ValueError("param_gradient_check: h must be positive")
    saved_grad = param.grad.copy() if param.grad is not None else None
    param.grad = None
    out = loss_fn()
    if out.size != 1:
        raise ValueError("param_gradient_check: loss must be scalar-valued")
    if out.node is not None and out.requires_grad:
        backward(out)
    analytic = (param.grad.copy() if param.grad is not None
                else np.zeros_like(param.data))

    numeric = np.zeros_like(param.data)
    flat_data = param.data.reshape(-1)
    flat_num = numeric.reshape(-1)
    for i in range(flat_data.size):
        orig = flat_data[i]
        flat_data[i] = orig + h
        hi = loss_fn().item()
        flat_data[i] = orig - h
        lo = loss_fn().item()
        flat_data[i] = orig
        flat_num[i] = (hi - lo) / (2.0 * h)

    param.grad = saved_grad
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    max_rel = float(rel.reshape(-1)[worst])
    idx = tuple(np.unravel_index(worst, rel.shape)) if rel.size else None
    return GradCheckResult(max_rel <= tol, max_rel, idx)
