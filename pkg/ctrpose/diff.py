"""
Module: diff.py
Description:
    Reverse-mode gradient contract for the pipeline: every differentiable stage returns a
    VjpNode (value + vector-Jacobian product), and fd_check compares analytic gradients
    against central finite differences.

Usage:
    Imported by other modules; not intended to be executed directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from ctrpose.errors import NonFiniteError

DEFAULT_STEP = 1e-5


@dataclass(frozen=True, eq=False)
class VjpNode:
    """Forward value of a stage and the pullback of an output cotangent to its input."""

    value: Any
    vjp: Callable[[Any], Any]

    def pullback(self, cotangent):
        return self.vjp(cotangent)


def chain_vjps(*vjps: Callable[[Any], Any]) -> Callable[[Any], Any]:
    """
    Compose stage pullbacks given in forward order into the pullback of the whole pipeline.
    The returned function applies them last-to-first.
    """

    def composed(cotangent):
        for vjp in reversed(vjps):
            cotangent = vjp(cotangent)
        return cotangent

    return composed


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float).ravel()
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        plus, minus = float(f(x + step)), float(f(x - step))
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (plus - minus) / (2.0 * h)
    return grad


def fd_check(
    f: Callable[[np.ndarray], float], x, analytic_grad, h: float = DEFAULT_STEP
) -> float:
    """max_i |fd_i - g_i| / max(1, |g_i|)."""
    analytic_grad = np.asarray(analytic_grad, dtype=float).ravel()
    if not np.all(np.isfinite(analytic_grad)):
        raise NonFiniteError("analytic gradient is not finite")
    numeric = fd_gradient(f, x, h)
    if numeric.size == 0:
        return 0.0
    err = np.abs(numeric - analytic_grad) / np.maximum(1.0, np.abs(analytic_grad))
    return float(np.max(err))


@dataclass(frozen=True)
class GradcheckResult:
    stage: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tolerance)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "max_rel_err": self.max_rel_err,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }
