"""Conditional-computation toolkit on a minimal reverse-mode autodiff core.

Trainable mechanisms for dynamically sparse networks (gumbel sampling,
mixture-of-experts routing and layers, early exits, token drop/merge)
plus an analytic MAC accounting harness and an sklearn-style classifier
facade.
"""

from .tensor import Tensor, MacMeter, apply_op, backward, set_debug_checks
from .gradcheck import GradCheckResult, gradient_check, param_gradient_check
from .estimators import ConditionalTransformerClassifier

__all__ = [
    "Tensor",
    "MacMeter",
    "apply_op",
    "backward",
    "set_debug_checks",
    "GradCheckResult",
    "gradient_check",
    "param_gradient_check",
    "ConditionalTransformerClassifier",
]

__version__ = "0.1.0"
