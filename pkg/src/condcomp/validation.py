"""Input validation helpers for the estimator facade."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError


def check_token_array(X, n_tokens: int | None = None,
                      dim: int | None = None) -> np.ndarray:
    """Validate a (n_samples, n_tokens, dim) float array of token sets."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(
            f"expected token sets of shape (n_samples, n_tokens, dim), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("need at least one sample")
    if not np.all(np.isfinite(X)):
        raise ValueError("token array contains non-finite values")
    if n_tokens is not None and X.shape[1] != n_tokens:
        raise ValueError(f"expected {n_tokens} tokens per sample, got {X.shape[1]}")
    if dim is not None and X.shape[2] != dim:
        raise ValueError(f"expected token dimension {dim}, got {X.shape[2]}")
    return X


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"expected {n_samples} labels, got array of shape {y.shape}")
    return y


def check_fitted(estimator, attribute: str = "model_") -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first")
