"""Named parameter collections and the sgd/adam update rules."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParameterSet:
    """Uniquely named trainable tensors plus per-parameter adam moments."""

    def __init__(self, params: dict[str, Tensor]) -> None:
        self.params = dict(params)
        for name, p in self.params.items():
            if not p.requires_grad:
                raise ValueError(f"parameter {name!r} does not require grad")
            p.ensure_grad()
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._t = 0

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            arr = arrays.get(name)
            if arr is None:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"checkpoint shape {arr.shape} != {p.data.shape} for {name!r}")
            p.data[...] = arr


def sgd_step(params: ParameterSet, lr: float) -> None:
    if lr <= 0:
        raise ValueError("sgd: learning rate must be positive")
    for _, p in params:
        p.data -= lr * p.grad


def adam_step(params: ParameterSet, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    if lr <= 0:
        raise ValueError("adam: learning rate must be positive")
    params._t += 1
    t = params._t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params:
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad ** 2
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def optimizer_step(params: ParameterSet, lr: float, kind: str = "adam") -> None:
    if kind == "sgd":
        sgd_step(params, lr)
    elif kind == "adam":
        adam_step(params, lr)
    else:
        raise ValueError(f"unknown optimizer kind {kind!r}")
