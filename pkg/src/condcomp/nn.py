"""Small building blocks (linear, MLP, layer norm) over the tensor engine."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

_ACTIVATIONS = {
    "gelu": T.gelu,
    "relu": T.relu,
    "identity": lambda x: x,
}


class Module:
    """Base with explicit parameter/child registration."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def param(self, name: str, value: Tensor) -> Tensor:
        self._params[name] = value
        return value

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + n: p for n, p in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(prefix + cname + "."))
        return out

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, scale: float | None = None) -> None:
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        s = scale if scale is not None else 1.0 / np.sqrt(d_in)
        self.W = self.param("W", Tensor(rng.normal(0.0, s, (d_in, d_out)),
                                        requires_grad=True))
        self.b = self.param("b", Tensor(np.zeros(d_out), requires_grad=True)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.W)
        if self.b is not None:
            y = T.add(y, self.b)
        return y


class MLP(Module):
    """Chain of linears with an activation between layers."""

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 activation: str = "gelu") -> None:
        super().__init__()
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.layers = [self.child(f"layer{i}", Linear(a, b, rng))
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def forward(self, x: Tensor) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class LayerNorm(Module):
    """Rowwise normalization over the last axis with learned gain/bias."""

    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gain = self.param("gain", Tensor(np.ones(dim), requires_grad=True))
        self.bias = self.param("bias", Tensor(np.zeros(dim), requires_grad=True))

    def forward(self, x: Tensor) -> Tensor:
        mu = T.tmean(x, axis=-1, keepdims=True)
        centered = T.add(x, T.scalar_mul(mu, -1.0))
        var = T.tmean(T.mul(centered, centered), axis=-1, keepdims=True)
        inv = T.pow_const(T.add(var, Tensor(self.eps)), -0.5)
        normed = T.mul(centered, inv)
        return T.add(T.mul(normed, self.gain), self.bias)
