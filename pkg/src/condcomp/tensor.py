"""Dense float64 tensors with taped reverse-mode differentiation.

Everything in this package differentiates through the operations defined
here. Storage is plain row-major numpy float64; there are no views, no
strides, no mixed precision. Each operation that touches a tensor requiring
gradients records a node on an implicit tape (the graph of ``TapeNode``
objects hanging off each output); ``backward`` linearizes that graph
topologically and runs the local rules in reverse.

Gradients accumulate: calling ``backward`` twice without ``zero_grad`` adds
the new gradient on top of the old one.

A graph and its tensors belong to one thread; independent models may run
on independent threads (debug flags and MAC meters are thread-local, and
there is no other shared state or locking).
"""

from __future__ import annotations

import math
import os
import threading
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

_GELU_C = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_state = threading.local()


_DEBUG_DEFAULT = os.environ.get("CONDCOMP_DEBUG", "0") not in ("0", "", "false")


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of every op output (off by default)."""
    _state.debug = bool(enabled)


def debug_checks_enabled() -> bool:
    return getattr(_state, "debug", _DEBUG_DEFAULT)


class MacMeter:
    """Counts multiply-accumulates of every matmul run while active.

    Only matmuls are metered; elementwise work, reductions, and
    gather/scatter are not MACs under this package's cost convention.
    """

    def __init__(self) -> None:
        self.macs = 0

    def add(self, macs: int) -> None:
        self.macs += macs

    def __enter__(self) -> "MacMeter":
        stack = getattr(_state, "meters", None)
        if stack is None:
            stack = _state.meters = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.meters.pop()


def _meter_add(macs: int) -> None:
    for meter in getattr(_state, "meters", ()):
        meter.add(macs)


class TapeNode:
    """One recorded operation: inputs, output, and its local backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: "Tensor",
                 backward_fn: Callable[[Array], tuple]) -> None:
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class ComputationTape:
    """Nodes reachable from one output, in topological order."""

    def __init__(self, nodes: list[TapeNode]) -> None:
        self.nodes = nodes

    @classmethod
    def trace(cls, output: "Tensor") -> "ComputationTape":
        order: list[TapeNode] = []
        seen: set[int] = set()
        work: list[tuple[TapeNode, bool]] = []
        if output.node is not None:
            work.append((output.node, False))
        while work:
            node, expanded = work.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            work.append((node, True))
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    work.append((t.node, False))
        return cls(order)


class Tensor:
    """Dense float64 array plus gradient accumulator and graph link.

    The gradient buffer materializes (as zeros) on first use; leaf
    parameters get theirs eagerly via ParameterSet.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.node: TapeNode | None = None

    def ensure_grad(self) -> Array:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; everything routes through the op functions below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, scalar_mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scalar_mul(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: Array, inputs: Sequence[Tensor],
            backward_fn: Callable[[Array], tuple]) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if debug_checks_enabled() and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: produced non-finite values")
    if requires:
        out.node = TapeNode(op, tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _shape_error(op: str, *shapes) -> ValueError:
    desc = " and ".join(str(tuple(s)) for s in shapes)
    return ValueError(f"{op}: incompatible shapes {desc}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None

    def backward(gout: Array):
        ga = _unbroadcast(gout, a.shape) if a.requires_grad else None
        gb = _unbroadcast(gout, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("add", data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise _shape_error("elementwise-mul", a.shape, b.shape) from None

    def backward(gout: Array):
        ga = _unbroadcast(gout * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(gout * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("elementwise-mul", data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError:
        raise _shape_error("div", a.shape, b.shape) from None

    def backward(gout: Array):
        ga = _unbroadcast(gout / b.data, a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(-gout * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", data, (a, b), backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(gout: Array):
        return (gout * c if a.requires_grad else None,)

    return _record("scalar-mul", a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    _meter_add(a.shape[0] * a.shape[1] * b.shape[1])
    data = a.data @ b.data

    def backward(gout: Array):
        ga = gout @ b.data.T if a.requires_grad else None
        gb = a.data.T @ gout if b.requires_grad else None
        return ga, gb

    return _record("matmul", data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise _shape_error("transpose", a.shape)

    def backward(gout: Array):
        return (gout.T.copy() if a.requires_grad else None,)

    return _record("transpose", a.data.T.copy(), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None

    def backward(gout: Array):
        return (gout.reshape(a.shape) if a.requires_grad else None,)

    return _record("reshape", data.copy(), (a,), backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise _shape_error("broadcast", a.shape, shape) from None

    def backward(gout: Array):
        return (_unbroadcast(gout, a.shape) if a.requires_grad else None,)

    return _record("broadcast", data, (a,), backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(gout: Array):
        if not a.requires_grad:
            return (None,)
        return (gout * exponent * a.data ** (exponent - 1.0),)

    return _record("pow", data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(gout: Array):
        return (gout * data if a.requires_grad else None,)

    return _record("exp", data, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)

    def backward(gout: Array):
        return (gout / a.data if a.requires_grad else None,)

    return _record("log", data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _expand_reduced(gout: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(gout, shape).copy()
    if not keepdims:
        gout = np.expand_dims(gout, axis)
    return np.broadcast_to(gout, shape).copy()


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(gout: Array):
        if not a.requires_grad:
            return (None,)
        return (_expand_reduced(gout, a.shape, axis, keepdims),)

    return _record("sum", data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size // data.size

    def backward(gout: Array):
        if not a.requires_grad:
            return (None,)
        return (_expand_reduced(gout, a.shape, axis, keepdims) / count,)

    return _record("mean", data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_error("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(gout: Array):
        pieces = np.split(gout, offsets, axis=axis)
        return tuple(p if t.requires_grad else None
                     for p, t in zip(pieces, tensors))

    return _record("concat", data, tuple(tensors), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if a.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ValueError(f"row-gather: indices out of range for shape {a.shape}")
    data = a.data[idx].copy()

    def backward(gout: Array):
        if not a.requires_grad:
            return (None,)
        g = np.zeros_like(a.data)
        np.add.at(g, idx, gout)
        return (g,)

    return _record("row-gather", data, (a,), backward)


def scatter_rows(a: Tensor, indices, n_rows: int) -> Tensor:
    """Place rows of ``a`` at ``indices`` in a zero matrix of ``n_rows`` rows.

    Indices must be distinct; this is the inverse of ``gather_rows`` for a
    permutation-free subset.
    """
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size != a.shape[0]:
        raise _shape_error("row-scatter", a.shape, (idx.size,))
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ValueError(f"row-scatter: indices out of range for {n_rows} rows")
    if idx.size != np.unique(idx).size:
        raise ValueError("row-scatter: indices must be distinct")
    data = np.zeros((n_rows,) + a.shape[1:], dtype=np.float64)
    data[idx] = a.data

    def backward(gout: Array):
        return (gout[idx].copy() if a.requires_grad else None,)

    return _record("row-scatter", data, (a,), backward)


def mask_rows(a: Tensor, mask) -> Tensor:
    """Multiply each row by a constant 0/1 (or soft) row weight."""
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    if m.shape[0] != a.shape[0]:
        raise _shape_error("row-mask", a.shape, m.shape)
    mm = m.reshape((-1,) + (1,) * (a.ndim - 1))
    data = a.data * mm

    def backward(gout: Array):
        return (gout * mm if a.requires_grad else None,)

    return _record("row-mask", data, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and losses


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("softmax: temperature must be positive")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(gout: Array):
        if not a.requires_grad:
            return (None,)
        inner = (gout * data).sum(axis=axis, keepdims=True)
        return (data * (gout - inner) / temperature,)

    return _record("softmax", data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def backward(gout: Array):
        if not a.requires_grad:
            return (None,)
        return (gout - np.exp(data) * gout.sum(axis=axis, keepdims=True),)

    return _record("log-softmax", data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(gout: Array):
        return (gout * (a.data > 0.0) if a.requires_grad else None,)

    return _record("relu", data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation with the usual 0.044715 cubic coefficient
    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(u)
    data = 0.5 * x * (1.0 + t)

    def backward(gout: Array):
        if not a.requires_grad:
            return (None,)
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x ** 2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du
        return (gout * local,)

    return _record("gelu", data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(gout: Array):
        if not a.requires_grad:
            return (None,)
        return (gout * data * (1.0 - data),)

    return _record("sigmoid", data, (a,), backward)


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of integer class targets given raw logits.

    Accepts a single logit vector with a scalar target, or a (batch,
    classes) matrix with a vector of targets.
    """
    if logits.ndim == 1:
        mat = logits.data.reshape(1, -1)
        tgt = np.asarray([targets], dtype=np.intp).reshape(-1)
    elif logits.ndim == 2:
        mat = logits.data
        tgt = np.asarray(targets, dtype=np.intp).reshape(-1)
    else:
        raise _shape_error("cross-entropy-from-logits", logits.shape)
    n, c = mat.shape
    if tgt.shape[0] != n:
        raise _shape_error("cross-entropy-from-logits", logits.shape, tgt.shape)
    if tgt.size and (tgt.min() < 0 or tgt.max() >= c):
        raise ValueError(
            f"cross-entropy-from-logits: target out of range for {c} classes")
    z = mat - mat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    data = np.asarray(-logp[np.arange(n), tgt].mean())

    def backward(gout: Array):
        if not logits.requires_grad:
            return (None,)
        g = np.exp(logp)
        g[np.arange(n), tgt] -= 1.0
        g *= float(gout) / n
        return (g.reshape(logits.shape),)

    return _record("cross-entropy-from-logits", data, (logits,), backward)


# ---------------------------------------------------------------------------
# backward driver and op catalog


def backward(output: Tensor) -> None:
    """Populate ``grad`` of every reachable requires_grad tensor.

    Gradients add into existing ``grad`` buffers; use ``zero_grad`` between
    backward passes that should not accumulate.
    """
    if output.size != 1:
        raise ValueError(f"backward: output must be scalar, got shape {output.shape}")
    if output.node is None:
        raise ValueError("backward: output has no recorded operations")
    tape = ComputationTape.trace(output)
    grads: dict[int, Array] = {id(output): np.ones_like(output.data)}
    holders: dict[int, Tensor] = {id(output): output}
    for node in reversed(tape.nodes):
        gout = grads.get(id(node.output))
        if gout is None:
            continue
        gins = node.backward_fn(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = g if prev is None else prev + g
            holders[id(t)] = t
    for tid, t in holders.items():
        if t.requires_grad:
            if t.grad is None:
                t.grad = grads[tid]
            else:
                t.grad += grads[tid]


_CATALOG: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "elementwise-mul": mul,
    "scalar-mul": scalar_mul,
    "sum": tsum,
    "mean": tmean,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "row-gather": gather_rows,
    "row-scatter": scatter_rows,
    "row-mask": mask_rows,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "cross-entropy-from-logits": cross_entropy_from_logits,
    "broadcast": broadcast_to,
    "transpose": transpose,
    "reshape": reshape,
    "div": div,
    "pow": pow_const,
    "exp": exp,
    "log": log,
}


def apply_op(op: str, *args, **kwargs) -> Tensor:
    """Dispatch an operation by id; unknown ids raise."""
    fn = _CATALOG.get(op)
    if fn is None:
        raise ValueError(f"unknown op id {op!r}; known: {sorted(_CATALOG)}")
    return fn(*args, **kwargs)


def op_ids() -> list[str]:
    return sorted(_CATALOG)
