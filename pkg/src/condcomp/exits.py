"""Early-exit networks: stacked blocks with auxiliary classifiers.

Supports the three standard pieces: joint training of all exits, halting at
inference once a confidence rule crosses a threshold, and differentiable
branching (a recursive soft mixture of exit predictions whose binary limit
is the stick-breaking distribution over exits).

Blocks are any callables mapping a token matrix to a token matrix; heads
pool over tokens and classify. Per-block MAC counts are attached at
assembly so inference traces carry their consumed compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .sampling import GateScores, SamplerConfig, sample_ste
from .tensor import Tensor


@dataclass
class EENNConfig:
    alpha: float = 1.0
    betas: tuple[float, ...] = ()
    halting: str = "max-prob"            # max-prob | entropy
    threshold: float = 0.5
    gate_mode: str = "heuristic-threshold"  # or differentiable-branching

    def validate(self, n_blocks: int) -> None:
        if len(self.betas) != n_blocks - 1:
            raise ValueError(
                f"EENNConfig: need {n_blocks - 1} betas, got {len(self.betas)}")
        if self.alpha < 0 or any(b < 0 for b in self.betas):
            raise ValueError("EENNConfig: loss weights must be nonnegative")
        if self.alpha + sum(self.betas) <= 0:
            raise ValueError("EENNConfig: at least one loss weight must be positive")
        if self.halting not in ("max-prob", "entropy"):
            raise ValueError(f"EENNConfig: unknown halting rule {self.halting!r}")
        if self.gate_mode not in ("heuristic-threshold", "differentiable-branching"):
            raise ValueError(f"EENNConfig: unknown gate mode {self.gate_mode!r}")


@dataclass
class ExitTrace:
    exit_index: int              # 1-based; b means the final head
    confidence: float
    gates: list[float] = field(default_factory=list)
    macs: int = 0

    def record(self, sample: int | None = None) -> dict:
        rec = {"exit": self.exit_index, "confidence": self.confidence,
               "gates": self.gates, "macs": self.macs}
        if sample is not None:
            rec["sample"] = sample
        return rec


class PooledClassifier(Module):
    """Mean-pool over tokens, then a linear classifier."""

    def __init__(self, d_model: int, n_classes: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.d_model = d_model
        self.n_classes = n_classes
        self.fc = self.child("fc", Linear(d_model, n_classes, rng))

    def forward(self, x: Tensor, alive=None) -> Tensor:
        if alive is not None:
            keep = np.flatnonzero(np.asarray(alive))
            x = T.gather_rows(x, keep)
        pooled = T.reshape(T.tmean(x, axis=0), (1, self.d_model))
        return T.reshape(self.fc(pooled), (self.n_classes,))

    def macs(self) -> int:
        return self.d_model * self.n_classes


class PooledGate(Module):
    """Mean-pool then a scalar logistic gate; bias starts at -2 so training
    initially prefers deeper exits."""

    def __init__(self, d_model: int, rng: np.random.Generator,
                 bias_init: float = -2.0) -> None:
        super().__init__()
        self.d_model = d_model
        self.fc = self.child("fc", Linear(d_model, 1, rng))
        self.fc.b.data[...] = bias_init

    def logit(self, x: Tensor, alive=None) -> Tensor:
        if alive is not None:
            keep = np.flatnonzero(np.asarray(alive))
            x = T.gather_rows(x, keep)
        pooled = T.reshape(T.tmean(x, axis=0), (1, self.d_model))
        return T.reshape(self.fc(pooled), (1,))

    def forward(self, x: Tensor, alive=None) -> Tensor:
        return T.sigmoid(self.logit(x, alive))

    def macs(self) -> int:
        return self.d_model


class EENN:
    """Backbone blocks plus exit, gate, and final heads."""

    def __init__(self, blocks, exit_heads, final_head, gate_heads=None,
                 block_macs=None, exit_head_macs=None, final_head_macs=0,
                 prologue_macs=0, prologue=None) -> None:
        if len(exit_heads) != len(blocks) - 1:
            raise ValueError("EENN: need one exit head per non-final block")
        if gate_heads is not None and len(gate_heads) != len(blocks) - 1:
            raise ValueError("EENN: need one gate head per non-final block")
        self.blocks = list(blocks)
        self.exit_heads = list(exit_heads)
        self.final_head = final_head
        self.gate_heads = list(gate_heads) if gate_heads is not None else None
        self.block_macs = list(block_macs) if block_macs else [0] * len(blocks)
        self.exit_head_macs = (list(exit_head_macs) if exit_head_macs
                               else [0] * len(exit_heads))
        self.final_head_macs = final_head_macs
        self.prologue = prologue          # e.g. input projection, shared by all paths
        self.prologue_macs = prologue_macs

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def _enter(self, x: Tensor) -> Tensor:
        return self.prologue(x) if self.prologue is not None else x


def forward_all_exits(net: EENN, x: Tensor) -> list[Tensor]:
    """One pass through every block, emitting all exit logits plus the final."""
    h = net._enter(x)
    preds = []
    for i, block in enumerate(net.blocks):
        h = block(h)
        if i < net.n_blocks - 1:
            preds.append(net.exit_heads[i](h))
    preds.append(net.final_head(h))
    return preds


def joint_loss(preds: list[Tensor], target: int, cfg: EENNConfig) -> Tensor:
    """alpha * CE(final) + sum_i beta_i * CE(exit_i)."""
    cfg.validate(len(preds))
    loss = T.scalar_mul(T.cross_entropy_from_logits(preds[-1], target), cfg.alpha)
    for beta, pred in zip(cfg.betas, preds[:-1]):
        if beta != 0.0:
            loss = T.add(loss, T.scalar_mul(
                T.cross_entropy_from_logits(pred, target), beta))
    return loss


def confidence_value(logits: np.ndarray, rule: str) -> float:
    """max softmax probability, or 1 - entropy/ln(C); both live in [0, 1]."""
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    if rule == "max-prob":
        return float(p.max())
    if rule == "entropy":
        if p.size == 1:
            return 1.0
        h = float(-(p * np.log(np.clip(p, 1e-300, None))).sum())
        return 1.0 - h / np.log(p.size)
    raise ValueError(f"unknown halting rule {rule!r}")


def infer_threshold(net: EENN, x: Tensor, cfg: EENNConfig) -> tuple[int, ExitTrace]:
    """Halt at the first exit whose confidence reaches the threshold.

    Blocks past the halting point are never evaluated; the trace's MAC
    count covers only executed work.
    """
    h = net._enter(x)
    macs = net.prologue_macs
    for i, block in enumerate(net.blocks):
        h = block(h)
        macs += net.block_macs[i]
        if i < net.n_blocks - 1:
            logits = net.exit_heads[i](h)
            macs += net.exit_head_macs[i]
            conf = confidence_value(logits.data, cfg.halting)
            if conf >= cfg.threshold:
                pred = int(np.argmax(logits.data))
                return pred, ExitTrace(i + 1, conf, [], macs)
    logits = net.final_head(h)
    macs += net.final_head_macs
    conf = confidence_value(logits.data, cfg.halting)
    return int(np.argmax(logits.data)), ExitTrace(net.n_blocks, conf, [], macs)


def branch_output(net: EENN, x: Tensor, sampler: str = "soft",
                  rng: np.random.Generator | None = None,
                  temperature: float = 1.0) -> tuple[Tensor, list[Tensor]]:
    """Recursive soft composition of exit predictions.

    y~_i = g_i * y_i + (1 - g_i) * y~_{i+1}, with the final gate pinned to 1.
    Gates are logistic head values ("soft") or straight-through binary
    samples from a two-way gumbel-softmax ("ste").
    """
    if net.gate_heads is None:
        raise ValueError("branch_output: network has no gate heads")
    if sampler not in ("soft", "ste"):
        raise ValueError(f"branch_output: unknown sampler {sampler!r}")
    h = net._enter(x)
    preds: list[Tensor] = []
    gates: list[Tensor] = []
    for i, block in enumerate(net.blocks):
        h = block(h)
        if i < net.n_blocks - 1:
            preds.append(net.exit_heads[i](h))
            if sampler == "soft":
                gates.append(net.gate_heads[i](h))
            else:
                logit = net.gate_heads[i].logit(h)
                scores = GateScores(T.concat([logit, Tensor([0.0])], axis=0))
                res = sample_ste(scores, SamplerConfig(
                    mode="straight-through", temperature=temperature), rng)
                gates.append(T.gather_rows(res.onehot, [0]))
    preds.append(net.final_head(h))
    out = preds[-1]
    for i in range(net.n_blocks - 2, -1, -1):
        g = T.broadcast_to(T.reshape(gates[i], (1,) * preds[i].ndim), preds[i].shape)
        inv = T.add(T.scalar_mul(g, -1.0), Tensor(np.ones(preds[i].shape)))
        out = T.add(T.mul(g, preds[i]), T.mul(inv, out))
    return out, gates


def gamma_vector(gammas) -> tuple[np.ndarray, float]:
    """Stick-breaking exit weights and the leftover final-exit mass.

    Gamma_j = prod_{i<j}(1 - g_i) * g_j; residual = prod(1 - g_i).
    """
    g = np.asarray(gammas, dtype=np.float64).reshape(-1)
    if g.size and (g.min() < 0.0 or g.max() > 1.0):
        raise ValueError("gamma_vector: gate values must lie in [0, 1]")
    out = np.empty_like(g)
    stick = 1.0
    for j, gj in enumerate(g):
        out[j] = stick * gj
        stick = stick * (1.0 - gj)
    return out, float(stick)


def infer_gated(net: EENN, x: Tensor, threshold: float = 0.5) -> tuple[int, ExitTrace]:
    """Exit at the first trained gate at or above 0.5; final exit otherwise."""
    if net.gate_heads is None:
        raise ValueError("infer_gated: network has no gate heads")
    h = net._enter(x)
    macs = net.prologue_macs
    gates: list[float] = []
    for i, block in enumerate(net.blocks):
        h = block(h)
        macs += net.block_macs[i]
        if i < net.n_blocks - 1:
            g = float(net.gate_heads[i](h).data[0])
            macs += net.gate_heads[i].macs()
            gates.append(g)
            if g >= threshold:
                logits = net.exit_heads[i](h)
                macs += net.exit_head_macs[i]
                pred = int(np.argmax(logits.data))
                return pred, ExitTrace(i + 1, g, gates, macs)
    logits = net.final_head(h)
    macs += net.final_head_macs
    conf = confidence_value(logits.data, "max-prob")
    return int(np.argmax(logits.data)), ExitTrace(net.n_blocks, conf, gates, macs)
