"""Dynamic-width layers: sparse, soft-dispatch, and soft-weight expert mixes.

All variants share a bank of topologically identical two-layer perceptrons
and a set of trainable expert embeddings used for routing affinities.

* sparse: each token is processed only by its routed experts (real compute
  sparsity; experts run batched on their gathered tokens).
* soft-dispatch: each expert runs exactly once on a soft mix of tokens,
  outputs are remixed per token.
* soft-weights: expert parameters are merged per input before a single
  forward evaluation.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .routing import (
    ExpertEmbeddings,
    RouterConfig,
    RoutingAssignment,
    affinity_scores,
    route_expert_choice,
    route_random,
    route_token_choice,
)
from .tensor import Tensor

VARIANTS = ("sparse", "soft-dispatch", "soft-weights")


class Expert(Module):
    """Two-layer perceptron d_in -> d_hidden -> d_out."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int,
                 rng: np.random.Generator, activation: str = "gelu") -> None:
        super().__init__()
        self.d_in, self.d_hidden, self.d_out = d_in, d_hidden, d_out
        self.activation = activation
        self.fc1 = self.child("fc1", Linear(d_in, d_hidden, rng))
        self.fc2 = self.child("fc2", Linear(d_hidden, d_out, rng))

    def forward(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        if self.activation == "gelu":
            h = T.gelu(h)
        elif self.activation == "relu":
            h = T.relu(h)
        elif self.activation != "identity":
            raise ValueError(f"unknown activation {self.activation!r}")
        return self.fc2(h)

    def macs_per_token(self) -> int:
        return self.d_in * self.d_hidden + self.d_hidden * self.d_out


class MoELayer(Module):
    def __init__(self, n_experts: int, d_in: int, d_hidden: int, d_out: int,
                 router: RouterConfig, rng: np.random.Generator,
                 variant: str = "sparse", activation: str = "gelu",
                 emb_dim: int | None = None) -> None:
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown MoE variant {variant!r}")
        if n_experts < 1:
            raise ValueError("MoELayer: need at least one expert")
        if router.n_experts != n_experts:
            raise ValueError("RouterConfig.n_experts does not match expert count")
        self.variant = variant
        self.router = router
        self.experts = [self.child(f"expert{i}",
                                   Expert(d_in, d_hidden, d_out, rng, activation))
                        for i in range(n_experts)]
        emb_dim = d_in if emb_dim is None else emb_dim
        self.embeddings = ExpertEmbeddings(self.param(
            "embeddings",
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(emb_dim), (n_experts, emb_dim)),
                   requires_grad=True)))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def route(self, tokens: Tensor, rng: np.random.Generator | None = None,
              mode: str = "greedy",
              cond: Tensor | None = None) -> RoutingAssignment:
        """Route on ``cond`` when given (a decoupled conditioning input,
        e.g. the raw tokens), otherwise on the tokens themselves."""
        cfg = self.router
        if cfg.strategy == "random":
            if rng is None:
                raise ValueError("random routing needs a generator")
            return route_random(tokens.shape[0], cfg.n_experts, cfg.k, rng)
        routed_on = tokens if cond is None else cond
        if routed_on.shape[0] != tokens.shape[0]:
            raise ValueError("conditioning input must have one row per token")
        aff = affinity_scores(routed_on, self.embeddings)
        if cfg.strategy == "token-choice":
            return route_token_choice(aff, cfg.k, rng=rng, mode=mode,
                                      temperature=cfg.temperature,
                                      gate_values=cfg.gate_values)
        return route_expert_choice(aff, min(cfg.k, tokens.shape[0]),
                                   temperature=cfg.temperature)

    # -- sparse ------------------------------------------------------------

    def forward_sparse(self, tokens: Tensor,
                       rng: np.random.Generator | None = None,
                       mode: str = "greedy",
                       assign: RoutingAssignment | None = None,
                       cond: Tensor | None = None,
                       ) -> tuple[Tensor, RoutingAssignment]:
        """Per token, gate-weighted sum of its routed experts' outputs.

        Experts are evaluated only on tokens routed to them; unrouted
        tokens (possible under expert choice) come out as zero rows.
        """
        if self.variant != "sparse":
            raise ValueError(f"forward_sparse called on variant {self.variant!r}")
        if assign is None:
            assign = self.route(tokens, rng=rng, mode=mode, cond=cond)
        n_tok = tokens.shape[0]
        d_out = self.experts[0].d_out
        out = Tensor(np.zeros((n_tok, d_out)))
        gate_cols = T.transpose(assign.gate_matrix)
        for e, tok_idx in enumerate(assign.per_expert):
            if len(tok_idx) == 0:
                continue
            xin = T.gather_rows(tokens, tok_idx)
            y = self.experts[e](xin)
            w = T.gather_rows(T.transpose(T.gather_rows(gate_cols, [e])), tok_idx)
            weighted = T.mul(y, T.broadcast_to(w, y.shape))
            out = T.add(out, T.scatter_rows(weighted, tok_idx, n_tok))
        return out, assign

    # -- soft dispatch -----------------------------------------------------

    def forward_soft_dispatch(self, tokens: Tensor) -> tuple[Tensor, dict]:
        """Soft mix of tokens per expert, soft mix of expert outputs per token.

        Dispatch weights: softmax over tokens, per expert column. Combine
        weights: softmax over experts, per token row. Each expert runs
        exactly once regardless of token count.
        """
        if self.variant != "soft-dispatch":
            raise ValueError(f"forward_soft_dispatch called on variant {self.variant!r}")
        aff = affinity_scores(tokens, self.embeddings)
        tau = self.router.temperature
        dispatch = T.softmax(aff, axis=0, temperature=tau)   # (n_tok, n_exp)
        combine = T.softmax(aff, axis=1, temperature=tau)    # (n_tok, n_exp)
        mixed = T.matmul(T.transpose(dispatch), tokens)      # (n_exp, d_in)
        outs = T.concat([self.experts[e](T.gather_rows(mixed, [e]))
                         for e in range(self.n_experts)], axis=0)
        result = T.matmul(combine, outs)
        return result, {"dispatch": dispatch, "combine": combine}

    # -- soft weights ------------------------------------------------------

    def _merged_forward(self, token_row: Tensor, gates_row: Tensor) -> Tensor:
        """Evaluate one token through gate-merged expert parameters."""
        names = ("fc1.W", "fc1.b", "fc2.W", "fc2.b")
        merged: dict[str, Tensor] = {}
        for e, expert in enumerate(self.experts):
            ge = T.reshape(T.gather_rows(T.reshape(gates_row, (self.n_experts, 1)), [e]), (1,))
            params = expert.named_parameters()
            for name in names:
                piece = T.mul(T.broadcast_to(T.reshape(ge, (1,) * params[name].ndim),
                                             params[name].shape), params[name])
                merged[name] = piece if name not in merged else T.add(merged[name], piece)
        h = T.add(T.matmul(token_row, merged["fc1.W"]), merged["fc1.b"])
        act = self.experts[0].activation
        if act == "gelu":
            h = T.gelu(h)
        elif act == "relu":
            h = T.relu(h)
        return T.add(T.matmul(h, merged["fc2.W"]), merged["fc2.b"])

    def forward_soft_weights(self, tokens: Tensor,
                             cond: Tensor | None = None) -> Tensor:
        """Merge expert weights with a softmax gate per input, then evaluate.

        The gate is conditioned on ``cond`` (defaults to the tokens
        themselves); each token gets its own merged parameter set.
        """
        if self.variant != "soft-weights":
            raise ValueError(f"forward_soft_weights called on variant {self.variant!r}")
        cond = tokens if cond is None else cond
        if cond.shape[0] != tokens.shape[0]:
            raise ValueError("conditioning input must have one row per token")
        gates = T.softmax(affinity_scores(cond, self.embeddings), axis=1,
                          temperature=self.router.temperature)
        rows = [self._merged_forward(T.gather_rows(tokens, [t]),
                                     T.gather_rows(gates, [t]))
                for t in range(tokens.shape[0])]
        return T.concat(rows, axis=0)


def depth_skip(block, x: Tensor, gate) -> Tensor:
    """Gated residual execution: gate * block(x) + (1 - gate) * x.

    A plain float gate of exactly 0 (or 1) short-circuits: the block is not
    evaluated at all (or evaluated alone), which is the zero-cost inference
    path. A Tensor gate keeps the full soft expression so gradients reach
    both the gate and the block.
    """
    if isinstance(gate, (int, float)):
        g = float(gate)
        if g == 0.0:
            return x
        y = block(x)
        if y.shape != x.shape:
            raise ValueError(
                f"depth_skip: block output {y.shape} does not match input {x.shape}")
        if g == 1.0:
            return y
        return T.add(T.scalar_mul(y, g), T.scalar_mul(x, 1.0 - g))
    y = block(x)
    if y.shape != x.shape:
        raise ValueError(
            f"depth_skip: block output {y.shape} does not match input {x.shape}")
    g = T.reshape(gate, (1,) * x.ndim)
    gb = T.broadcast_to(g, x.shape)
    inv = T.add(T.scalar_mul(gb, -1.0), Tensor(np.ones(x.shape)))
    return T.add(T.mul(gb, y), T.mul(inv, x))
