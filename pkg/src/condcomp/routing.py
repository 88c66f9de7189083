"""Routers for mixture-of-experts layers.

Three assignment strategies over a token-by-expert affinity matrix
(dot products with trainable expert embeddings): per-token top-k
("token-choice"), per-expert top-k ("expert-choice"), and uniform random.

Gate weights are renormalized over the selected support (a masked softmax),
so each token's selected weights form a convex combination. With k=1 the
gate is therefore identically 1 and router embeddings receive task
gradients only through the balancing loss; this is the documented
trade-off of support renormalization versus full-softmax gate values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .sampling import gumbel_noise, top_k_indices
from .tensor import Tensor

NEG_MASK = -1e30

STRATEGIES = ("token-choice", "expert-choice", "random")


GATE_VALUE_FORMS = ("renormalized", "full")


@dataclass
class RouterConfig:
    n_experts: int
    k: int = 1
    strategy: str = "token-choice"
    balance_weight: float = 0.0
    temperature: float = 1.0
    gate_values: str = "renormalized"

    def __post_init__(self) -> None:
        if self.n_experts < 1:
            raise ValueError("RouterConfig: n_experts must be >= 1")
        if self.k < 1:
            raise ValueError("RouterConfig: k must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"RouterConfig: unknown strategy {self.strategy!r}")
        if self.balance_weight < 0:
            raise ValueError("RouterConfig: balance weight must be >= 0")
        if self.temperature <= 0:
            raise ValueError("RouterConfig: temperature must be positive")
        if self.gate_values not in GATE_VALUE_FORMS:
            raise ValueError(f"RouterConfig: unknown gate form {self.gate_values!r}")


@dataclass
class ExpertEmbeddings:
    """One trainable vector per expert, matching the token dimension."""

    vectors: Tensor

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise ValueError("ExpertEmbeddings: need a (n_experts, d) matrix")
        if not np.all(np.isfinite(self.vectors.data)):
            raise ValueError("ExpertEmbeddings: entries must be finite")

    @property
    def n_experts(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class RoutingAssignment:
    """Sparse token-to-expert mapping plus the dense router probabilities."""

    strategy: str
    n_tokens: int
    n_experts: int
    k: int
    per_token: list[list[tuple[int, float]]]
    per_expert: list[np.ndarray]
    probs: Tensor                # (n_tokens, n_experts), rows sum to 1
    gate_matrix: Tensor          # zeros off the selected support
    noise: np.ndarray | None = None

    def dispatch_counts(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.per_expert], dtype=float)

    def dispatch_fractions(self) -> np.ndarray:
        """Per-expert fraction of tokens dispatched; sums to k for token-choice."""
        return self.dispatch_counts() / max(self.n_tokens, 1)


@dataclass
class LoadStats:
    dispatch_fraction: np.ndarray
    mean_probability: np.ndarray
    cv: float
    starved: np.ndarray


def affinity_scores(tokens: Tensor, emb: ExpertEmbeddings | Tensor) -> Tensor:
    """Dot-product similarity of every token with every expert embedding."""
    vectors = emb.vectors if isinstance(emb, ExpertEmbeddings) else emb
    if tokens.ndim != 2 or vectors.ndim != 2 or tokens.shape[1] != vectors.shape[1]:
        raise ValueError(
            f"affinity_scores: token dim {tokens.shape} does not match "
            f"embeddings {vectors.shape}")
    return T.matmul(tokens, T.transpose(vectors))


def _masked_softmax(aff: Tensor, support: np.ndarray, axis: int,
                    temperature: float) -> Tensor:
    mask = np.where(support, 0.0, NEG_MASK)
    return T.softmax(T.add(aff, Tensor(mask)), axis=axis, temperature=temperature)


def _collect(strategy: str, aff: Tensor, support: np.ndarray, k: int,
             gate_matrix: Tensor, probs: Tensor,
             noise: np.ndarray | None) -> RoutingAssignment:
    n_tok, n_exp = aff.shape
    per_token: list[list[tuple[int, float]]] = []
    gm = gate_matrix.data
    for t in range(n_tok):
        experts = np.flatnonzero(support[t])
        per_token.append([(int(e), float(gm[t, e])) for e in experts])
    per_expert = [np.flatnonzero(support[:, e]).astype(np.intp) for e in range(n_exp)]
    return RoutingAssignment(strategy, n_tok, n_exp, k, per_token, per_expert,
                             probs, gate_matrix, noise)


def route_token_choice(aff: Tensor, k: int,
                       rng: np.random.Generator | None = None,
                       mode: str = "greedy",
                       temperature: float = 1.0,
                       gate_values: str = "renormalized") -> RoutingAssignment:
    """Assign each token to its k highest-affinity experts.

    mode="stochastic" perturbs the selection with gumbel noise (the
    straight-through exploration path). Gate weights are either the masked
    softmax renormalized over the selected support (default; selected
    weights sum to 1, but with k=1 the gate is constant and carries no task
    gradient) or the full-softmax probabilities at the selected entries
    (Switch-style; weights sum below 1 but keep the router trainable by the
    task loss even at k=1).
    """
    n_tok, n_exp = aff.shape
    if not 1 <= k <= n_exp:
        raise ValueError(f"route_token_choice: k={k} out of range for {n_exp} experts")
    if mode not in ("greedy", "stochastic"):
        raise ValueError(f"route_token_choice: unknown mode {mode!r}")
    if gate_values not in GATE_VALUE_FORMS:
        raise ValueError(f"route_token_choice: unknown gate form {gate_values!r}")
    noise = None
    z = aff.data
    if mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic routing needs a generator")
        noise = gumbel_noise(n_tok * n_exp, rng).reshape(n_tok, n_exp)
        z = z + noise
    support = np.zeros((n_tok, n_exp), dtype=bool)
    for t in range(n_tok):
        support[t, top_k_indices(z[t], k)] = True
    probs = T.softmax(aff, axis=1, temperature=temperature)
    if gate_values == "full":
        gate_matrix = T.mul(probs, Tensor(support.astype(float)))
    else:
        gate_matrix = _masked_softmax(aff, support, axis=1, temperature=temperature)
    return _collect("token-choice", aff, support, k, gate_matrix, probs, noise)


def route_expert_choice(aff: Tensor, k: int,
                        temperature: float = 1.0) -> RoutingAssignment:
    """Let each expert pick its k highest-affinity tokens.

    Tokens may be picked by several experts or by none; gate weights
    normalize over each expert's selected column.
    """
    n_tok, n_exp = aff.shape
    if not 1 <= k <= n_tok:
        raise ValueError(f"route_expert_choice: k={k} out of range for {n_tok} tokens")
    support = np.zeros((n_tok, n_exp), dtype=bool)
    for e in range(n_exp):
        support[top_k_indices(aff.data[:, e], k), e] = True
    gate_matrix = _masked_softmax(aff, support, axis=0, temperature=temperature)
    probs = T.softmax(aff, axis=1, temperature=temperature)
    return _collect("expert-choice", aff, support, k, gate_matrix, probs, None)


def route_random(n_tok: int, n_experts: int, k: int,
                 rng: np.random.Generator) -> RoutingAssignment:
    """Uniformly assign k distinct experts per token with 1/k gate weights."""
    if not 1 <= k <= n_experts:
        raise ValueError(f"route_random: k={k} out of range for {n_experts} experts")
    support = np.zeros((n_tok, n_experts), dtype=bool)
    for t in range(n_tok):
        support[t, rng.choice(n_experts, size=k, replace=False)] = True
    gate_matrix = Tensor(support.astype(float) / k)
    probs = Tensor(np.full((n_tok, n_experts), 1.0 / n_experts))
    return _collect("random", Tensor(np.zeros((n_tok, n_experts))), support, k,
                    gate_matrix, probs, None)


def balancing_loss(assign: RoutingAssignment) -> Tensor:
    """Switch-style load-balance penalty n * sum_i f_i * mean_prob_i.

    Dispatch fractions are normalized per assignment (counts / (n_tok * k),
    summing to 1) so the uniform minimum is exactly 1 for any k; they are
    treated as constants, so gradients flow only through the router
    probabilities.
    """
    total = assign.n_tokens * assign.k
    f_norm = assign.dispatch_counts() / max(total, 1)
    mean_p = T.tmean(assign.probs, axis=0)
    weighted = T.mul(mean_p, Tensor(f_norm))
    return T.scalar_mul(T.tsum(weighted), float(assign.n_experts))


def load_stats(assign: RoutingAssignment,
               starvation_threshold: float = 0.05) -> LoadStats:
    f = assign.dispatch_fractions()
    mean_p = assign.probs.data.mean(axis=0)
    mu = f.mean()
    cv = float(f.std() / mu) if mu > 0 else 0.0
    return LoadStats(dispatch_fraction=f, mean_probability=mean_p, cv=cv,
                     starved=f < starvation_threshold)


def assignment_records(assign: RoutingAssignment, sample: int | None = None,
                       layer: int | None = None) -> list[dict]:
    """JSON-ready records, one per token: token id, expert ids, weights."""
    records = []
    for t, pairs in enumerate(assign.per_token):
        rec: dict = {"token": t,
                     "experts": [e for e, _ in pairs],
                     "weights": [w for _, w in pairs]}
        if sample is not None:
            rec["sample"] = sample
        if layer is not None:
            rec["layer"] = layer
        records.append(rec)
    return records
