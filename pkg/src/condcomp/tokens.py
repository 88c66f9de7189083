"""Token subset selection: keep-score heads, drop masks, merge masks.

A drop mask keeps a fixed number of tokens (one-hot rows, order
preserving); a merge mask pools every token into exactly one of a fixed
number of output slots (binary matrix with unit column sums). Training
uses soft/straight-through keep weights over all tokens; inference gathers
the kept rows physically so downstream cost actually shrinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Module
from .sampling import GateScores, SamplerConfig, gumbel_noise, sample_ste, top_k_indices
from .tensor import Tensor


class ScoreHead(Module):
    """Per-token scalar keep score from a small MLP."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.net = self.child("net", MLP([d_in, d_hidden, 1], rng, activation="relu"))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"ScoreHead: expected (n, {self.d_in}) tokens, got {x.shape}")
        return T.reshape(self.net(x), (x.shape[0],))

    def macs_per_token(self) -> int:
        return self.d_in * self.d_hidden + self.d_hidden


def score_tokens(head: ScoreHead, x: Tensor) -> Tensor:
    return head(x)


@dataclass
class SelectionMask:
    matrix: np.ndarray            # (n_out, n_in), constant
    kind: str                     # drop | merge
    kept: np.ndarray | None = None        # drop: original indices, ascending
    alive: np.ndarray | None = None       # drop: per-token boolean
    empty_slots: np.ndarray | None = None  # merge: slots with no tokens


def build_drop_mask(scores: Tensor | np.ndarray, n_keep: int,
                    mode: str = "greedy",
                    rng: np.random.Generator | None = None) -> SelectionMask:
    """One-hot row mask keeping the top-scoring tokens, original order.

    mode="stochastic" perturbs scores with gumbel noise before the top-k,
    so keep probabilities follow softmax(scores) marginals.
    """
    values = scores.data if isinstance(scores, Tensor) else np.asarray(scores, float)
    values = values.reshape(-1)
    n = values.shape[0]
    if not 1 <= n_keep <= n:
        raise ValueError(f"build_drop_mask: n_keep={n_keep} out of range for {n} tokens")
    if mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic drop mask needs a generator")
        values = values + gumbel_noise(n, rng)
    elif mode != "greedy":
        raise ValueError(f"build_drop_mask: unknown mode {mode!r}")
    kept = np.sort(top_k_indices(values, n_keep))
    matrix = np.zeros((n_keep, n))
    matrix[np.arange(n_keep), kept] = 1.0
    alive = np.zeros(n, dtype=bool)
    alive[kept] = True
    return SelectionMask(matrix=matrix, kind="drop", kept=kept, alive=alive)


def build_merge_mask(slot_affinity: Tensor | np.ndarray) -> SelectionMask:
    """Assign each token to its argmax slot; columns sum to exactly one.

    Rows aggregate the tokens assigned to that slot; a slot receiving no
    tokens keeps a zero row and is flagged.
    """
    aff = slot_affinity.data if isinstance(slot_affinity, Tensor) else np.asarray(slot_affinity, float)
    if aff.ndim != 2:
        raise ValueError("build_merge_mask: need (n_tokens, n_slots) affinities")
    n, n_slots = aff.shape
    if n_slots < 1 or n_slots > n:
        raise ValueError(f"build_merge_mask: n_slots={n_slots} out of range for {n} tokens")
    assignment = np.argmax(aff, axis=1)
    matrix = np.zeros((n_slots, n))
    matrix[assignment, np.arange(n)] = 1.0
    empty = matrix.sum(axis=1) == 0
    return SelectionMask(matrix=matrix, kind="merge",
                         alive=np.ones(n, dtype=bool), empty_slots=empty)


def apply_mask(mask: SelectionMask, x: Tensor) -> Tensor:
    """X' = M X (drop selects rows, merge sums groups of rows)."""
    if mask.matrix.shape[1] != x.shape[0]:
        raise ValueError(
            f"apply_mask: mask {mask.matrix.shape} does not fit {x.shape[0]} tokens")
    return T.matmul(Tensor(mask.matrix), x)


def ste_keep_weights(scores: Tensor, n_keep: int, rng: np.random.Generator,
                     temperature: float = 1.0,
                     noise: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Straight-through keep vector for masked training.

    Forward values are exactly the k-hot keep decision; the backward path is
    the shared softmax over noisy scores, so the score head receives
    gradients from whatever the masked forward does with the weights.
    """
    res = sample_ste(GateScores(scores),
                     SamplerConfig(mode="straight-through", k=n_keep,
                                   temperature=temperature),
                     rng, noise=noise)
    return res.onehot, np.sort(res.indices)


def validate_decision_chain(n_tokens: int, decisions) -> list[np.ndarray]:
    """Check keep-index lists shrink monotonically; a dropped token must not
    come back at a later selection point."""
    alive = np.arange(n_tokens)
    cleaned = []
    for d, keep in enumerate(decisions):
        keep = np.asarray(keep, dtype=np.intp)
        if keep.size != np.unique(keep).size:
            raise ValueError(f"decision {d}: duplicate token indices")
        revived = np.setdiff1d(keep, alive)
        if revived.size:
            raise ValueError(
                f"decision {d}: tokens {revived.tolist()} were already dropped")
        alive = np.sort(keep)
        cleaned.append(alive.copy())
    return cleaned


def masked_forward(model, x: Tensor, decisions) -> Tensor:
    """Training-style pass: all tokens flow, dead ones are masked out.

    ``decisions`` lists the kept original-token indices at each of the
    model's selection points; the alive set may only shrink.
    """
    validate_decision_chain(x.shape[0], decisions)
    return model.selection_forward(x, decisions, physical=False)


def gather_forward(model, x: Tensor, decisions) -> Tensor:
    """Inference-style pass: kept tokens are physically gathered, so
    downstream layers run on smaller matrices."""
    validate_decision_chain(x.shape[0], decisions)
    return model.selection_forward(x, decisions, physical=True)


def alive_records(sample: int, kept_per_layer) -> list[dict]:
    """JSON-ready alive-trace records: sample id, layer, kept indices."""
    return [{"sample": sample, "layer": layer, "kept": [int(i) for i in kept]}
            for layer, kept in enumerate(kept_per_layer)]
