"""Synthetic token-set classification tasks.

Each task stresses one conditional mechanism:

* difficulty-tiers: binary Gaussian token sets at three separation margins,
  so confidence-based early exits see easy and hard samples.
* cluster-experts: tokens drawn around latent cluster centers with
  cluster-specific label maps, so routers can specialize experts.
* needle-tokens: a few informative tokens buried in noise tokens, so keep
  scores have something real to find.

Latent metadata (tier, cluster id, informative indices) is returned beside
the inputs and never encoded in them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DATASET_IDS = ("difficulty-tiers", "cluster-experts", "needle-tokens")


@dataclass
class SyntheticDataset:
    id: str
    params: dict
    seed: int
    X: np.ndarray                     # (n_samples, n_tokens, dim)
    y: np.ndarray                     # (n_samples,) int labels
    meta: list[dict] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.X.shape[1]

    @property
    def dim(self) -> int:
        return self.X.shape[2]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if self.y.size else 0

    def split(self, train_fraction: float) -> tuple["SyntheticDataset", "SyntheticDataset"]:
        if not 0.0 < train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        cut = int(round(self.n_samples * train_fraction))
        head = SyntheticDataset(self.id, self.params, self.seed,
                                self.X[:cut], self.y[:cut], self.meta[:cut])
        tail = SyntheticDataset(self.id, self.params, self.seed,
                                self.X[cut:], self.y[cut:], self.meta[cut:])
        return head, tail


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _difficulty_tiers(params: dict, rng: np.random.Generator) -> SyntheticDataset:
    n = int(params.get("n_samples", 1000))
    n_tok = int(params.get("n_tokens", 8))
    dim = int(params.get("dim", 16))
    margins = tuple(params.get("margins", (0.5, 1.5, 3.0)))
    noise = float(params.get("noise", 1.0))
    u = _unit(rng, dim)
    X = np.empty((n, n_tok, dim))
    y = np.empty(n, dtype=np.intp)
    meta = []
    for i in range(n):
        y[i] = i % 2
        tier = (i // 2) % len(margins)
        s = 1.0 if y[i] == 1 else -1.0
        X[i] = s * margins[tier] * u + noise * rng.normal(size=(n_tok, dim))
        meta.append({"tier": tier, "margin": float(margins[tier])})
    return _shuffled("difficulty-tiers", params, X, y, meta, rng)


def _cluster_experts(params: dict, rng: np.random.Generator) -> SyntheticDataset:
    n = int(params.get("n_samples", 1000))
    n_tok = int(params.get("n_tokens", 4))
    dim = int(params.get("dim", 8))
    m = int(params.get("n_clusters", 4))
    scale = float(params.get("center_scale", 3.0))
    noise = float(params.get("noise", 0.3))
    label_margin = float(params.get("label_margin", 0.0))
    if dim < m:
        raise ValueError("cluster-experts: dim must be >= n_clusters")
    basis = np.linalg.qr(rng.normal(size=(dim, dim)))[0][:m]
    centers = scale * basis
    label_maps = np.stack([_unit(rng, dim) for _ in range(m)])
    X = np.empty((n, n_tok, dim))
    y = np.empty(n, dtype=np.intp)
    meta = []
    for i in range(n):
        c = int(rng.integers(0, m))
        y[i] = i % 2
        s = 1.0 if y[i] == 1 else -1.0
        delta = rng.normal(size=(n_tok, dim))
        # flip the noise so the cluster-specific map votes for the label
        vote = label_maps[c] @ delta.mean(axis=0)
        if np.sign(vote) != s:
            delta = -delta
            vote = -vote
        if label_margin > 0.0 and vote < label_margin:
            delta = delta + (label_margin - vote) * s * label_maps[c]
        X[i] = centers[c] + noise * delta
        meta.append({"cluster": c})
    return _shuffled("cluster-experts", params, X, y, meta, rng)


def _needle_tokens(params: dict, rng: np.random.Generator) -> SyntheticDataset:
    n = int(params.get("n_samples", 1000))
    n_tok = int(params.get("n_tokens", 16))
    j = int(params.get("n_informative", 2))
    dim = int(params.get("dim", 8))
    margin = float(params.get("margin", 3.0))
    noise = float(params.get("noise", 1.0))
    if not 1 <= j <= n_tok:
        raise ValueError("needle-tokens: n_informative out of range")
    u = _unit(rng, dim)
    X = np.empty((n, n_tok, dim))
    y = np.empty(n, dtype=np.intp)
    meta = []
    for i in range(n):
        y[i] = i % 2
        s = 1.0 if y[i] == 1 else -1.0
        informative = np.sort(rng.choice(n_tok, size=j, replace=False))
        # each informative token carries its own signed amplitude along u;
        # the label is the sign of their sum, so no single token decides it
        amps = rng.choice([-1.0, 1.0], size=j) * (1.0 + 0.5 * np.abs(rng.normal(size=j)))
        if np.sign(amps.sum()) != s:
            amps = -amps
        X[i] = noise * rng.normal(size=(n_tok, dim))
        X[i, informative] = (amps[:, None] * margin * u
                             + 0.25 * noise * rng.normal(size=(j, dim)))
        meta.append({"informative": informative.tolist()})
    return _shuffled("needle-tokens", params, X, y, meta, rng)


def _shuffled(dataset_id, params, X, y, meta, rng) -> SyntheticDataset:
    perm = rng.permutation(X.shape[0])
    return SyntheticDataset(dataset_id, dict(params), -1, X[perm], y[perm],
                            [meta[i] for i in perm])


_GENERATORS = {
    "difficulty-tiers": _difficulty_tiers,
    "cluster-experts": _cluster_experts,
    "needle-tokens": _needle_tokens,
}


def generate(dataset_id: str, params: dict, seed: int) -> SyntheticDataset:
    """Build a dataset reproducibly from (id, params, seed)."""
    gen = _GENERATORS.get(dataset_id)
    if gen is None:
        raise ValueError(f"unknown dataset id {dataset_id!r}; known: {DATASET_IDS}")
    ds = gen(dict(params), np.random.default_rng(seed))
    ds.seed = seed
    return ds
