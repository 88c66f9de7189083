"""Differentiable subset sampling via the gumbel-softmax construction.

Three sampling modes over a vector of per-candidate scores:

* hard: argmax / top-k of scores plus gumbel noise; no gradient.
* soft: temperature-scaled softmax of the same noisy scores; differentiable.
* straight-through: hard values in the forward pass, the soft path's
  gradient in the backward pass (one shared softmax also for k > 1).

Noise is recorded on the result so a sample can be replayed exactly on
either path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

_CLAMP = 1e-12

MODES = ("hard", "soft", "straight-through")


@dataclass
class GateScores:
    """One real-valued selection score per candidate."""

    logits: Tensor

    def __post_init__(self) -> None:
        if self.logits.ndim != 1 or self.logits.size < 1:
            raise ValueError("GateScores: logits must be a nonempty vector")
        if not np.all(np.isfinite(self.logits.data)):
            raise ValueError("GateScores: logits must be finite")

    @property
    def count(self) -> int:
        return self.logits.size


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    k: int = 1
    mode: str = "hard"
    noise: bool = True

    def validate(self, count: int) -> None:
        if self.temperature <= 0:
            raise ValueError("SamplerConfig: temperature must be positive")
        if not 1 <= self.k <= count:
            raise ValueError(f"SamplerConfig: k={self.k} out of range for {count} candidates")
        if self.mode not in MODES:
            raise ValueError(f"SamplerConfig: unknown mode {self.mode!r}")


@dataclass
class SampleResult:
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.intp))
    onehot: Tensor | None = None   # (count,) k-hot; hard value, STE gradient
    soft: Tensor | None = None     # (count,) soft weights
    noise: np.ndarray | None = None


def gumbel_noise(count: int, rng: np.random.Generator) -> np.ndarray:
    """Standard gumbel draws; uniforms clamped away from {0, 1}."""
    if count < 1:
        raise ValueError("gumbel_noise: count must be >= 1")
    u = np.clip(rng.random(count), _CLAMP, 1.0 - _CLAMP)
    return -np.log(-np.log(u))


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values, ties broken toward the lowest index."""
    order = np.argsort(-values, kind="stable")
    return order[:k]


def _resolve_noise(scores: GateScores, cfg: SamplerConfig,
                   rng: np.random.Generator | None,
                   noise: np.ndarray | None) -> np.ndarray:
    if noise is not None:
        g = np.asarray(noise, dtype=np.float64)
        if g.shape != (scores.count,):
            raise ValueError("noise shape does not match candidate count")
        return g
    if not cfg.noise:
        return np.zeros(scores.count)
    if rng is None:
        raise ValueError("noise enabled but no generator supplied")
    return gumbel_noise(scores.count, rng)


def sample_hard(scores: GateScores, cfg: SamplerConfig,
                rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> SampleResult:
    """Top-k of scores plus gumbel noise; the forward value is k-hot, no grad."""
    cfg.validate(scores.count)
    g = _resolve_noise(scores, cfg, rng, noise)
    idx = top_k_indices(scores.logits.data + g, cfg.k)
    khot = np.zeros(scores.count)
    khot[idx] = 1.0
    return SampleResult(indices=idx, onehot=Tensor(khot), noise=g)


def sample_soft(scores: GateScores, cfg: SamplerConfig,
                rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> SampleResult:
    """Softmax of (scores + noise) / temperature; fully differentiable."""
    cfg.validate(scores.count)
    g = _resolve_noise(scores, cfg, rng, noise)
    noisy = T.add(scores.logits, Tensor(g))
    s = T.softmax(noisy, axis=-1, temperature=cfg.temperature)
    idx = top_k_indices(scores.logits.data + g, cfg.k)
    return SampleResult(indices=idx, soft=s, noise=g)


def sample_ste(scores: GateScores, cfg: SamplerConfig,
               rng: np.random.Generator | None = None,
               noise: np.ndarray | None = None) -> SampleResult:
    """Hard k-hot forward, soft backward, computed from one shared softmax.

    The output is khot + (s - detach(s)): the parenthesized term is exactly
    zero elementwise, so the forward value is bitwise equal to the hard
    sample while the gradient is bitwise the soft path's.
    """
    cfg.validate(scores.count)
    g = _resolve_noise(scores, cfg, rng, noise)
    soft_res = sample_soft(scores, cfg, noise=g)
    s = soft_res.soft
    idx = top_k_indices(scores.logits.data + g, cfg.k)
    khot = np.zeros(scores.count)
    khot[idx] = 1.0
    zero_diff = T.add(s, T.scalar_mul(s.detach(), -1.0))
    out = T.add(Tensor(khot), zero_diff)
    return SampleResult(indices=idx, onehot=out, soft=s, noise=g)


def sample(scores: GateScores, cfg: SamplerConfig,
           rng: np.random.Generator | None = None,
           noise: np.ndarray | None = None) -> SampleResult:
    fn = {"hard": sample_hard, "soft": sample_soft, "straight-through": sample_ste}
    cfg.validate(scores.count)
    return fn[cfg.mode](scores, cfg, rng, noise)


def selection_frequencies(logits: np.ndarray, n_draws: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Empirical argmax(logits + gumbel) frequencies over many draws.

    Vectorized version of repeated ``sample_hard`` with k=1; consumes the
    generator in the same row-major order as the per-draw path.
    """
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.shape[0]
    counts = np.zeros(m)
    chunk = 20000
    done = 0
    while done < n_draws:
        n = min(chunk, n_draws - done)
        u = np.clip(rng.random((n, m)), _CLAMP, 1.0 - _CLAMP)
        g = -np.log(-np.log(u))
        picks = np.argmax(logits + g, axis=1)
        counts += np.bincount(picks, minlength=m)
        done += n
    return counts / n_draws


def pooled_conditioning_scores(x: Tensor, channel_embeddings: Tensor,
                               head) -> GateScores:
    """Affinity scores between a pooled input summary and candidate embeddings.

    ``x`` is a feature map (positions stacked rowwise, or h by w by d);
    positions are summed, pushed through the trainable head, and dotted
    with each candidate embedding.
    """
    if x.ndim == 3:
        x = T.reshape(x, (x.shape[0] * x.shape[1], x.shape[2]))
    elif x.ndim != 2:
        raise ValueError(f"pooled_conditioning_scores: bad feature map shape {x.shape}")
    pooled = T.tsum(x, axis=0)
    v = head(T.reshape(pooled, (1, x.shape[1])))
    if v.ndim != 2 or v.shape[0] != 1:
        raise ValueError("head must map (1, d) to (1, d_emb)")
    if channel_embeddings.ndim != 2 or channel_embeddings.shape[1] != v.shape[1]:
        raise ValueError(
            f"embedding dim {channel_embeddings.shape} does not match head output {v.shape}")
    scores = T.matmul(channel_embeddings, T.transpose(v))
    return GateScores(T.reshape(scores, (channel_embeddings.shape[0],)))
