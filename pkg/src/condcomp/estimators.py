"""Sklearn-style classifier over the conditional transformer.

``ConditionalTransformerClassifier`` wraps model assembly, the training
loop, and conditional inference behind fit/predict/predict_proba/score so
the toolkit drops into ordinary sklearn workflows (get_params/set_params,
clone, pipelines operating on 3D token arrays).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .datasets import SyntheticDataset
from .exits import EENNConfig
from .flops import dynamic_cost, static_cost
from .tensor import Tensor
from .training import TrainSettings, evaluate_model, train_model
from .transformer import BlockSpec, ModelSpec, assemble
from .validation import check_fitted, check_labels, check_token_array

MECHANISM_CHOICES = ("none", "moe", "skip", "token-select", "early-exit")


class ConditionalTransformerClassifier(BaseEstimator, ClassifierMixin):
    """Token-set classifier with one conditional-compute mechanism enabled.

    mechanism:
      * "none": plain transformer
      * "moe": every block's feed-forward is a routed expert bank
      * "skip": every block can be bypassed by a trained gate
      * "token-select": tokens are dropped before the first block
      * "early-exit": exit heads after every non-final block; inference
        halts once the confidence rule crosses ``exit_threshold``

    ``block_mechanisms`` overrides ``mechanism`` with an explicit per-block
    list for mixed configurations.
    """

    model_ = None

    def __init__(self, mechanism: str = "none", depth: int = 2,
                 d_model: int = 32, n_heads: int = 2, d_ff: int = 64,
                 positional: bool = False,
                 n_experts: int = 4, expert_hidden: int = 32, router_k: int = 1,
                 router_strategy: str = "token-choice",
                 router_temperature: float = 1.0, balance_weight: float = 0.0,
                 keep_tokens: int | None = None, score_hidden: int = 16,
                 exit_threshold: float = 0.9, halting: str = "max-prob",
                 exit_alpha: float = 1.0, exit_betas: tuple | None = None,
                 epochs: int = 15, batch_size: int = 16, lr: float = 0.01,
                 optimizer: str = "adam", tau_start: float = 5.0,
                 tau_end: float = 0.5, stochastic: bool = True,
                 block_mechanisms: list | None = None, random_state: int = 0):
        self.mechanism = mechanism
        self.depth = depth
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.positional = positional
        self.n_experts = n_experts
        self.expert_hidden = expert_hidden
        self.router_k = router_k
        self.router_strategy = router_strategy
        self.router_temperature = router_temperature
        self.balance_weight = balance_weight
        self.keep_tokens = keep_tokens
        self.score_hidden = score_hidden
        self.exit_threshold = exit_threshold
        self.halting = halting
        self.exit_alpha = exit_alpha
        self.exit_betas = exit_betas
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.optimizer = optimizer
        self.tau_start = tau_start
        self.tau_end = tau_end
        self.stochastic = stochastic
        self.block_mechanisms = block_mechanisms
        self.random_state = random_state

    # -- spec construction ---------------------------------------------------

    def _block_specs(self) -> list[BlockSpec]:
        if self.block_mechanisms is not None:
            return [b if isinstance(b, BlockSpec) else BlockSpec(**b)
                    for b in self.block_mechanisms]
        if self.mechanism not in MECHANISM_CHOICES:
            raise ValueError(f"unknown mechanism {self.mechanism!r}; "
                             f"choose from {MECHANISM_CHOICES}")
        blocks = []
        for i in range(self.depth):
            if self.mechanism == "early-exit":
                blocks.append(BlockSpec(exit_head=i < self.depth - 1))
            elif self.mechanism == "token-select" and i == 0:
                blocks.append(BlockSpec(mechanism="token-select",
                                        keep_tokens=self.keep_tokens))
            elif self.mechanism in ("moe", "skip"):
                blocks.append(BlockSpec(mechanism=self.mechanism))
            else:
                blocks.append(BlockSpec())
        return blocks

    def _build_spec(self, n_tokens: int, dim: int, n_classes: int) -> ModelSpec:
        return ModelSpec(d_in=dim, n_tokens=n_tokens, blocks=self._block_specs(),
                         d_model=self.d_model, n_heads=self.n_heads,
                         d_ff=self.d_ff, n_classes=n_classes,
                         positional=self.positional, n_experts=self.n_experts,
                         expert_hidden=self.expert_hidden, router_k=self.router_k,
                         router_strategy=self.router_strategy,
                         router_temperature=self.router_temperature,
                         score_hidden=self.score_hidden)

    def _exit_cfg(self) -> EENNConfig | None:
        if self.model_ is None or not self.model_.exit_heads:
            return None
        return EENNConfig(alpha=self.exit_alpha,
                          betas=(1.0,) * len(self.model_.exit_heads),
                          halting=self.halting, threshold=self.exit_threshold)

    # -- sklearn API -----------------------------------------------------------

    def fit(self, X, y):
        X = check_token_array(X)
        y = check_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[2]
        self.n_tokens_in_ = X.shape[1]
        spec = self._build_spec(X.shape[1], X.shape[2], len(self.classes_))
        rng = np.random.default_rng(self.random_state)
        self.model_ = assemble(spec, rng)
        settings = TrainSettings(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            optimizer=self.optimizer, balance_weight=self.balance_weight,
            exit_alpha=self.exit_alpha,
            exit_betas=tuple(self.exit_betas) if self.exit_betas else None,
            tau_start=self.tau_start, tau_end=self.tau_end,
            stochastic=self.stochastic)
        data = SyntheticDataset("user", {}, self.random_state, X,
                                encoded.astype(np.intp), [{} for _ in range(len(y))])
        self.history_ = train_model(self.model_, data, settings,
                                    seed=self.random_state + 1)
        self.spec_ = spec
        return self

    def decision_logits(self, X) -> np.ndarray:
        check_fitted(self)
        X = check_token_array(X, dim=self.n_features_in_)
        exit_cfg = self._exit_cfg()
        rng = np.random.default_rng(self.random_state + 2)
        out = np.empty((X.shape[0], len(self.classes_)))
        for i in range(X.shape[0]):
            logits, _ = self.model_.infer(Tensor(X[i]), exit_cfg=exit_cfg, rng=rng)
            out[i] = logits.data
        return out

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_logits(X)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_logits(X)
        return self.classes_[np.argmax(logits, axis=1)]

    # -- compute accounting ----------------------------------------------------

    def mean_inference_macs(self, X) -> float:
        check_fitted(self)
        X = check_token_array(X, dim=self.n_features_in_)
        exit_cfg = self._exit_cfg()
        rng = np.random.default_rng(self.random_state + 2)
        macs = []
        for i in range(X.shape[0]):
            _, trace = self.model_.infer(Tensor(X[i]), exit_cfg=exit_cfg, rng=rng)
            macs.append(dynamic_cost(self.spec_, trace).total_macs)
        return float(np.mean(macs))

    def static_macs(self) -> int:
        check_fitted(self)
        return static_cost(self.spec_).total_macs

    def evaluate(self, X, y):
        """Full metrics record plus decision logs on labeled data."""
        check_fitted(self)
        X = check_token_array(X, dim=self.n_features_in_)
        y = check_labels(y, X.shape[0])
        encoded = np.searchsorted(self.classes_, y)
        data = SyntheticDataset("user", {}, 0, X, encoded.astype(np.intp),
                                [{} for _ in range(len(y))])
        rng = np.random.default_rng(self.random_state + 2)
        return evaluate_model(self.model_, data, exit_cfg=self._exit_cfg(), rng=rng)
