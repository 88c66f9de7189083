"""Small pre-norm transformer with pluggable conditional mechanisms.

Each block is multi-head self-attention plus a feed-forward sublayer; per
block the spec may add one mechanism:

* ``moe``: the feed-forward is a bank of routed experts (width sparsity)
* ``skip``: a scalar gate can bypass the whole block (depth sparsity)
* ``token-select``: a score head drops tokens before the block (input
  sparsity)

plus optional exit heads between blocks (depth sparsity via halting).
Training flows every token through every block (dead tokens masked);
inference physically gathers survivors, halts at confident exits, and
skips gated-off blocks, so the recorded trace reflects real savings.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .exits import EENNConfig, PooledClassifier, PooledGate, confidence_value
from .moe import MoELayer
from .nn import MLP, LayerNorm, Linear, Module
from .routing import NEG_MASK, RouterConfig, RoutingAssignment, balancing_loss
from .tensor import Tensor
from .tokens import ScoreHead, build_drop_mask, ste_keep_weights

MECHANISMS = ("none", "moe", "skip", "token-select")


@dataclass
class BlockSpec:
    mechanism: str = "none"
    keep_tokens: int | None = None   # token-select only
    exit_head: bool = False


@dataclass
class ModelSpec:
    d_in: int
    n_tokens: int
    blocks: list[BlockSpec]
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    n_classes: int = 2
    positional: bool = False
    n_experts: int = 4
    expert_hidden: int = 32
    router_k: int = 1
    router_strategy: str = "token-choice"
    router_temperature: float = 1.0
    router_gate_values: str = "renormalized"
    router_conditioning: str = "hidden"   # or "input": route on raw tokens
    score_hidden: int = 16

    def __post_init__(self) -> None:
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("ModelSpec: need at least one block")
        if self.d_model % self.n_heads != 0:
            raise ValueError("ModelSpec: d_model must be divisible by n_heads")
        if min(self.d_in, self.n_tokens, self.n_classes) < 1:
            raise ValueError("ModelSpec: dimensions must be positive")
        if self.blocks[-1].exit_head:
            raise ValueError("ModelSpec: exit head after the final block is invalid; "
                             "the final classifier plays that role")
        if self.router_conditioning not in ("hidden", "input"):
            raise ValueError(
                f"ModelSpec: unknown router conditioning {self.router_conditioning!r}")
        alive = self.n_tokens
        for i, blk in enumerate(self.blocks):
            if blk.mechanism not in MECHANISMS:
                raise ValueError(f"ModelSpec: unknown mechanism {blk.mechanism!r}")
            if blk.mechanism == "token-select":
                if blk.keep_tokens is None or not 1 <= blk.keep_tokens <= alive:
                    raise ValueError(
                        f"ModelSpec: block {i} keep_tokens={blk.keep_tokens} "
                        f"invalid with {alive} tokens alive")
                alive = blk.keep_tokens
            elif blk.keep_tokens is not None:
                raise ValueError(f"ModelSpec: block {i} sets keep_tokens "
                                 f"without token-select")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["blocks"] = [BlockSpec(**b) for b in d["blocks"]]
        return cls(**d)


@dataclass
class BlockTraceEntry:
    index: int
    mechanism: str
    n_in: int                 # alive tokens before this block's selection
    n_run: int                # alive tokens the block actually processed
    executed: bool = True     # False when a skip gate bypassed the block
    kept: list[int] | None = None
    moe_pair_counts: list[int] | None = None
    gate: float | None = None


@dataclass
class ForwardTrace:
    n_tokens_in: int
    blocks: list[BlockTraceEntry] = field(default_factory=list)
    exit_index: int | None = None    # 1-based over exits, depth+... final = n_exits
    confidence: float | None = None
    exit_head_evals: int = 0
    final_head_eval: bool = False
    assignments: list[tuple[int, RoutingAssignment]] = field(default_factory=list)

    def alive_per_layer(self) -> list[list[int]]:
        return [e.kept for e in self.blocks if e.kept is not None]


class TransformerBlock(Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int,
                 rng: np.random.Generator, ff: Module | None = None) -> None:
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("TransformerBlock: d_model must divide into heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_h = d_model // n_heads
        self.ln1 = self.child("ln1", LayerNorm(d_model))
        self.ln2 = self.child("ln2", LayerNorm(d_model))
        self.head_projs = []
        for h in range(n_heads):
            q = self.child(f"h{h}.q", Linear(d_model, self.d_h, rng, bias=False))
            k = self.child(f"h{h}.k", Linear(d_model, self.d_h, rng, bias=False))
            v = self.child(f"h{h}.v", Linear(d_model, self.d_h, rng, bias=False))
            self.head_projs.append((q, k, v))
        self.out_proj = self.child("out", Linear(d_model, d_model, rng))
        self.ff = self.child("ff", ff if ff is not None
                             else MLP([d_model, d_ff, d_model], rng))

    def attention(self, x: Tensor, alive=None) -> Tensor:
        """Pre-norm multi-head self-attention with residual; dead keys are
        masked to -inf before the softmax."""
        n = x.shape[0]
        mask_row = None
        if alive is not None:
            alive = np.asarray(alive, dtype=bool)
            if alive.shape[0] != n:
                raise ValueError(f"attention: alive mask length {alive.shape[0]} "
                                 f"does not match {n} tokens")
            if not alive.any():
                raise ValueError("attention: all tokens dead")
            if alive.all():
                mask_row = None
            else:
                mask_row = np.where(alive, 0.0, NEG_MASK)
        h = self.ln1(x)
        scale = 1.0 / np.sqrt(self.d_h)
        outs = []
        for q_l, k_l, v_l in self.head_projs:
            q, k, v = q_l(h), k_l(h), v_l(h)
            scores = T.scalar_mul(T.matmul(q, T.transpose(k)), scale)
            if mask_row is not None:
                scores = T.add(scores, Tensor(np.broadcast_to(mask_row, (n, n)).copy()))
            att = T.softmax(scores, axis=1)
            outs.append(T.matmul(att, v))
        merged = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
        return T.add(x, self.out_proj(merged))

    def ff_residual(self, x: Tensor) -> Tensor:
        return T.add(x, self.ff(self.ln2(x)))

    def forward(self, x: Tensor, alive=None) -> Tensor:
        return self.ff_residual(self.attention(x, alive))


def attention_forward(block: TransformerBlock, x: Tensor, alive=None) -> Tensor:
    return block.attention(x, alive)


class ConditionalTransformer(Module):
    """Block stack with per-block mechanisms, exit heads, and trace capture."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator) -> None:
        super().__init__()
        spec.validate()
        self.spec = spec
        self.input_proj = self.child("input_proj", Linear(spec.d_in, spec.d_model, rng))
        self.positional = None
        if spec.positional:
            self.positional = self.param(
                "positional",
                Tensor(rng.normal(0.0, 0.1, (spec.n_tokens, spec.d_model)),
                       requires_grad=True))
        self.blocks: list[TransformerBlock] = []
        self.moe_layers: dict[int, MoELayer] = {}
        self.score_heads: dict[int, ScoreHead] = {}
        self.gate_heads: dict[int, PooledGate] = {}
        self.exit_heads: dict[int, PooledClassifier] = {}
        for i, blk in enumerate(spec.blocks):
            block = TransformerBlock(spec.d_model, spec.n_heads, spec.d_ff, rng)
            self.blocks.append(self.child(f"block{i}", block))
            if blk.mechanism == "moe":
                router = RouterConfig(n_experts=spec.n_experts, k=spec.router_k,
                                      strategy=spec.router_strategy,
                                      temperature=spec.router_temperature,
                                      gate_values=spec.router_gate_values)
                layer = MoELayer(spec.n_experts, spec.d_model, spec.expert_hidden,
                                 spec.d_model, router, rng, variant="sparse",
                                 emb_dim=(spec.d_in
                                          if spec.router_conditioning == "input"
                                          else None))
                self.moe_layers[i] = self.child(f"moe{i}", layer)
            elif blk.mechanism == "token-select":
                self.score_heads[i] = self.child(
                    f"score{i}", ScoreHead(spec.d_model, spec.score_hidden, rng))
            elif blk.mechanism == "skip":
                self.gate_heads[i] = self.child(f"gate{i}", PooledGate(spec.d_model, rng))
            if blk.exit_head:
                self.exit_heads[i] = self.child(
                    f"exit{i}", PooledClassifier(spec.d_model, spec.n_classes, rng))
        self.final_head = self.child(
            "final", PooledClassifier(spec.d_model, spec.n_classes, rng))

    # -- shared pieces ------------------------------------------------------

    def n_exits(self) -> int:
        return len(self.exit_heads) + 1

    def _embed(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.spec.d_in:
            raise ValueError(f"expected (n_tokens, {self.spec.d_in}) input, got {x.shape}")
        h = self.input_proj(x)
        if self.positional is not None:
            if x.shape[0] > self.spec.n_tokens:
                raise ValueError("more tokens than positional table rows")
            h = T.add(h, T.gather_rows(self.positional, np.arange(x.shape[0])))
        return h

    def _moe_ff(self, i: int, x: Tensor, alive_idx: np.ndarray | None,
                rng, mode: str, cond: Tensor | None = None,
                ) -> tuple[Tensor, RoutingAssignment]:
        """Pre-norm MoE feed-forward with residual, restricted to alive rows.

        ``cond`` (same rows as x) decouples the routing input from the
        expert input when the spec asks for raw-input conditioning.
        """
        layer = self.moe_layers[i]
        if alive_idx is None:
            h = self.blocks[i].ln2(x)
            out, assign = layer.forward_sparse(h, rng=rng, mode=mode, cond=cond)
            return T.add(x, out), assign
        rows = T.gather_rows(x, alive_idx)
        h = self.blocks[i].ln2(rows)
        sub_cond = None if cond is None else T.gather_rows(cond, alive_idx)
        out, assign = layer.forward_sparse(h, rng=rng, mode=mode, cond=sub_cond)
        return T.add(x, T.scatter_rows(out, alive_idx, x.shape[0])), assign

    # -- training path -------------------------------------------------------

    def train_forward(self, x: Tensor, rng: np.random.Generator,
                      tau: float = 1.0, stochastic: bool = True,
                      ) -> tuple[list[Tensor], dict]:
        """Masked differentiable pass emitting every exit's logits.

        Token selection multiplies rows by straight-through keep weights
        (gradient reaches the score head), skip gates stay soft, and MoE
        balancing terms are collected for the loss.
        """
        h = self._embed(x)
        n = h.shape[0]
        raw = x if self.spec.router_conditioning == "input" else None
        alive = np.ones(n, dtype=bool)
        preds: list[Tensor] = []
        aux: dict = {"assignments": [], "keep": [], "gates": [], "balance": []}
        mode = "stochastic" if stochastic else "greedy"
        for i, blk_spec in enumerate(self.spec.blocks):
            block = self.blocks[i]
            if blk_spec.mechanism == "token-select":
                scores = self.score_heads[i](h)
                alive_idx = np.flatnonzero(alive)
                sub_scores = T.gather_rows(scores, alive_idx)
                if stochastic:
                    keep_w, kept_local = ste_keep_weights(
                        sub_scores, blk_spec.keep_tokens, rng, temperature=tau)
                else:
                    keep_w, kept_local = ste_keep_weights(
                        sub_scores, blk_spec.keep_tokens, rng, temperature=tau,
                        noise=np.zeros(alive_idx.size))
                kept_global = alive_idx[kept_local]
                weights = T.scatter_rows(T.reshape(keep_w, (alive_idx.size, 1)),
                                         alive_idx, n)
                h = T.mul(h, T.broadcast_to(weights, h.shape))
                alive = np.zeros(n, dtype=bool)
                alive[kept_global] = True
                aux["keep"].append((i, kept_global))
            if blk_spec.mechanism == "skip":
                gate = self.gate_heads[i](h, alive=alive)
                body = block(h, alive=alive)
                gb = T.broadcast_to(T.reshape(gate, (1, 1)), h.shape)
                inv = T.add(T.scalar_mul(gb, -1.0), Tensor(np.ones(h.shape)))
                h = T.add(T.mul(gb, body), T.mul(inv, h))
                aux["gates"].append((i, gate))
            elif blk_spec.mechanism == "moe":
                h = block.attention(h, alive=alive)
                alive_idx = np.flatnonzero(alive)
                h, assign = self._moe_ff(i, h, alive_idx, rng, mode, cond=raw)
                aux["assignments"].append((i, assign))
                aux["balance"].append(balancing_loss(assign))
            else:
                h = block(h, alive=alive)
            if blk_spec.exit_head:
                preds.append(self.exit_heads[i](h, alive=alive))
        preds.append(self.final_head(h, alive=alive))
        return preds, aux

    # -- inference path -------------------------------------------------------

    def infer(self, x: Tensor, exit_cfg: EENNConfig | None = None,
              rng: np.random.Generator | None = None,
              routing_mode: str = "greedy") -> tuple[Tensor, ForwardTrace]:
        """Physical conditional pass: gathers kept tokens, skips gated-off
        blocks, halts at confident exits. Returns final logits and the
        decision trace that prices the consumed compute."""
        h = self._embed(x)
        raw = x if self.spec.router_conditioning == "input" else None
        orig_idx = np.arange(h.shape[0])
        trace = ForwardTrace(n_tokens_in=x.shape[0])
        exit_seq = 0
        for i, blk_spec in enumerate(self.spec.blocks):
            block = self.blocks[i]
            entry = BlockTraceEntry(index=i, mechanism=blk_spec.mechanism,
                                    n_in=h.shape[0], n_run=h.shape[0])
            if blk_spec.mechanism == "token-select":
                scores = self.score_heads[i](h)
                if routing_mode == "stochastic":
                    if rng is None:
                        raise ValueError("stochastic selection needs a generator")
                    mask = build_drop_mask(scores, blk_spec.keep_tokens,
                                           mode="stochastic", rng=rng)
                else:
                    mask = build_drop_mask(scores, blk_spec.keep_tokens)
                h = T.gather_rows(h, mask.kept)
                if raw is not None:
                    raw = T.gather_rows(raw, mask.kept)
                orig_idx = orig_idx[mask.kept]
                entry.kept = [int(t) for t in orig_idx]
                entry.n_run = h.shape[0]
            if blk_spec.mechanism == "skip":
                gate = float(self.gate_heads[i](h).data[0])
                entry.gate = gate
                if gate >= 0.5:
                    h = block(h)
                else:
                    entry.executed = False
            elif blk_spec.mechanism == "moe":
                h = block.attention(h)
                h, assign = self._moe_ff(i, h, None, rng, routing_mode, cond=raw)
                entry.moe_pair_counts = [len(ix) for ix in assign.per_expert]
                trace.assignments.append((i, assign))
            else:
                h = block(h)
            trace.blocks.append(entry)
            if blk_spec.exit_head:
                exit_seq += 1
                logits = self.exit_heads[i](h)
                trace.exit_head_evals += 1
                if exit_cfg is not None:
                    conf = confidence_value(logits.data, exit_cfg.halting)
                    if conf >= exit_cfg.threshold:
                        trace.exit_index = exit_seq
                        trace.confidence = conf
                        return logits, trace
        logits = self.final_head(h)
        trace.final_head_eval = True
        trace.exit_index = exit_seq + 1
        trace.confidence = confidence_value(
            logits.data, exit_cfg.halting if exit_cfg else "max-prob")
        return logits, trace

    # -- dual-path selection forward (masked vs gathered equivalence) --------

    def selection_forward(self, x: Tensor, decisions, physical: bool) -> Tensor:
        """Run with externally fixed keep decisions at each token-select
        point; masked and physical modes must agree on the output."""
        decisions = list(decisions)
        h = self._embed(x)
        raw = x if self.spec.router_conditioning == "input" else None
        n = h.shape[0]
        alive = np.ones(n, dtype=bool)
        orig_idx = np.arange(n)
        d = 0
        for i, blk_spec in enumerate(self.spec.blocks):
            block = self.blocks[i]
            if blk_spec.mechanism == "token-select":
                if d >= len(decisions):
                    raise ValueError("selection_forward: missing keep decision")
                keep = np.asarray(decisions[d], dtype=np.intp)
                d += 1
                if physical:
                    local = np.searchsorted(orig_idx, np.sort(keep))
                    if not np.array_equal(orig_idx[local], np.sort(keep)):
                        raise ValueError("selection_forward: decision revives a dropped token")
                    h = T.gather_rows(h, local)
                    if raw is not None:
                        raw = T.gather_rows(raw, local)
                    orig_idx = orig_idx[local]
                else:
                    if np.setdiff1d(keep, np.flatnonzero(alive)).size:
                        raise ValueError("selection_forward: decision revives a dropped token")
                    alive = np.zeros(n, dtype=bool)
                    alive[keep] = True
                    h = T.mask_rows(h, alive.astype(float))
            if blk_spec.mechanism == "moe":
                if physical:
                    h = block.attention(h)
                    h, _ = self._moe_ff(i, h, None, None, "greedy", cond=raw)
                else:
                    h = block.attention(h, alive=alive)
                    h, _ = self._moe_ff(i, h, np.flatnonzero(alive), None,
                                        "greedy", cond=raw)
            elif blk_spec.mechanism == "skip":
                raise ValueError("selection_forward does not support skip blocks")
            else:
                h = block(h, alive=None if physical else alive)
        if physical:
            return self.final_head(h)
        return self.final_head(h, alive=alive)

    def parameter_set(self):
        from .optim import ParameterSet
        return ParameterSet(self.named_parameters())


def assemble(spec: ModelSpec, rng: np.random.Generator) -> ConditionalTransformer:
    """Build the block stack with every configured mechanism in place."""
    return ConditionalTransformer(spec, rng)
