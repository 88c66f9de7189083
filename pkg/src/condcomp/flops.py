"""Analytic MAC cost model and decision-trace accounting.

Conventions: one MAC per scalar multiply-accumulate inside a matrix
multiplication. Bias additions, softmaxes, normalizations, and
nonlinearities are element-ops, tallied separately and never mixed into
MAC totals. Gathers, scatters, and masking are free.

The analytic formulas below mirror the matrix multiplications the model
actually executes, so a ``MacMeter`` measurement of an inference pass must
equal ``dynamic_cost`` of its trace exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .exits import EENNConfig
from .tensor import Tensor


@dataclass
class FlopReport:
    layers: list[tuple[str, int]] = field(default_factory=list)
    element_ops: int = 0

    def add(self, name: str, macs: int) -> None:
        self.layers.append((name, int(macs)))

    @property
    def total_macs(self) -> int:
        return sum(m for _, m in self.layers)

    def by_layer(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for name, macs in self.layers:
            out[name] = out.get(name, 0) + macs
        return out


def linear_macs(n_rows: int, d_in: int, d_out: int) -> int:
    return n_rows * d_in * d_out


def attention_macs(n: int, d_model: int, n_heads: int) -> int:
    """h * (2 n^2 d_h + 4 n d d_h): scores + mixing plus q/k/v/out projections."""
    d_h = d_model // n_heads
    return n_heads * (2 * n * n * d_h + 4 * n * d_model * d_h)


def attention_element_ops(n: int, n_heads: int) -> int:
    return n_heads * n * n  # one softmax entry per score


def ff_macs(n: int, d_model: int, d_ff: int) -> int:
    return 2 * n * d_model * d_ff


def expert_macs(d_in: int, d_hidden: int, d_out: int) -> int:
    return d_in * d_hidden + d_hidden * d_out


def score_head_macs(n: int, d_model: int, d_hidden: int) -> int:
    return n * (d_model * d_hidden + d_hidden)


def _block_element_ops(spec, n: int) -> int:
    ops = 2 * n * spec.d_model            # two layer norms
    ops += attention_element_ops(n, spec.n_heads)
    ops += n * spec.d_ff                  # feed-forward nonlinearity
    return ops


def static_cost(spec, n_tok: int | None = None) -> FlopReport:
    """Dense-path totals: no drops, no exits taken, every expert on every
    token, every gated block executed."""
    n = spec.n_tokens if n_tok is None else n_tok
    report = FlopReport()
    report.add("input_proj", linear_macs(n, spec.d_in, spec.d_model))
    for i, blk in enumerate(spec.blocks):
        name = f"block{i}"
        if blk.mechanism == "token-select":
            report.add(f"{name}.score_head",
                       score_head_macs(n, spec.d_model, spec.score_hidden))
        if blk.mechanism == "skip":
            report.add(f"{name}.gate_head", spec.d_model)
        report.add(f"{name}.attention", attention_macs(n, spec.d_model, spec.n_heads))
        if blk.mechanism == "moe":
            report.add(f"{name}.router", linear_macs(n, spec.d_model, spec.n_experts))
            per_eval = expert_macs(spec.d_model, spec.expert_hidden, spec.d_model)
            report.add(f"{name}.experts", n * spec.n_experts * per_eval)
            report.element_ops += n * spec.n_experts * spec.expert_hidden
            report.element_ops += 2 * n * spec.d_model
            report.element_ops += attention_element_ops(n, spec.n_heads)
        else:
            report.add(f"{name}.ff", ff_macs(n, spec.d_model, spec.d_ff))
            report.element_ops += _block_element_ops(spec, n)
        if blk.exit_head:
            report.add(f"exit{i}", spec.d_model * spec.n_classes)
    report.add("final_head", spec.d_model * spec.n_classes)
    return report


def dynamic_cost(spec, trace) -> FlopReport:
    """Price exactly the work a ForwardTrace says was executed."""
    report = FlopReport()
    report.add("input_proj", linear_macs(trace.n_tokens_in, spec.d_in, spec.d_model))
    per_eval = expert_macs(spec.d_model, spec.expert_hidden, spec.d_model)
    for entry in trace.blocks:
        name = f"block{entry.index}"
        blk = spec.blocks[entry.index]
        n = entry.n_run
        if blk.mechanism == "token-select":
            report.add(f"{name}.score_head",
                       score_head_macs(entry.n_in, spec.d_model, spec.score_hidden))
        if blk.mechanism == "skip":
            report.add(f"{name}.gate_head", spec.d_model)
            if not entry.executed:
                continue
        report.add(f"{name}.attention", attention_macs(n, spec.d_model, spec.n_heads))
        if blk.mechanism == "moe":
            report.add(f"{name}.router", linear_macs(n, spec.d_model, spec.n_experts))
            pairs = sum(entry.moe_pair_counts or [])
            report.add(f"{name}.experts", pairs * per_eval)
            report.element_ops += pairs * spec.expert_hidden
            report.element_ops += 2 * n * spec.d_model
            report.element_ops += attention_element_ops(n, spec.n_heads)
        else:
            report.add(f"{name}.ff", ff_macs(n, spec.d_model, spec.d_ff))
            report.element_ops += _block_element_ops(spec, n)
    if trace.exit_head_evals:
        report.add("exit_heads",
                   trace.exit_head_evals * spec.d_model * spec.n_classes)
    if trace.final_head_eval:
        report.add("final_head", spec.d_model * spec.n_classes)
    return report


def check_trace(spec, trace) -> None:
    """Reject traces that could not have come from this spec."""
    if len(trace.blocks) > len(spec.blocks):
        raise ValueError("trace has more block entries than the spec has blocks")
    for entry in trace.blocks:
        if entry.index >= len(spec.blocks):
            raise ValueError(f"trace block index {entry.index} out of range")
        blk = spec.blocks[entry.index]
        if entry.mechanism != blk.mechanism:
            raise ValueError(
                f"trace mechanism {entry.mechanism!r} does not match spec "
                f"{blk.mechanism!r} at block {entry.index}")
        if entry.n_run > spec.n_tokens or entry.n_in > spec.n_tokens:
            raise ValueError("trace token count exceeds the spec's token budget")
        if blk.mechanism == "moe" and entry.moe_pair_counts is not None:
            if max(entry.moe_pair_counts, default=0) > entry.n_run:
                raise ValueError("trace routes more tokens to an expert than exist")


def mean_dynamic_macs(spec, traces) -> float:
    return float(np.mean([dynamic_cost(spec, t).total_macs for t in traces]))


CURVE_HEADER = ("knob", "value", "mean_macs", "accuracy", "n_samples", "seed")


def tradeoff_sweep(model, X, y, knob: str, values, seed: int,
                   halting: str = "max-prob") -> list[dict]:
    """Accuracy vs mean dynamic MACs along one conditional-compute knob.

    knob "ee-threshold" sweeps the early-exit confidence threshold,
    "router-k" the number of experts per token, "keep-ratio" the kept
    fraction at every token-select point.
    """
    spec = model.spec
    saved_keep = [blk.keep_tokens for blk in spec.blocks]
    saved_k = {i: layer.router.k for i, layer in model.moe_layers.items()}
    rows = []
    for value in values:
        exit_cfg = None
        if knob == "ee-threshold":
            if not model.exit_heads:
                raise ValueError("ee-threshold sweep needs exit heads")
            exit_cfg = EENNConfig(alpha=1.0, betas=(0.0,) * len(model.exit_heads),
                                  halting=halting, threshold=float(value))
        elif knob == "router-k":
            k = int(value)
            for layer in model.moe_layers.values():
                if not 1 <= k <= layer.n_experts:
                    raise ValueError(f"router-k {k} out of range")
                layer.router.k = k
        elif knob == "keep-ratio":
            ratio = float(value)
            if not 0.0 < ratio <= 1.0:
                raise ValueError(f"keep-ratio {ratio} out of range")
            alive = spec.n_tokens
            for blk in spec.blocks:
                if blk.mechanism == "token-select":
                    blk.keep_tokens = max(1, int(round(ratio * alive)))
                    alive = blk.keep_tokens
        else:
            raise ValueError(f"unknown sweep knob {knob!r}")

        rng = np.random.default_rng(seed)
        correct = 0
        macs = []
        for i in range(X.shape[0]):
            logits, trace = model.infer(Tensor(X[i]), exit_cfg=exit_cfg, rng=rng)
            if int(np.argmax(logits.data)) == int(y[i]):
                correct += 1
            macs.append(dynamic_cost(spec, trace).total_macs)
        rows.append({"knob": knob, "value": float(value),
                     "mean_macs": float(np.mean(macs)),
                     "accuracy": correct / X.shape[0],
                     "n_samples": int(X.shape[0]), "seed": seed})
    for blk, keep in zip(spec.blocks, saved_keep):
        blk.keep_tokens = keep
    for i, k in saved_k.items():
        model.moe_layers[i].router.k = k
    return rows


def write_curve_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
