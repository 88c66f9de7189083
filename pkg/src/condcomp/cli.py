"""Command-line entry point: train, eval, sweep, sample-test, flops.

Exit codes: 0 success, 1 validation error (bad config, bad arguments),
2 runtime failure (divergence, IO trouble mid-run). All outputs are
byte-deterministic given (config, seed).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .datasets import generate
from .flops import dynamic_cost, static_cost, tradeoff_sweep, write_curve_csv
from .sampling import selection_frequencies
from .tensor import Tensor
from .training import (
    TrainingDiverged,
    evaluate_model,
    load_checkpoint,
    save_checkpoint,
    train_model,
)
from .transformer import assemble

VALIDATION_EXIT = 1
RUNTIME_EXIT = 2


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(config_path: str, seed: int | None, out: str | None) -> ExperimentConfig:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        _fail(VALIDATION_EXIT, str(exc))
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out_dir = out
    return cfg


def _prepare(cfg: ExperimentConfig):
    data = generate(cfg.dataset_id, cfg.dataset_params, cfg.seed)
    train, test = data.split(cfg.train_fraction)
    try:
        spec = cfg.model_spec(data.dim, data.n_tokens, data.n_classes)
    except ConfigError as exc:
        _fail(VALIDATION_EXIT, str(exc))
    model = assemble(spec, np.random.default_rng(cfg.seed))
    return data, train, test, spec, model


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


@click.group()
def main() -> None:
    """Conditional-computation toolkit."""


_config_opt = click.option("--config", "config_path", required=True,
                           type=click.Path(), help="TOML experiment config")
_seed_opt = click.option("--seed", type=int, default=None,
                         help="override the config seed")
_out_opt = click.option("--out", type=click.Path(), default=None,
                        help="override the config output directory")


@main.command()
@_config_opt
@_seed_opt
@_out_opt
def train(config_path, seed, out) -> None:
    """Train a model and write metrics, logs, and a checkpoint."""
    cfg = _load(config_path, seed, out)
    _, train_split, test_split, spec, model = _prepare(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        history = train_model(model, train_split, cfg.train, seed=cfg.seed + 1)
    except TrainingDiverged as exc:
        _fail(RUNTIME_EXIT, str(exc))
    exit_cfg = cfg.exit_config(len(model.exit_heads))
    record, logs = evaluate_model(model, test_split, exit_cfg=exit_cfg,
                                  rng=np.random.default_rng(cfg.seed + 2),
                                  epoch=max(cfg.train.epochs - 1, 0), split="test")
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for rec in history:
            fh.write(rec.to_json() + "\n")
        fh.write(record.to_json() + "\n")
    for name, records in logs.items():
        _write_jsonl(out_dir / f"{name}.jsonl", records)
    save_checkpoint(out_dir / "model.ckpt", model.parameter_set(), spec.to_dict())
    click.echo(f"trained {cfg.train.epochs} epochs; "
               f"test accuracy {record.accuracy:.4f}; outputs in {out_dir}")


@main.command("eval")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--checkpoint", type=click.Path(), default=None,
              help="checkpoint to load (default: <out_dir>/model.ckpt)")
def eval_cmd(config_path, seed, out, checkpoint) -> None:
    """Evaluate a trained checkpoint and write metrics plus decision logs."""
    cfg = _load(config_path, seed, out)
    _, _, test_split, spec, model = _prepare(cfg)
    ckpt = Path(checkpoint) if checkpoint else Path(cfg.out_dir) / "model.ckpt"
    if not ckpt.exists():
        _fail(VALIDATION_EXIT, f"checkpoint not found: {ckpt}")
    try:
        arrays, _ = load_checkpoint(ckpt)
        model.parameter_set().load_arrays(arrays)
    except (ValueError, KeyError) as exc:
        _fail(RUNTIME_EXIT, f"cannot load checkpoint: {exc}")
    exit_cfg = cfg.exit_config(len(model.exit_heads))
    record, logs = evaluate_model(model, test_split, exit_cfg=exit_cfg,
                                  rng=np.random.default_rng(cfg.seed + 2),
                                  split="eval")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval_metrics.jsonl", "w") as fh:
        fh.write(record.to_json() + "\n")
    for name, records in logs.items():
        _write_jsonl(out_dir / f"{name}.jsonl", records)
    click.echo(record.to_json())


def _parse_values(spec_str: str) -> list[float]:
    parts = spec_str.split(":")
    if len(parts) != 3:
        raise ConfigError("--values must be start:stop:count")
    start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    if count < 1:
        raise ConfigError("--values count must be >= 1")
    return [float(v) for v in np.linspace(start, stop, count)]


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--knob", required=True,
              type=click.Choice(["ee-threshold", "router-k", "keep-ratio"]))
@click.option("--values", "values_spec", required=True,
              help="start:stop:count, e.g. 0.5:0.99:10")
def sweep(config_path, seed, out, knob, values_spec) -> None:
    """Train once, then trace the accuracy-vs-MACs curve along one knob."""
    cfg = _load(config_path, seed, out)
    try:
        values = _parse_values(values_spec)
    except ConfigError as exc:
        _fail(VALIDATION_EXIT, str(exc))
    _, train_split, test_split, spec, model = _prepare(cfg)
    try:
        train_model(model, train_split, cfg.train, seed=cfg.seed + 1)
        rows = tradeoff_sweep(model, test_split.X, test_split.y, knob, values,
                              seed=cfg.seed, halting=cfg.eval.halting)
    except TrainingDiverged as exc:
        _fail(RUNTIME_EXIT, str(exc))
    except ValueError as exc:
        _fail(VALIDATION_EXIT, str(exc))
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "sweep.csv"
    write_curve_csv(path, rows)
    click.echo(f"wrote {len(rows)} curve rows to {path}")


@main.command("sample-test")
@click.option("--dims", type=int, default=8, show_default=True)
@click.option("--draws", type=int, default=200000, show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--tolerance", type=float, default=0.01, show_default=True)
def sample_test(dims, draws, seed, tolerance) -> None:
    """Check hard-sampling frequencies against softmax probabilities."""
    if dims < 1 or draws < 1:
        _fail(VALIDATION_EXIT, "dims and draws must be positive")
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=dims)
    freq = selection_frequencies(logits, draws, rng)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    deviation = float(np.abs(freq - probs).max())
    status = "pass" if deviation < tolerance else "FAIL"
    click.echo(f"dims={dims} draws={draws} max_deviation={deviation:.5f} "
               f"tolerance={tolerance} {status}")
    if status != "pass":
        sys.exit(RUNTIME_EXIT)


@main.command()
@_config_opt
@_seed_opt
@click.option("--samples", type=int, default=8, show_default=True,
              help="evaluation samples for the dynamic report")
def flops(config_path, seed, samples) -> None:
    """Print the static MAC budget and a measured dynamic report."""
    cfg = _load(config_path, seed, None)
    data, _, test_split, spec, model = _prepare(cfg)
    static = static_cost(spec)
    click.echo("static per-layer MACs:")
    for name, macs in static.layers:
        click.echo(f"  {name:24s} {macs}")
    click.echo(f"static total: {static.total_macs} MACs "
               f"(+{static.element_ops} element-ops)")
    exit_cfg = cfg.exit_config(len(model.exit_heads))
    rng = np.random.default_rng(cfg.seed + 2)
    totals = []
    for i in range(min(samples, test_split.n_samples)):
        _, trace = model.infer(Tensor(test_split.X[i]), exit_cfg=exit_cfg, rng=rng)
        totals.append(dynamic_cost(spec, trace).total_macs)
    click.echo(f"dynamic mean over {len(totals)} samples: {float(np.mean(totals)):.1f} MACs "
               f"({float(np.mean(totals)) / static.total_macs:.3f} of static)")


if __name__ == "__main__":
    main()
