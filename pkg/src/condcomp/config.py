"""TOML experiment configuration: schema validation and assembly helpers."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .datasets import DATASET_IDS
from .exits import EENNConfig
from .training import TrainSettings
from .transformer import BlockSpec, ModelSpec


class ConfigError(ValueError):
    pass


@dataclass
class EvalSettings:
    exit_rule: str = "none"        # none | threshold
    halting: str = "max-prob"
    threshold: float = 0.9

    def validate(self) -> None:
        if self.exit_rule not in ("none", "threshold"):
            raise ConfigError(f"eval.exit_rule: unknown rule {self.exit_rule!r}")
        if self.halting not in ("max-prob", "entropy"):
            raise ConfigError(f"eval.halting: unknown rule {self.halting!r}")


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str
    dataset_id: str
    dataset_params: dict
    train_fraction: float
    model: dict                    # ModelSpec fields except d_in/n_tokens/n_classes
    train: TrainSettings
    eval: EvalSettings = field(default_factory=EvalSettings)

    def model_spec(self, d_in: int, n_tokens: int, n_classes: int) -> ModelSpec:
        fields = dict(self.model)
        blocks = [BlockSpec(**b) for b in fields.pop("blocks")]
        try:
            return ModelSpec(d_in=d_in, n_tokens=n_tokens, n_classes=n_classes,
                             blocks=blocks, **fields)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model section invalid: {exc}") from exc

    def exit_config(self, n_exit_heads: int) -> EENNConfig | None:
        if self.eval.exit_rule == "none" or n_exit_heads == 0:
            return None
        betas = self.train.exit_betas or (1.0,) * n_exit_heads
        return EENNConfig(alpha=self.train.exit_alpha, betas=tuple(betas),
                          halting=self.eval.halting, threshold=self.eval.threshold)


_TRAIN_KEYS = {"epochs", "batch_size", "lr", "lr_end", "optimizer",
               "balance_weight", "exit_alpha", "exit_betas", "tau_start",
               "tau_end", "stochastic"}
_EVAL_KEYS = {"exit_rule", "halting", "threshold"}
_TOP_KEYS = {"seed", "out_dir", "dataset", "model", "train", "eval",
             "train_fraction"}


def _require(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"{section}: missing required key {key!r}")
    return table[key]


def parse_config(raw: dict, path: str = "<config>") -> ExperimentConfig:
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")
    seed = _require(raw, "seed", path)
    if not isinstance(seed, int):
        raise ConfigError(f"{path}: seed must be an integer")
    out_dir = _require(raw, "out_dir", path)

    dataset = _require(raw, "dataset", path)
    ds_id = _require(dataset, "id", "dataset")
    if ds_id not in DATASET_IDS:
        raise ConfigError(f"dataset.id {ds_id!r} not one of {DATASET_IDS}")
    ds_params = {k: v for k, v in dataset.items() if k != "id"}

    model = dict(_require(raw, "model", path))
    if "blocks" not in model or not model["blocks"]:
        raise ConfigError("model: needs a nonempty blocks list")

    train_raw = dict(raw.get("train", {}))
    unknown = set(train_raw) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"train: unknown keys {sorted(unknown)}")
    if "exit_betas" in train_raw and train_raw["exit_betas"] is not None:
        train_raw["exit_betas"] = tuple(train_raw["exit_betas"])
    train = TrainSettings(**train_raw)
    try:
        train.validate()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc

    eval_raw = dict(raw.get("eval", {}))
    unknown = set(eval_raw) - _EVAL_KEYS
    if unknown:
        raise ConfigError(f"eval: unknown keys {sorted(unknown)}")
    ev = EvalSettings(**eval_raw)
    ev.validate()

    fraction = raw.get("train_fraction", 0.75)
    if not 0.0 < fraction < 1.0:
        raise ConfigError("train_fraction must be in (0, 1)")

    return ExperimentConfig(seed=seed, out_dir=str(out_dir), dataset_id=ds_id,
                            dataset_params=ds_params, train_fraction=fraction,
                            model=model, train=train, eval=ev)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: invalid TOML: {exc}") from exc
    return parse_config(raw, str(p))
