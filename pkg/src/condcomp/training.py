"""Training loop, evaluation metrics, and checkpoint IO for the toy models."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.metrics import normalized_mutual_info_score

from . import tensor as T
from .datasets import SyntheticDataset
from .exits import EENNConfig
from .flops import dynamic_cost
from .optim import ParameterSet, optimizer_step
from .routing import assignment_records
from .tensor import Tensor
from .tokens import alive_records
from .transformer import ConditionalTransformer

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSettings:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 0.01
    lr_end: float | None = None   # geometric anneal target; None = constant
    optimizer: str = "adam"
    balance_weight: float = 0.0
    exit_alpha: float = 1.0
    exit_betas: tuple[float, ...] | None = None   # default: 1 per exit head
    tau_start: float = 5.0
    tau_end: float = 0.5
    stochastic: bool = True

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0 or (self.lr_end is not None and self.lr_end <= 0):
            raise ValueError("lr must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.balance_weight < 0:
            raise ValueError("balance_weight must be >= 0")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperatures must be positive")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    task_loss: float | None = None
    balance_loss: float | None = None
    accuracy: float | None = None
    mean_macs: float | None = None
    load_cv: float | None = None
    routing_nmi: float | None = None
    mean_exit: float | None = None
    kept_recall: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def tau_schedule(epoch: int, epochs: int, start: float, end: float) -> float:
    """Geometric anneal from start to end across epochs."""
    if epochs <= 1:
        return end
    frac = epoch / (epochs - 1)
    return float(start * (end / start) ** frac)


def _sample_loss(model: ConditionalTransformer, x: np.ndarray, target: int,
                 settings: TrainSettings, rng, tau: float):
    preds, aux = model.train_forward(Tensor(x), rng, tau=tau,
                                     stochastic=settings.stochastic)
    n_exits = len(preds)
    if n_exits > 1:
        betas = settings.exit_betas or (1.0,) * (n_exits - 1)
        if len(betas) != n_exits - 1:
            raise ValueError(f"need {n_exits - 1} exit betas, got {len(betas)}")
        loss = T.scalar_mul(T.cross_entropy_from_logits(preds[-1], target),
                            settings.exit_alpha)
        for beta, pred in zip(betas, preds[:-1]):
            if beta:
                loss = T.add(loss, T.scalar_mul(
                    T.cross_entropy_from_logits(pred, target), beta))
    else:
        loss = T.cross_entropy_from_logits(preds[-1], target)
    balance = 0.0
    if settings.balance_weight and aux["balance"]:
        for b in aux["balance"]:
            loss = T.add(loss, T.scalar_mul(
                b, settings.balance_weight / len(aux["balance"])))
            balance += b.item() / len(aux["balance"])
    correct = int(np.argmax(preds[-1].data)) == int(target)
    return loss, balance, correct


def train_model(model: ConditionalTransformer, train: SyntheticDataset,
                settings: TrainSettings, seed: int) -> list[MetricsRecord]:
    """Minibatch training; per-sample graphs, gradients accumulated across
    the batch. Raises TrainingDiverged on a non-finite loss."""
    settings.validate()
    params = model.parameter_set()
    rng = np.random.default_rng(seed)
    history: list[MetricsRecord] = []
    for epoch in range(settings.epochs):
        tau = tau_schedule(epoch, settings.epochs, settings.tau_start,
                           settings.tau_end)
        lr = settings.lr
        if settings.lr_end is not None:
            lr = tau_schedule(epoch, settings.epochs, settings.lr, settings.lr_end)
        order = rng.permutation(train.n_samples)
        losses, balances, correct = [], [], 0
        for start in range(0, train.n_samples, settings.batch_size):
            batch = order[start:start + settings.batch_size]
            params.zero_grad()
            for i in batch:
                loss, balance, ok = _sample_loss(
                    model, train.X[i], int(train.y[i]), settings, rng, tau)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss {value} at epoch {epoch} sample {int(i)}")
                T.backward(T.scalar_mul(loss, 1.0 / len(batch)))
                losses.append(value)
                balances.append(balance)
                correct += ok
            optimizer_step(params, lr, settings.optimizer)
        history.append(MetricsRecord(
            epoch=epoch, split="train",
            task_loss=float(np.mean(losses)),
            balance_loss=float(np.mean(balances)),
            accuracy=correct / train.n_samples))
    return history


def _sample_expert(assignments) -> int | None:
    """Majority expert over a sample's tokens at the first MoE layer."""
    if not assignments:
        return None
    _, assign = assignments[0]
    votes = [pairs[0][0] for pairs in assign.per_token if pairs]
    if not votes:
        return None
    counts = np.bincount(votes)
    return int(np.argmax(counts))


def evaluate_model(model: ConditionalTransformer, data: SyntheticDataset,
                   exit_cfg: EENNConfig | None = None,
                   rng: np.random.Generator | None = None,
                   epoch: int = 0, split: str = "eval",
                   ) -> tuple[MetricsRecord, dict[str, list[dict]]]:
    """Greedy inference over a dataset: accuracy, consumed compute, routing
    and selection statistics, plus JSON-ready decision logs."""
    if rng is None:
        rng = np.random.default_rng(0)
    spec = model.spec
    n = data.n_samples
    correct = 0
    macs, exits, losses = [], [], []
    expert_by_sample: list[int | None] = []
    dispatch_totals = np.zeros(spec.n_experts)
    recalls = []
    logs: dict[str, list[dict]] = {"routing": [], "exits": [], "alive": []}
    for i in range(n):
        logits, trace = model.infer(Tensor(data.X[i]), exit_cfg=exit_cfg, rng=rng)
        pred = int(np.argmax(logits.data))
        correct += pred == int(data.y[i])
        losses.append(T.cross_entropy_from_logits(
            Tensor(logits.data), int(data.y[i])).item())
        report = dynamic_cost(spec, trace)
        macs.append(report.total_macs)
        exits.append(trace.exit_index)
        expert_by_sample.append(_sample_expert(trace.assignments))
        for layer, assign in trace.assignments:
            dispatch_totals += assign.dispatch_counts()
            logs["routing"].extend(assignment_records(assign, sample=i, layer=layer))
        if trace.exit_index is not None:
            logs["exits"].append({"sample": i, "exit": trace.exit_index,
                                  "confidence": trace.confidence,
                                  "macs": report.total_macs})
        kept_layers = trace.alive_per_layer()
        if kept_layers:
            logs["alive"].extend(alive_records(i, kept_layers))
            informative = data.meta[i].get("informative") if data.meta else None
            if informative:
                kept = set(kept_layers[0])
                recalls.append(len(kept & set(informative)) / len(informative))

    record = MetricsRecord(epoch=epoch, split=split,
                           task_loss=float(np.mean(losses)),
                           accuracy=correct / n,
                           mean_macs=float(np.mean(macs)),
                           mean_exit=(float(np.mean(exits))
                                      if all(e is not None for e in exits) else None))
    if dispatch_totals.sum() > 0:
        f = dispatch_totals / dispatch_totals.sum()
        record.load_cv = float(f.std() / f.mean())
    clusters = [m.get("cluster") for m in data.meta] if data.meta else []
    pairs = [(c, e) for c, e in zip(clusters, expert_by_sample)
             if c is not None and e is not None]
    if pairs:
        c_arr = np.array([p[0] for p in pairs])
        e_arr = np.array([p[1] for p in pairs])
        record.routing_nmi = float(normalized_mutual_info_score(c_arr, e_arr))
    if recalls:
        record.kept_recall = float(np.mean(recalls))
    return record, logs


# -- checkpoint IO -----------------------------------------------------------


def save_checkpoint(path, params: ParameterSet, spec_dict: dict | None = None) -> None:
    """Deterministic self-describing container: JSON header line (version,
    shapes, offsets, optional model spec) followed by raw float64 bytes."""
    names = sorted(params.params)
    header: dict = {"version": CHECKPOINT_VERSION, "params": {}}
    if spec_dict is not None:
        header["spec"] = spec_dict
    offset = 0
    for name in names:
        shape = list(params.params[name].data.shape)
        count = int(np.prod(shape)) if shape else 1
        header["params"][name] = {"shape": shape, "offset": offset}
        offset += count
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(params.params[name].data).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        blob = fh.read()
    arrays = {}
    for name, info in header["params"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = info["offset"] * 8
        arrays[name] = np.frombuffer(
            blob, dtype=np.float64, count=count, offset=start).reshape(shape).copy()
    return arrays, header
