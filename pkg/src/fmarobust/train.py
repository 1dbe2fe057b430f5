"""Two-stage training harness: clean baseline training, then robustness
finetuning with AT / ST / FMA under the IA or CA schedule, using SGD with
classical momentum and a staged learning rate. Every run is a pure
function of (seed, config, data) and is summarized in a RunManifest.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from . import model as M
from . import tensor as T
from .augment import AugmentationSet, AugmentationSpec, AugKind
from .calibrate import eval_accuracy
from .data import LabeledDataset
from .errors import ContractError
from .losses import LossConfig, cross_entropy, total_loss
from .rng import RandomStream
from .schedule import StrategyConfig, at_extend, augment_batch, select_set

# the staged baseline schedule used at full scale: (rate, epoch count)
PAPER_BASELINE_SCHEDULE = ((1e-2, 20), (1e-4, 10), (1e-6, 10))
DEFAULT_FINETUNE_RATE = 1e-3
PARITY_NOTE = "even_epoch=combined_plus"


@dataclass(frozen=True)
class TrainConfig:
    stage: str                       # "baseline" | "finetune"
    epochs: int
    lr_schedule: tuple[tuple[float, int], ...]
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    loss: LossConfig = LossConfig(method="fma", gamma=0.0)
    strategy: StrategyConfig | None = None
    checkpoint_every: int = 0        # epochs between checkpoints; 0 = off
    eval_subset: int = 0             # per-epoch curve eval size; 0 = full val

    def __post_init__(self):
        if self.stage not in ("baseline", "finetune"):
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        total = sum(count for _, count in self.lr_schedule)
        if total != self.epochs:
            raise ContractError(
                f"lr schedule covers {total} epochs, config says {self.epochs}")
        if any(rate <= 0 for rate, _ in self.lr_schedule):
            raise ContractError("learning rates must be > 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ContractError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.stage == "finetune" and self.strategy is None:
            raise ContractError("finetune stage requires a strategy config")


def finetune_config(method: str, strategy: StrategyConfig, epochs: int = 30,
                    rate: float = DEFAULT_FINETUNE_RATE, seed: int = 0,
                    gamma: float = 1.0, st_weight: float = 1.0,
                    batch_size: int = 64, eval_subset: int = 0) -> TrainConfig:
    return TrainConfig(
        stage="finetune", epochs=epochs, lr_schedule=((rate, epochs),),
        seed=seed, batch_size=batch_size, eval_subset=eval_subset,
        loss=LossConfig(method=method, gamma=gamma, st_weight=st_weight),
        strategy=strategy)


def lr_at(schedule, epoch: int) -> float:
    for rate, count in schedule:
        if epoch < count:
            return rate
        epoch -= count
    return schedule[-1][0]


def _spec_dict(spec: AugmentationSpec) -> dict:
    return {"kind": spec.kind.value, **spec.params()}


def _config_dict(config: TrainConfig) -> dict:
    out = asdict(config)
    strat = config.strategy
    if strat is not None:
        out["strategy"] = {
            "strategy": strat.strategy,
            "granularity": strat.granularity,
            "ia_spec": _spec_dict(strat.ia_spec) if strat.ia_spec else None,
            "plus_set": [_spec_dict(s) for s in strat.plus_set.specs]
            if strat.plus_set else None,
            "minus_set": [_spec_dict(s) for s in strat.minus_set.specs]
            if strat.minus_set else None,
        }
    return out


@dataclass
class RunManifest:
    """Everything needed to re-run and to report one training run."""

    config: dict
    code_version: str = __version__
    parity: str = PARITY_NOTE
    dataset: dict = field(default_factory=dict)
    augmentations: dict = field(default_factory=dict)
    composition_order: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load(path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return RunManifest(**raw)


class _CsvStream:
    """Appends one row per epoch; columns fixed by the first row."""

    def __init__(self, path):
        self.path = path
        self.columns = None

    def append(self, row: dict) -> None:
        if self.path is None:
            return
        flat = {}
        for key, val in row.items():
            if isinstance(val, dict):
                for sub, v in val.items():
                    flat[f"{key}.{sub}"] = v
            else:
                flat[key] = val
        new = self.columns is None
        if new:
            self.columns = list(flat)
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns)
            if new:
                writer.writeheader()
            writer.writerow(flat)


def sgd_momentum_step(params: dict[str, T.Tensor],
                      grads: dict[str, np.ndarray],
                      velocity: dict[str, np.ndarray],
                      rate: float, momentum: float) -> None:
    """Classical momentum: v <- momentum*v + g; theta <- theta - rate*v."""
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != tensor.shape or velocity[name].shape != tensor.shape:
            raise ContractError(
                f"sgd step: misaligned shapes for {name}: param "
                f"{tensor.shape}, grad {g.shape}, velocity "
                f"{velocity[name].shape}")
        v = velocity[name]
        v *= momentum
        v += g
        tensor.update_(tensor.array - rate * v)


def _collect_grads(nodes: dict[str, T.GraphNode]) -> dict[str, np.ndarray]:
    return {name: node.grad for name, node in nodes.items()
            if node.grad is not None}


def _zero_grads(nodes: dict[str, T.GraphNode]) -> None:
    for node in nodes.values():
        node.zero_grad()


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _dataset_info(ds: LabeledDataset) -> dict:
    return {"size": len(ds), "classes": ds.class_count, "split": ds.split,
            "provenance": {k: v for k, v in ds.provenance.items()
                           if k != "digests"}}


def train_baseline(model: M.ModelSnapshot, train: LabeledDataset,
                   val: LabeledDataset, config: TrainConfig,
                   out_dir=None):
    """Stage 1: minimize cross-entropy on clean images; returns the
    best-validation-accuracy snapshot plus the run manifest."""
    if config.stage != "baseline":
        raise ContractError("train_baseline needs config.stage == 'baseline'")
    work = model.copy()
    nodes = M.make_param_nodes(work)
    velocity = {k: np.zeros(v.shape) for k, v in work.params.items()}
    root = RandomStream(config.seed).derive("baseline")
    manifest = RunManifest(config=_config_dict(config),
                           dataset=_dataset_info(train))
    stream = _CsvStream(os.path.join(out_dir, "metrics.csv") if out_dir else None)

    best_acc, best_epoch, best = -1.0, -1, work.copy()
    for epoch in range(config.epochs):
        rate = lr_at(config.lr_schedule, epoch)
        order = root.derive("shuffle", epoch).permutation(len(train))
        losses = []
        for idx in _batches(len(train), config.batch_size, order):
            logits, _ = M.forward(work, train.batch_nchw(idx),
                                  param_nodes=nodes)
            loss = cross_entropy(T.softmax_logp(logits), train.labels[idx])
            T.backward(loss)
            sgd_momentum_step(work.params, _collect_grads(nodes), velocity,
                              rate, config.momentum)
            _zero_grads(nodes)
            losses.append(loss.array.item())
        val_acc = eval_accuracy(work, val)
        row = {"epoch": epoch, "lr": rate,
               "train_loss": float(np.mean(losses)),
               "val_clean_acc": val_acc}
        manifest.epochs.append(row)
        stream.append(row)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best = work.copy()
        if out_dir and config.checkpoint_every and \
                (epoch + 1) % config.checkpoint_every == 0:
            M.save_file(work, os.path.join(out_dir, f"ckpt_{epoch:04d}.snap"))

    best.meta.update({"stage": "baseline", "best_epoch": str(best_epoch),
                      "seed": str(config.seed)})
    manifest.final = {"best_epoch": best_epoch,
                      "best_val_clean_acc": best_acc,
                      "final_val_clean_acc": manifest.epochs[-1]["val_clean_acc"]}
    if out_dir:
        manifest.save(os.path.join(out_dir, "manifest.json"))
    return best, manifest


def _eval_indices(val: LabeledDataset, config: TrainConfig,
                  root: RandomStream) -> np.ndarray:
    if config.eval_subset and config.eval_subset < len(val):
        return np.sort(root.derive("evalsubset").permutation(
            len(val))[:config.eval_subset])
    return np.arange(len(val))


def _subset_view(val: LabeledDataset, idx: np.ndarray) -> LabeledDataset:
    return LabeledDataset(images=val.images[idx], labels=val.labels[idx],
                          class_count=val.class_count, split=val.split,
                          provenance=dict(val.provenance))


def finetune(model: M.ModelSnapshot, train: LabeledDataset,
             val: LabeledDataset, config: TrainConfig,
             eval_specs: dict[AugKind, AugmentationSpec] | None = None,
             out_dir=None):
    """Stage 2: optimize the configured method loss on (clean, augmented)
    pairs scheduled by the strategy; returns the final-epoch snapshot.

    `eval_specs` drives the per-epoch augmented-accuracy curves (one
    series per corruption kind, evaluated on a fixed validation subset of
    config.eval_subset images).
    """
    if config.stage != "finetune":
        raise ContractError("finetune needs config.stage == 'finetune'")
    strategy = config.strategy
    work = model.copy()
    nodes = M.make_param_nodes(work)
    velocity = {k: np.zeros(v.shape) for k, v in work.params.items()}
    root = RandomStream(config.seed).derive("finetune", config.loss.method)
    manifest = RunManifest(config=_config_dict(config),
                           dataset=_dataset_info(train))
    if eval_specs:
        manifest.augmentations = {k.value: _spec_dict(s)
                                  for k, s in eval_specs.items()}
    if strategy.strategy == "ca":
        manifest.composition_order = [s.kind.value
                                      for s in strategy.plus_set.specs]
    stream = _CsvStream(os.path.join(out_dir, "metrics.csv") if out_dir else None)

    eval_idx = _eval_indices(val, config, root)
    val_eval = _subset_view(val, eval_idx)
    eval_rng = root.derive("curve-eval")

    step = 0
    for epoch in range(config.epochs):
        rate = lr_at(config.lr_schedule, epoch)
        per_batch = strategy.granularity == "batch"
        aug_set = select_set(strategy, epoch)
        losses = []

        if config.loss.method == "at" and not per_batch:
            extended = at_extend(train, aug_set, root, epoch)
            order = root.derive("shuffle", epoch).permutation(len(extended))
            for idx in _batches(len(extended), config.batch_size, order):
                logits, _ = M.forward(work, extended.batch_nchw(idx),
                                      param_nodes=nodes)
                loss = cross_entropy(T.softmax_logp(logits),
                                     extended.labels[idx])
                T.backward(loss)
                sgd_momentum_step(work.params, _collect_grads(nodes),
                                  velocity, rate, config.momentum)
                _zero_grads(nodes)
                losses.append(loss.array.item())
                step += 1
        else:
            order = root.derive("shuffle", epoch).permutation(len(train))
            for idx in _batches(len(train), config.batch_size, order):
                if per_batch:
                    aug_set = select_set(strategy, step)
                clean = train.batch_nchw(idx)
                augmented = augment_batch(train, idx, aug_set, root, epoch)
                loss = total_loss(config.loss, work, clean, augmented,
                                  train.labels[idx], param_nodes=nodes)
                T.backward(loss)
                sgd_momentum_step(work.params, _collect_grads(nodes),
                                  velocity, rate, config.momentum)
                _zero_grads(nodes)
                losses.append(loss.array.item())
                step += 1

        row = {"epoch": epoch, "lr": rate, "set": aug_set.name,
               "train_loss": float(np.mean(losses)),
               "val_clean_acc": eval_accuracy(work, val_eval)}
        if eval_specs:
            row["aug_acc"] = {
                kind.value: eval_accuracy(work, val_eval, spec,
                                          eval_rng.derive(kind.value))
                for kind, spec in eval_specs.items()}
        manifest.epochs.append(row)
        stream.append(row)
        if out_dir and config.checkpoint_every and \
                (epoch + 1) % config.checkpoint_every == 0:
            M.save_file(work, os.path.join(out_dir, f"ckpt_{epoch:04d}.snap"))

    work.meta.update({"stage": "finetune", "method": config.loss.method,
                      "strategy": strategy.strategy, "seed": str(config.seed),
                      "epochs": str(config.epochs)})
    manifest.final = {"val_clean_acc": eval_accuracy(work, val),
                      "epochs_run": config.epochs}
    if out_dir:
        manifest.save(os.path.join(out_dir, "manifest.json"))
    return work, manifest


def grid_search(model: M.ModelSnapshot, train: LabeledDataset,
                val: LabeledDataset, grid, config: TrainConfig,
                eval_specs: dict[AugKind, AugmentationSpec],
                param: str = "gamma", clean_floor: float = 0.01):
    """Short finetune per grid point; pick the point with the best mean
    augmented accuracy among those keeping clean accuracy within
    `clean_floor` of the input model. Returns (best value, result table)."""
    if not grid:
        raise ContractError("grid_search: empty grid")
    baseline_clean = eval_accuracy(model, val)
    rng = RandomStream(config.seed).derive("gridsearch", param)
    rows = []
    for value in grid:
        cfg = replace(config, loss=replace(config.loss, **{param: float(value)}))
        tuned, _ = finetune(model, train, val, cfg, eval_specs=None)
        clean_acc = eval_accuracy(tuned, val)
        aug_accs = [eval_accuracy(tuned, val, spec, rng.derive(kind.value))
                    for kind, spec in eval_specs.items()]
        mean_aug = float(np.mean(aug_accs))
        feasible = clean_acc >= baseline_clean - clean_floor
        shortfall = max(0.0, (baseline_clean - clean_floor) - clean_acc)
        rows.append({param: float(value), "clean_acc": clean_acc,
                     "mean_aug_acc": mean_aug, "feasible": feasible,
                     "score": mean_aug - 5.0 * shortfall})
    feasible_rows = [r for r in rows if r["feasible"]]
    pool = feasible_rows if feasible_rows else rows
    best = max(pool, key=lambda r: (r["mean_aug_acc"] if feasible_rows
                                    else r["score"]))
    result = {"best": best[param], "baseline_clean": baseline_clean,
              "constraint_violated": not feasible_rows, "rows": rows}
    return best[param], result


def grid_search_gamma(model, train, val, grid, config, eval_specs):
    return grid_search(model, train, val, grid, config, eval_specs,
                       param="gamma")


def grid_search_st_weight(model, train, val, grid, config, eval_specs):
    return grid_search(model, train, val, grid, config, eval_specs,
                       param="st_weight")
