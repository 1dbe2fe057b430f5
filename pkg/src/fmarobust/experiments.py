"""Desk-scale experiment protocol: baseline training, strength calibration,
regularizer-weight grid search, the (method x strategy x seed) finetuning
grid, and metric-grid evaluation.

Every step persists its artifacts (snapshots, manifests, grids) into the
experiment directory and is skipped when its outputs already exist, so an
interrupted run resumes where it stopped. Delete the directory to rerun
from scratch.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import report as R
from . import train as TR
from .augment import (AugKind, AugmentationSpec, combined_set, load_manifest,
                      write_manifest)
from .calibrate import calibrate_all, eval_accuracy, specs_from_results
from .data import load_or_synth
from .losses import DEFAULT_GAMMA_GRID
from .rng import RandomStream
from .schedule import StrategyConfig

# light VGG-style stack sized so the full grid fits a CPU time budget;
# the package default descriptor is deeper (see model.ArchitectureDescriptor)
EXPERIMENT_ARCH = M.ArchitectureDescriptor(
    input_hwc=(32, 32, 3), blocks=((8, 1), (16, 1), (32, 1)),
    dense_widths=(64,), class_count=10, tap_policy="blocks")

METHOD_TAGS = ("at", "st", "fma")


@dataclass(frozen=True)
class DeskScale:
    """Knobs of the desk-scale protocol."""

    train_per_class: int = 500
    val_per_class: int = 100
    baseline_epochs: int = 12
    baseline_schedule: tuple = ((0.01, 8), (0.002, 4))
    finetune_epochs: int = 30
    finetune_rate: float = 1e-3
    ia_epochs: int = 15
    grid_epochs: int = 3
    batch_size: int = 128
    eval_subset: int = 200
    target_drop: float = 0.10
    tolerance: float = 0.005
    data_seed: int = 0


def get_data(scale: DeskScale, data_dir: str | None):
    return load_or_synth(data_dir, scale.train_per_class,
                         scale.val_per_class, scale.data_seed)


def get_baseline(out_dir: str, train, val, scale: DeskScale,
                 seed: int = 0, arch: M.ArchitectureDescriptor = EXPERIMENT_ARCH):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "baseline.snap")
    if os.path.exists(path):
        return M.load_file(path)
    config = TR.TrainConfig(
        stage="baseline", epochs=scale.baseline_epochs,
        lr_schedule=scale.baseline_schedule, batch_size=scale.batch_size,
        seed=seed)
    model = M.init_model(arch, seed=seed)
    best, manifest = TR.train_baseline(model, train, val, config)
    M.save_file(best, path)
    manifest.save(os.path.join(out_dir, "baseline_manifest.json"))
    return best


def get_calibration(out_dir: str, model, val, scale: DeskScale,
                    seed: int = 100):
    """Calibrated per-kind specs plus the saturation flags."""
    cfg_path = os.path.join(out_dir, "augmentations.cfg")
    meta_path = os.path.join(out_dir, "calibration.json")
    if os.path.exists(cfg_path) and os.path.exists(meta_path):
        named = load_manifest(cfg_path)
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        specs = {AugKind(k.split("/", 1)[1]): v for k, v in named.items()}
        return specs, meta

    results = calibrate_all(model, val, RandomStream(seed),
                            target_drop=scale.target_drop,
                            tolerance=scale.tolerance)
    write_manifest(specs_from_results(results), cfg_path)
    meta = {kind.value: {
        "knob_value": res.knob_value,
        "clean_accuracy": res.clean_accuracy,
        "measured_accuracy": res.measured_accuracy,
        "measured_drop": res.measured_drop,
        "saturated": res.saturated,
        "iterations": res.iterations,
    } for kind, res in results.items()}
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    specs = {kind: res.spec for kind, res in results.items()}
    return specs, meta


def ca_strategy(specs: dict[AugKind, AugmentationSpec]) -> StrategyConfig:
    return StrategyConfig(strategy="ca",
                          plus_set=combined_set(True, specs),
                          minus_set=combined_set(False, specs))


def ia_strategy(specs: dict[AugKind, AugmentationSpec],
                kind: AugKind) -> StrategyConfig:
    return StrategyConfig(strategy="ia", ia_spec=specs[kind])


def get_regularizer_weight(out_dir: str, param: str, model, train, val,
                           specs, scale: DeskScale,
                           grid=DEFAULT_GAMMA_GRID) -> float:
    """Grid-searched gamma or st_weight, shared across finetune seeds."""
    path = os.path.join(out_dir, f"search_{param}.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)["best"]
    method = "fma" if param == "gamma" else "st"
    config = TR.finetune_config(
        method, ca_strategy(specs), epochs=scale.grid_epochs,
        rate=scale.finetune_rate, seed=0, batch_size=scale.batch_size)
    best, table = TR.grid_search(model, train, val, grid, config, specs,
                                 param=param)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
    return best


def get_finetune(out_dir: str, tag: str, model, train, val,
                 config: TR.TrainConfig, eval_specs):
    """One finetuning run, cached as {tag}.snap + {tag}_manifest.json."""
    snap_path = os.path.join(out_dir, f"{tag}.snap")
    man_path = os.path.join(out_dir, f"{tag}_manifest.json")
    if os.path.exists(snap_path) and os.path.exists(man_path):
        return M.load_file(snap_path), TR.RunManifest.load(man_path)
    tuned, manifest = TR.finetune(model, train, val, config,
                                  eval_specs=eval_specs)
    M.save_file(tuned, snap_path)
    manifest.save(man_path)
    return tuned, manifest


def get_grid(out_dir: str, name: str, models, val, specs,
             seed: int = 2000) -> R.MetricGrid:
    json_path = os.path.join(out_dir, f"{name}.json")
    csv_path = os.path.join(out_dir, f"{name}.csv")
    plus, minus = combined_set(True, specs), combined_set(False, specs)
    grid = R.evaluate_grid(models, val, specs, plus, minus, RandomStream(seed))
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(grid.to_json())
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(grid.to_csv())
    return grid


def run_ca_grid(out_dir: str, scale: DeskScale, data_dir: str | None = None,
                methods=METHOD_TAGS, seeds=(0, 1, 2),
                weights: dict[str, float] | None = None):
    """The full combined-augmentation experiment.

    Returns a summary dict with the baseline accuracy, calibration data,
    the per-seed metric grids, and mean average improvements per method.
    """
    os.makedirs(out_dir, exist_ok=True)
    train, val = get_data(scale, data_dir)
    baseline = get_baseline(out_dir, train, val, scale)
    specs, calibration = get_calibration(out_dir, baseline, val, scale)

    weights = dict(weights or {})
    if "fma" in methods and "gamma" not in weights:
        weights["gamma"] = get_regularizer_weight(
            out_dir, "gamma", baseline, train, val, specs, scale)
    if "st" in methods and "st_weight" not in weights:
        weights["st_weight"] = get_regularizer_weight(
            out_dir, "st_weight", baseline, train, val, specs, scale)

    grids = {}
    for seed in seeds:
        models = {"baseline": baseline}
        for method in methods:
            tag = f"{method}_ca_seed{seed}"
            config = TR.finetune_config(
                method, ca_strategy(specs), epochs=scale.finetune_epochs,
                rate=scale.finetune_rate, seed=seed,
                gamma=weights.get("gamma", 1.0),
                st_weight=weights.get("st_weight", 1.0),
                batch_size=scale.batch_size, eval_subset=scale.eval_subset)
            tuned, _ = get_finetune(out_dir, tag, baseline, train, val,
                                    config, specs)
            models[f"{method}_ca"] = tuned
        grids[seed] = get_grid(out_dir, f"grid_seed{seed}", models, val, specs)

    summary = {
        "baseline_clean": grids[seeds[0]].cell("baseline", "clean"),
        "weights": weights,
        "calibration": calibration,
        "mean_average_improvement": {
            f"{m}_ca": float(np.mean([grids[s].average_improvement(f"{m}_ca")
                                      for s in seeds]))
            for m in methods},
        "seeds": list(seeds),
    }
    with open(os.path.join(out_dir, "summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return {"summary": summary, "grids": grids, "specs": specs,
            "baseline": baseline, "train": train, "val": val}


def run_ia_probe(out_dir: str, scale: DeskScale, kinds,
                 data_dir: str | None = None, seed: int = 0,
                 gamma: float | None = None):
    """Per-kind FMA/IA finetuning; returns before/after augmented accuracy
    and clean accuracy per kind."""
    os.makedirs(out_dir, exist_ok=True)
    train, val = get_data(scale, data_dir)
    baseline = get_baseline(out_dir, train, val, scale)
    specs, _ = get_calibration(out_dir, baseline, val, scale)
    if gamma is None:
        gamma = get_regularizer_weight(out_dir, "gamma", baseline, train,
                                       val, specs, scale)

    path = os.path.join(out_dir, "ia_results.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    rng = RandomStream(4000)
    baseline_clean = eval_accuracy(baseline, val)
    results = {}
    for kind in kinds:
        tag = f"fma_ia_{kind.value}_seed{seed}"
        config = TR.finetune_config(
            "fma", ia_strategy(specs, kind), epochs=scale.ia_epochs,
            rate=scale.finetune_rate, seed=seed, gamma=gamma,
            batch_size=scale.batch_size, eval_subset=scale.eval_subset)
        tuned, _ = get_finetune(out_dir, tag, baseline, train, val, config,
                                {kind: specs[kind]})
        stream = rng.derive("ia-eval", kind.value)
        results[kind.value] = {
            "before": eval_accuracy(baseline, val, specs[kind], stream),
            "after": eval_accuracy(tuned, val, specs[kind], stream),
            "clean_before": baseline_clean,
            "clean_after": eval_accuracy(tuned, val),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    return results
