"""Corruption-strength calibration: bisection on one scalar knob per kind
until the augmented validation accuracy drops by a target amount below the
clean accuracy. Boundary saturation (the target being unreachable inside
the knob range) is flagged, not an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .augment import (AugKind, AugmentationSet, AugmentationSpec,
                      compose_batch, single_set)
from .data import LabeledDataset
from .errors import CalibrationError, ContractError
from .rng import RandomStream


def eval_accuracy(model: M.ModelSnapshot, dataset: LabeledDataset,
                  aug=None, rng: RandomStream | None = None,
                  batch_size: int = 256) -> float:
    """Top-1 accuracy; `aug` is None (clean), a spec, or a set.

    Stochastic corruptions draw from a stream derived per dataset index,
    so the result is a pure function of (model, dataset, aug, rng seed).
    """
    if len(dataset) == 0:
        raise ContractError("eval_accuracy: dataset is empty")
    if isinstance(aug, AugmentationSpec):
        aug = single_set(aug)
    if aug is not None and rng is None:
        rng = RandomStream(0)
    correct = 0
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        if aug is None:
            batch = dataset.batch_nchw(idx)
        else:
            streams = [rng.derive("eval", int(i)) for i in idx]
            out = compose_batch(dataset.images[idx], aug, streams)
            batch = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
        logits, _ = M.forward(model, batch)
        correct += int((logits.array.argmax(axis=1)
                        == dataset.labels[idx]).sum())
    return correct / len(dataset)


@dataclass(frozen=True)
class CalibrationTask:
    """Search one knob of one corruption kind for a target accuracy drop."""

    kind: AugKind
    knob: str
    base_spec: AugmentationSpec     # fixed companions; knob value overwritten
    lo: float
    hi: float
    target_drop: float = 0.10
    tolerance: float = 0.005
    max_iterations: int = 30

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ContractError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if self.tolerance <= 0:
            raise ContractError("tolerance must be > 0")

    def spec_at(self, knob_value: float) -> AugmentationSpec:
        return self.base_spec.with_param(self.knob, knob_value)


@dataclass
class CalibrationResult:
    spec: AugmentationSpec
    knob_value: float
    clean_accuracy: float
    measured_accuracy: float
    measured_drop: float
    saturated: bool
    iterations: int
    history: list = field(default_factory=list)   # (knob, accuracy) pairs


def default_tasks(target_drop: float = 0.10, tolerance: float = 0.005,
                  max_iterations: int = 30) -> dict[AugKind, CalibrationTask]:
    """One task per corruption kind; companions follow the preset structure
    (blur searches sigma at fixed 3x3 kernel, SAP searches p at fixed q, rho)."""
    mk = AugmentationSpec
    tasks = {
        AugKind.BRIGHTNESS_PLUS: CalibrationTask(
            AugKind.BRIGHTNESS_PLUS, "delta",
            mk(AugKind.BRIGHTNESS_PLUS, delta=0.0), 0.0, 1.0),
        AugKind.BRIGHTNESS_MINUS: CalibrationTask(
            AugKind.BRIGHTNESS_MINUS, "delta",
            mk(AugKind.BRIGHTNESS_MINUS, delta=0.0), -1.0, 0.0),
        AugKind.SATURATION_PLUS: CalibrationTask(
            AugKind.SATURATION_PLUS, "alpha",
            mk(AugKind.SATURATION_PLUS, alpha=1.0), 1.0, 64.0),
        AugKind.SATURATION_MINUS: CalibrationTask(
            AugKind.SATURATION_MINUS, "alpha",
            mk(AugKind.SATURATION_MINUS, alpha=1.0), 0.0, 1.0),
        AugKind.GAUSSIAN_NOISE: CalibrationTask(
            AugKind.GAUSSIAN_NOISE, "sigma",
            mk(AugKind.GAUSSIAN_NOISE, sigma=0.0), 0.0, 0.6),
        AugKind.GAUSSIAN_BLUR: CalibrationTask(
            AugKind.GAUSSIAN_BLUR, "sigma",
            mk(AugKind.GAUSSIAN_BLUR, size=3, sigma=0.05), 0.05, 8.0),
        AugKind.ADDITIVE_SAP: CalibrationTask(
            AugKind.ADDITIVE_SAP, "prob",
            mk(AugKind.ADDITIVE_SAP, prob=0.0, salt_ratio=0.5, strength=0.5),
            0.0, 1.0),
    }
    out = {}
    for kind, task in tasks.items():
        out[kind] = CalibrationTask(
            task.kind, task.knob, task.base_spec, task.lo, task.hi,
            target_drop=target_drop, tolerance=tolerance,
            max_iterations=max_iterations)
    return out


def calibrate(model: M.ModelSnapshot, valset: LabeledDataset,
              task: CalibrationTask, rng: RandomStream,
              clean_accuracy: float | None = None,
              evaluate=None) -> CalibrationResult:
    """Bisection on task.knob until the measured drop hits target_drop
    within tolerance. Returns the boundary spec flagged `saturated` when
    the whole range cannot reach the target. `evaluate` (spec -> accuracy)
    is injectable for synthetic closed-form classifiers.
    """
    if evaluate is None:
        def evaluate(spec):
            return eval_accuracy(model, valset, spec, rng)
    if clean_accuracy is None:
        clean_accuracy = evaluate(None)

    history: list[tuple[float, float]] = []

    def drop_at(knob: float) -> float:
        acc = evaluate(task.spec_at(knob))
        history.append((knob, acc))
        return clean_accuracy - acc

    def result(knob, drop, saturated, iters):
        return CalibrationResult(
            spec=task.spec_at(knob), knob_value=knob,
            clean_accuracy=clean_accuracy,
            measured_accuracy=clean_accuracy - drop, measured_drop=drop,
            saturated=saturated, iterations=iters, history=history)

    target, tol = task.target_drop, task.tolerance
    d_lo = drop_at(task.lo)
    if abs(d_lo - target) <= tol:
        return result(task.lo, d_lo, False, 0)
    d_hi = drop_at(task.hi)
    if abs(d_hi - target) <= tol:
        return result(task.hi, d_hi, False, 0)

    lo, hi = task.lo, task.hi
    if max(d_lo, d_hi) < target - tol:
        # whole range too weak: boundary saturation (the Saturation- case)
        knob, drop = (lo, d_lo) if d_lo > d_hi else (hi, d_hi)
        return result(knob, drop, True, 0)
    if min(d_lo, d_hi) > target + tol:
        # even the weakest boundary overshoots
        knob, drop = (lo, d_lo) if d_lo < d_hi else (hi, d_hi)
        return result(knob, drop, True, 0)

    # orient the bracket so `low` is the under-target side
    if d_lo <= d_hi:
        low, d_low, high, d_high = lo, d_lo, hi, d_hi
    else:
        low, d_low, high, d_high = hi, d_hi, lo, d_lo

    for it in range(1, task.max_iterations + 1):
        mid = 0.5 * (low + high)
        d_mid = drop_at(mid)
        if abs(d_mid - target) <= tol:
            return result(mid, d_mid, False, it)
        if not (min(d_low, d_high) - tol <= d_mid <= max(d_low, d_high) + tol):
            raise CalibrationError(
                f"non-monotone drop measurements for {task.kind.value}: "
                f"drop({mid:.6g}) = {d_mid:.4f} outside bracket "
                f"[{d_low:.4f}, {d_high:.4f}]")
        if d_mid < target:
            low, d_low = mid, d_mid
        else:
            high, d_high = mid, d_mid

    raise CalibrationError(
        f"no convergence for {task.kind.value} after {task.max_iterations} "
        f"iterations; last bracket knob=[{low:.6g}, {high:.6g}] "
        f"drop=[{d_low:.4f}, {d_high:.4f}]")


def calibrate_all(model: M.ModelSnapshot, valset: LabeledDataset,
                  rng: RandomStream, target_drop: float = 0.10,
                  tolerance: float = 0.005, kinds=None,
                  clean_accuracy: float | None = None
                  ) -> dict[AugKind, CalibrationResult]:
    """Calibrate every requested kind against the same clean accuracy."""
    tasks = default_tasks(target_drop=target_drop, tolerance=tolerance)
    if kinds is None:
        kinds = list(tasks)
    if clean_accuracy is None:
        clean_accuracy = eval_accuracy(model, valset, None, rng)
    results = {}
    for kind in kinds:
        results[kind] = calibrate(model, valset, tasks[kind], rng,
                                  clean_accuracy=clean_accuracy)
    return results


def specs_from_results(results: dict[AugKind, CalibrationResult],
                       prefix: str = "calibrated") -> dict[str, AugmentationSpec]:
    return {f"{prefix}/{kind.value}": res.spec for kind, res in results.items()}
