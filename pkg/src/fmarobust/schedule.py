"""Finetuning augmentation strategies.

IA trains against one fixed corruption kind; CA alternates the Combined+
and Combined- sets every epoch (even epochs get Combined+). Per-batch
alternation exists behind an experimental flag for ablations only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import (AugmentationSet, AugmentationSpec, compose,
                      compose_batch, single_set)
from .data import LabeledDataset
from .errors import ContractError
from .rng import RandomStream

STRATEGIES = ("ia", "ca")
GRANULARITIES = ("epoch", "batch")


@dataclass(frozen=True)
class StrategyConfig:
    """Which augmentation schedule drives finetuning."""

    strategy: str = "ca"
    ia_spec: AugmentationSpec | None = None
    plus_set: AugmentationSet | None = None
    minus_set: AugmentationSet | None = None
    granularity: str = "epoch"      # "batch" is experimental

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"strategy must be one of {STRATEGIES}")
        if self.granularity not in GRANULARITIES:
            raise ContractError(f"granularity must be one of {GRANULARITIES}")
        if self.strategy == "ia" and self.ia_spec is None:
            raise ContractError("IA strategy requires ia_spec")
        if self.strategy == "ca":
            if self.plus_set is None or self.minus_set is None:
                raise ContractError("CA strategy requires plus_set and minus_set")
            if self.plus_set.name != "combined_plus":
                raise ContractError("plus_set must be the combined_plus set")
            if self.minus_set.name != "combined_minus":
                raise ContractError("minus_set must be the combined_minus set")


def select_set(config: StrategyConfig, epoch: int) -> AugmentationSet:
    """The augmentation set used for the given epoch (or batch tick)."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    if config.strategy == "ia":
        return single_set(config.ia_spec)
    return config.plus_set if epoch % 2 == 0 else config.minus_set


def make_pair(img: np.ndarray, aug_set: AugmentationSet,
              rng: RandomStream):
    """(clean, augmented) with the clean side passed through untouched."""
    return img, compose(img, aug_set, rng)


def augment_batch(ds: LabeledDataset, indices, aug_set: AugmentationSet,
                  rng: RandomStream, epoch: int) -> np.ndarray:
    """Augmented copies of ds[indices], (B, C, H, W).

    Noise draws depend only on (rng seed, epoch, dataset index), so pairs
    are reproducible regardless of batch order.
    """
    streams = [rng.derive("aug", epoch, int(idx)) for idx in indices]
    out = compose_batch(ds.images[indices], aug_set, streams)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def at_extend(ds: LabeledDataset, aug_set: AugmentationSet,
              rng: RandomStream, epoch: int = 0) -> LabeledDataset:
    """Clean plus augmented copies with duplicated labels (size doubles)."""
    streams = [rng.derive("aug", epoch, idx) for idx in range(len(ds))]
    augmented = compose_batch(ds.images, aug_set, streams)
    prov = dict(ds.provenance)
    prov.update({"extended_with": aug_set.name, "extend_epoch": epoch})
    return LabeledDataset(
        images=np.concatenate([ds.images, augmented]),
        labels=np.concatenate([ds.labels, ds.labels]),
        class_count=ds.class_count, split=ds.split, provenance=prov)
