"""Dataset ingestion: CIFAR-10 binary batches, deterministic class-balanced
subsetting, and a procedurally generated stand-in dataset so every test and
experiment can run without downloads.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .augment import _hsl_to_rgb
from .errors import ContractError, FormatError

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
CIFAR_RECORD_BYTES = 3073            # 1 label byte + 3*32*32 pixel bytes
CIFAR_RECORDS_PER_FILE = 10000


@dataclass
class LabeledDataset:
    """Images (N,H,W,3) in [0,1] with integer labels in [0, class_count)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ContractError(
                f"images must be (N,H,W,3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ContractError(
                f"{len(self.images)} images vs {len(self.labels)} labels")
        if len(self.labels) and (
                self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ContractError(
                f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    def image(self, i: int) -> np.ndarray:
        return self.images[i]

    def batch_nchw(self, indices) -> np.ndarray:
        """(B, C, H, W) view for the network."""
        return np.ascontiguousarray(
            self.images[indices].transpose(0, 3, 1, 2))


def _read_cifar_file(path: str):
    if not os.path.exists(path):
        raise FormatError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    expected = CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE
    if raw.size != expected:
        raise FormatError(
            f"{path}: got {raw.size} bytes, expected {expected} "
            f"({CIFAR_RECORDS_PER_FILE} records of {CIFAR_RECORD_BYTES} bytes)")
    records = raw.reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    # channel-major planes: R then G then B, each 32x32 row-major
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pixels.astype(np.float64) / 255.0, labels


def load_cifar10(dir_path: str):
    """Load the standard binary batches; returns (train, val)."""
    if os.path.isdir(os.path.join(dir_path, "cifar-10-batches-bin")):
        dir_path = os.path.join(dir_path, "cifar-10-batches-bin")

    def read_split(files, split):
        images, labels, digests = [], [], {}
        for fname in files:
            path = os.path.join(dir_path, fname)
            imgs, labs = _read_cifar_file(path)
            with open(path, "rb") as fh:
                digests[fname] = hashlib.sha256(fh.read()).hexdigest()
            images.append(imgs)
            labels.append(labs)
        return LabeledDataset(
            images=np.concatenate(images), labels=np.concatenate(labels),
            class_count=10, split=split,
            provenance={"source": "cifar10", "dir": dir_path,
                        "digests": digests})

    train = read_split(CIFAR_TRAIN_FILES, "train")
    val = read_split(CIFAR_TEST_FILES, "val")
    return train, val


def subset(ds: LabeledDataset, per_class: int, seed: int) -> LabeledDataset:
    """Deterministic class-balanced sample of per_class items per class."""
    if per_class * ds.class_count > len(ds):
        raise ContractError(
            f"cannot take {per_class} x {ds.class_count} from {len(ds)} items")
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    chosen = []
    for cls in range(ds.class_count):
        members = np.flatnonzero(ds.labels == cls)
        if len(members) < per_class:
            raise ContractError(
                f"class {cls} has only {len(members)} members, "
                f"need {per_class}")
        chosen.append(gen.permutation(members)[:per_class])
    order = gen.permutation(np.concatenate(chosen))
    prov = dict(ds.provenance)
    prov.update({"subset_seed": seed, "subset_per_class": per_class})
    return LabeledDataset(
        images=ds.images[order], labels=ds.labels[order],
        class_count=ds.class_count, split=ds.split, provenance=prov)


# ---------------------------------------------------------------------------
# synthetic stand-in dataset
#
# Classes are identified by a (hue, grating orientation) pair where hues
# repeat across class pairs: color alone cannot separate everything, and
# the fine saturation grating carries the rest. That gives every corruption
# kind something real to destroy: blur smooths the grating, saturation
# scaling flattens or clips the saturation stripes (the weak luminance
# stripes sit below the pixel noise), brightness pushes values into the
# clip range, and the noise kinds corrupt everything locally.

SYNTH_HW = 32
_GRATING_PERIOD = 2.8          # pixels; within reach of a 3x3 blur
_PERIOD_JITTER = 0.0           # relative per-image period spread
_SAT_BASE, _SAT_AMP = 0.46, 0.30
_LUM_BASE, _LUM_AMP = 0.50, 0.03
_LUM_JITTER = 0.02             # per-image base luminance spread
_HUE_SHARING = 2               # classes per hue
_HUE_JITTER = 0.015
_THETA_JITTER = 0.05           # radians around the class orientation
_PIXEL_NOISE = 0.035


def synth_dataset(n_per_class: int, class_count: int, seed: int,
                  split: str = "train") -> LabeledDataset:
    """Procedural 32x32 dataset; class -> (shared hue, unique orientation)."""
    if class_count < 2:
        raise ContractError("class_count must be >= 2")
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        [0x5D5A7A11, seed, hash(split) & 0xFFFFFFFF])))
    n = n_per_class * class_count
    labels = np.repeat(np.arange(class_count), n_per_class)
    hue_count = max(1, int(np.ceil(class_count / _HUE_SHARING)))

    yy, xx = np.mgrid[0:SYNTH_HW, 0:SYNTH_HW].astype(np.float64)
    images = np.empty((n, SYNTH_HW, SYNTH_HW, 3))
    for i, cls in enumerate(labels):
        theta = np.pi * cls / class_count + gen.normal(0.0, _THETA_JITTER)
        phase = gen.uniform(0.0, 2.0 * np.pi)
        period = _GRATING_PERIOD * (1.0 + gen.normal(0.0, _PERIOD_JITTER))
        wave = np.cos(
            2.0 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy)
            / period + phase)
        hue = ((cls % hue_count) / hue_count
               + gen.normal(0.0, _HUE_JITTER)) % 1.0
        hue_map = np.full((SYNTH_HW, SYNTH_HW), hue)
        sat = _SAT_BASE + _SAT_AMP * wave
        lum = (_LUM_BASE + gen.normal(0.0, _LUM_JITTER)) + _LUM_AMP * wave
        rgb = _hsl_to_rgb(hue_map, np.clip(sat, 0.0, 1.0),
                          np.clip(lum, 0.05, 0.95))
        rgb = rgb + gen.normal(0.0, _PIXEL_NOISE, rgb.shape)
        images[i] = np.clip(rgb, 0.0, 1.0)

    order = gen.permutation(n)
    return LabeledDataset(
        images=images[order], labels=labels[order], class_count=class_count,
        split=split,
        provenance={"source": "synthetic", "seed": seed,
                    "n_per_class": n_per_class})


def load_or_synth(data_dir: str | None, train_per_class: int,
                  val_per_class: int, seed: int):
    """CIFAR-10 subsets when the binaries exist, synthetic otherwise."""
    if data_dir and (
            os.path.isdir(os.path.join(data_dir, "cifar-10-batches-bin"))
            or os.path.exists(os.path.join(data_dir, CIFAR_TRAIN_FILES[0]))):
        train_full, val_full = load_cifar10(data_dir)
        return (subset(train_full, train_per_class, seed),
                subset(val_full, val_per_class, seed + 1))
    train = synth_dataset(train_per_class, 10, seed, split="train")
    val = synth_dataset(val_per_class, 10, seed + 1, split="val")
    return train, val
