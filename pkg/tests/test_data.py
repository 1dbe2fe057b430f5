"""Dataset ingestion: binary record layout, subsetting, synthetic data."""

import numpy as np
import pytest

from fmarobust import data as D
from fmarobust.errors import ContractError, FormatError


def craft_record(label, seed):
    """One 3073-byte CIFAR record with known pixel bytes."""
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=3072, dtype=np.uint8)
    return bytes([label]) + pixels.tobytes(), pixels


class TestBinaryFormat:
    def test_hand_crafted_record_decodes(self, tmp_path):
        rec0, pix0 = craft_record(7, seed=1)
        rec1, _ = craft_record(2, seed=2)
        blob = rec0 + rec1
        blob += b"\x00" * (D.CIFAR_RECORD_BYTES * D.CIFAR_RECORDS_PER_FILE
                           - len(blob))
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(blob)

        images, labels = D._read_cifar_file(str(path))
        assert labels[0] == 7 and labels[1] == 2
        # channel-major planes: R plane, then G, then B, each row-major
        want = pix0.reshape(3, 32, 32).transpose(1, 2, 0) / 255.0
        assert np.array_equal(images[0], want)
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_missing_file_named(self, tmp_path):
        with pytest.raises(FormatError, match="data_batch_1.bin"):
            D._read_cifar_file(str(tmp_path / "data_batch_1.bin"))

    def test_wrong_size_reports_expected_bytes(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(FormatError, match="30730000"):
            D._read_cifar_file(str(path))

    def test_full_load_shapes(self, tmp_path, monkeypatch):
        # shrink records-per-file so the six-file orchestration is testable
        monkeypatch.setattr(D, "CIFAR_RECORDS_PER_FILE", 10)
        rng = np.random.default_rng(0)
        for fname in D.CIFAR_TRAIN_FILES + D.CIFAR_TEST_FILES:
            records = b""
            for _ in range(10):
                label = int(rng.integers(0, 10))
                records += craft_record(label, int(rng.integers(1 << 30)))[0]
            (tmp_path / fname).write_bytes(records)
        train, val = D.load_cifar10(str(tmp_path))
        assert len(train) == 50 and len(val) == 10
        assert train.split == "train" and val.split == "val"
        assert train.labels.min() >= 0 and train.labels.max() < 10
        assert set(train.provenance["digests"]) == set(D.CIFAR_TRAIN_FILES)
        assert set(val.provenance["digests"]) == set(D.CIFAR_TEST_FILES)


class TestSubset:
    def test_exact_balance(self):
        ds = D.synth_dataset(30, 5, seed=0)
        sub = D.subset(ds, per_class=10, seed=1)
        assert len(sub) == 50
        counts = np.bincount(sub.labels, minlength=5)
        assert counts.tolist() == [10] * 5

    def test_deterministic_per_seed(self):
        ds = D.synth_dataset(20, 4, seed=0)
        a = D.subset(ds, 5, seed=3)
        b = D.subset(ds, 5, seed=3)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seeds_differ(self):
        ds = D.synth_dataset(200, 4, seed=0)
        a = D.subset(ds, 50, seed=1)
        b = D.subset(ds, 50, seed=2)
        assert not np.array_equal(a.images, b.images)

    def test_insufficient_members(self):
        ds = D.synth_dataset(4, 3, seed=0)
        with pytest.raises(ContractError):
            D.subset(ds, 5, seed=0)
        with pytest.raises(ContractError):
            D.subset(ds, 13, seed=0)

    def test_provenance_recorded(self):
        ds = D.synth_dataset(10, 3, seed=0)
        sub = D.subset(ds, 2, seed=17)
        assert sub.provenance["subset_seed"] == 17
        assert sub.provenance["subset_per_class"] == 2


class TestSynthetic:
    def test_sizes_and_range(self):
        ds = D.synth_dataset(7, 6, seed=5)
        assert len(ds) == 42
        assert ds.images.shape == (42, 32, 32, 3)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert np.bincount(ds.labels, minlength=6).tolist() == [7] * 6

    def test_deterministic(self):
        a = D.synth_dataset(5, 3, seed=9)
        b = D.synth_dataset(5, 3, seed=9)
        assert np.array_equal(a.images, b.images)

    def test_splits_differ(self):
        a = D.synth_dataset(5, 3, seed=9, split="train")
        b = D.synth_dataset(5, 3, seed=9, split="val")
        assert not np.array_equal(a.images, b.images)

    def test_label_guard(self):
        with pytest.raises(ContractError):
            D.LabeledDataset(images=np.zeros((2, 4, 4, 3)),
                             labels=np.array([0, 5]), class_count=3)
