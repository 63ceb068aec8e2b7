"""Tests for dataset ingestion, synthetic data, folds and balanced epochs."""

import json
from collections import Counter

import numpy as np
import pytest

from sslkit.data import (MARROW_SUPPORTS, ImageSample, LabeledDataset,
                         balanced_epoch, default_samples_per_class,
                         generate_synthetic, ingest, read_packed,
                         stratified_kfold, synthetic_preset, write_dataset,
                         write_packed)
from sslkit.exceptions import ConfigError, DataError, ShapeMismatchError
from sslkit.models import FoldPlan


def marrow_labels():
    """Label vector with the class profile of the marrow-longtail preset."""
    spec = synthetic_preset("marrow-longtail")
    return np.repeat(np.arange(len(spec.classes)), [c.count for c in spec.classes])


class TestLabeledDataset:
    """Test the dataset container."""

    def test_counts_match_labels(self, tiny_dataset):
        """class_counts is a recount of the labels."""
        assert tiny_dataset.class_counts.tolist() == [12, 8, 4]
        assert tiny_dataset.class_counts.sum() == len(tiny_dataset)
        assert tiny_dataset.images.shape == (24, 8, 8, 3)

    def test_pixels_are_read_only(self, tiny_dataset):
        """Samples cannot be modified in place."""
        with pytest.raises(ValueError):
            tiny_dataset.samples[0].pixels[0, 0, 0] = 1.0

    def test_label_out_of_range(self):
        """Labels must index the class list."""
        with pytest.raises(DataError, match="outside"):
            LabeledDataset((ImageSample(np.zeros((4, 4, 3)), 2),), ("a", "b"))

    def test_mixed_image_sizes(self):
        """All images share one shape."""
        samples = (ImageSample(np.zeros((4, 4, 3)), 0), ImageSample(np.zeros((5, 4, 3)), 1))
        with pytest.raises(ShapeMismatchError):
            LabeledDataset(samples, ("a", "b"))

    def test_subset_keeps_classes(self, tiny_dataset):
        """A subset keeps the full class list."""
        subset = tiny_dataset.subset([0, 20])
        assert subset.class_names == tiny_dataset.class_names
        assert subset.labels.tolist() == [0, 2]


class TestIngest:
    """Test manifest ingestion."""

    def test_round_trip_through_png(self, tiny_dataset, tmp_path):
        """Written datasets ingest back with 8-bit pixels and the same labels."""
        write_dataset(tiny_dataset, tmp_path)
        loaded = ingest(tmp_path)
        assert loaded.class_names == tiny_dataset.class_names
        assert loaded.labels.tolist() == tiny_dataset.labels.tolist()
        expected = np.round(np.clip(tiny_dataset.images, 0, 1) * 255) / 255
        assert np.array_equal(loaded.images, expected)

    def test_counts_from_manifest(self, tiny_dataset, tmp_path):
        """Three files in two classes give the observed counts."""
        write_dataset(tiny_dataset.subset([0, 1, 12]), tmp_path)
        (tmp_path / "classes.json").unlink()
        loaded = ingest(tmp_path)
        assert loaded.class_names == ("green", "red")
        assert loaded.class_counts.tolist() == [1, 2]

    def test_empty_manifest(self, tmp_path):
        """A header-only manifest gives an empty dataset with the declared classes."""
        (tmp_path / "manifest.csv").write_text("path,label\n")
        loaded = ingest(tmp_path, class_names=["a", "b", "c"])
        assert len(loaded) == 0
        assert loaded.n_classes == 3
        assert loaded.class_counts.tolist() == [0, 0, 0]

    def test_unknown_label(self, tiny_dataset, tmp_path):
        """A label outside the class list is named in the error."""
        write_dataset(tiny_dataset.subset([0]), tmp_path)
        with open(tmp_path / "manifest.csv", "a") as handle:
            handle.write("images/000000.png,purple\n")
        with pytest.raises(DataError, match="purple"):
            ingest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        """The manifest path appears in the error."""
        with pytest.raises(DataError, match="manifest.csv"):
            ingest(tmp_path)

    def test_missing_image(self, tmp_path):
        """A manifest row pointing nowhere names the file."""
        (tmp_path / "manifest.csv").write_text("path,label\nimages/nope.png,a\n")
        with pytest.raises(DataError, match="nope.png"):
            ingest(tmp_path)

    def test_undecodable_image(self, tmp_path):
        """Garbage bytes are reported with their path."""
        (tmp_path / "bad.png").write_bytes(b"not a png at all")
        (tmp_path / "manifest.csv").write_text("path,label\nbad.png,a\n")
        with pytest.raises(DataError, match="bad.png"):
            ingest(tmp_path)

    def test_bad_header(self, tmp_path):
        """The manifest header is checked."""
        (tmp_path / "manifest.csv").write_text("file,class\n")
        with pytest.raises(DataError, match="header"):
            ingest(tmp_path)


class TestPackedFormat:
    """Test the single-file packed container."""

    def test_round_trip(self, tiny_dataset, tmp_path):
        """Packed datasets read back with names, labels and 8-bit pixels."""
        path = write_packed(tiny_dataset, tmp_path / "data.imset")
        assert path.read_bytes()[:6] == b"IMSET1"
        loaded = read_packed(path)
        assert loaded.class_names == tiny_dataset.class_names
        assert loaded.labels.tolist() == tiny_dataset.labels.tolist()
        expected = np.round(np.clip(tiny_dataset.images, 0, 1) * 255) / 255
        assert np.array_equal(loaded.images, expected)

    def test_wrong_magic(self, tmp_path):
        """Other files are rejected."""
        path = tmp_path / "data.imset"
        path.write_bytes(b"PNG....")
        with pytest.raises(DataError, match="IMSET1"):
            read_packed(path)

    def test_truncated(self, tiny_dataset, tmp_path):
        """A cut-off file is reported as truncated."""
        path = write_packed(tiny_dataset, tmp_path / "data.imset")
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(DataError, match="Truncated"):
            read_packed(path)


class TestSyntheticData:
    """Test synthetic long-tail generation."""

    def test_minimal_preset(self):
        """Two classes of five give ten images."""
        dataset = generate_synthetic(synthetic_preset("minimal"), seed=0)
        assert len(dataset) == 10
        assert dataset.class_counts.tolist() == [5, 5]
        assert dataset.image_shape == (32, 32, 3)

    def test_deterministic(self, tiny_spec):
        """Same spec and seed give identical datasets."""
        a = generate_synthetic(tiny_spec, seed=3)
        b = generate_synthetic(tiny_spec, seed=3)
        c = generate_synthetic(tiny_spec, seed=4)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()

    def test_pixels_in_unit_range(self, tiny_dataset):
        """Rendered pixels stay within [0, 1]."""
        assert tiny_dataset.images.min() >= 0.0
        assert tiny_dataset.images.max() <= 1.0

    def test_marrow_preset_supports(self):
        """Supports are scaled by ten and floored at the smallest class."""
        spec = synthetic_preset("marrow-longtail")
        counts = {c.name: c.count for c in spec.classes}
        assert len(counts) == 21
        assert set(counts) == set(MARROW_SUPPORTS)
        assert counts["NGS"] == 2942
        assert counts["ABE"] == 8
        assert counts["ART"] == 1963
        assert min(counts.values()) == 8

    def test_desk_preset_profile(self):
        """Eight classes, 2000 images, head to tail about 100:1."""
        counts = [c.count for c in synthetic_preset("desk-longtail").classes]
        assert len(counts) == 8
        assert sum(counts) == 2000
        assert counts == sorted(counts, reverse=True)
        assert 80 <= counts[0] / counts[-1] <= 120

    def test_unknown_preset(self):
        """Unknown preset names are a configuration error."""
        with pytest.raises(ConfigError):
            synthetic_preset("imagenet")


class TestStratifiedKFold:
    """Test stratified fold plans."""

    def test_single_class_even_split(self):
        """Ten samples of one class give two per fold."""
        plan = stratified_kfold([0] * 10, k=5, seed=0)
        assert plan.fold_sizes() == [2, 2, 2, 2, 2]

    def test_pigeonhole(self):
        """Eight samples over five folds give {2, 2, 2, 1, 1}."""
        plan = stratified_kfold([0] * 8, k=5, seed=1)
        assert sorted(plan.fold_sizes()) == [1, 1, 2, 2, 2]

    def test_every_class_balanced_on_long_tail(self):
        """On the marrow profile every class's fold counts differ by at most one."""
        labels = marrow_labels()
        plan = stratified_kfold(labels, k=5, seed=0)
        assignments = np.asarray(plan.assignments)
        for c in np.unique(labels):
            per_fold = np.bincount(assignments[labels == c], minlength=5)
            assert per_fold.max() - per_fold.min() <= 1

    def test_folds_partition_the_dataset(self, tiny_dataset):
        """Validation folds are disjoint and cover every sample."""
        plan = stratified_kfold(tiny_dataset, k=3, seed=0)
        seen = []
        for fold in range(3):
            val = plan.val_indices(fold)
            assert set(val).isdisjoint(plan.train_indices(fold))
            seen.extend(val)
        assert sorted(seen) == list(range(len(tiny_dataset)))

    def test_seed_changes_shuffle(self):
        """Different seeds give different plans."""
        labels = [0] * 20
        assert stratified_kfold(labels, 4, seed=0).assignments != stratified_kfold(labels, 4, seed=1).assignments

    def test_plan_json(self, tmp_path):
        """Fold plans serialize to {k, seed, assignments}."""
        plan = stratified_kfold([0, 0, 1, 1, 1], k=2, seed=9)
        plan.save(tmp_path / "plan.json")
        document = json.loads((tmp_path / "plan.json").read_text())
        assert set(document) == {"k", "seed", "assignments"}
        assert FoldPlan.load(tmp_path / "plan.json") == plan

    def test_k_below_two(self):
        """k must be at least two."""
        with pytest.raises(ConfigError, match="k"):
            stratified_kfold([0, 1], k=1)

    def test_every_class_smaller_than_k(self):
        """No class large enough for k folds is a data error."""
        with pytest.raises(DataError, match="5 folds"):
            stratified_kfold([0, 0, 1, 1, 2, 2, 2], k=5)

    def test_small_class_spreads_over_distinct_folds(self, caplog):
        """A class below k lands in distinct folds and is logged."""
        labels = np.array([0] * 10 + [1] * 3)
        with caplog.at_level("WARNING", logger="sslkit.data"):
            plan = stratified_kfold(labels, k=5, seed=0)
        folds_of_rare = np.asarray(plan.assignments)[labels == 1]
        assert len(set(folds_of_rare.tolist())) == 3
        assert "fewer than 5 samples" in caplog.text

    def test_negative_seed_is_accepted(self):
        """Seeds outside the unsigned 32-bit range still give a plan."""
        plan = stratified_kfold([0] * 6 + [1] * 6, k=3, seed=-1)
        assert plan.seed == -1
        assert plan.fold_sizes() == [4, 4, 4]


class TestBalancedEpoch:
    """Test balanced epoch index sequences."""

    def test_each_sample_once(self):
        """Two classes of three with N_c = 3 use every sample exactly once."""
        order = balanced_epoch([0, 0, 0, 1, 1, 1], 3, seed=0)
        assert len(order) == 6
        assert sorted(order.tolist()) == [0, 1, 2, 3, 4, 5]

    def test_forced_replacement(self):
        """A singleton class with N_c = 4 repeats its only index."""
        order = balanced_epoch([0, 1, 1, 1, 1, 1], 4, seed=0)
        assert Counter(order.tolist())[0] == 4

    def test_uniform_histogram_on_long_tail(self):
        """Every class of the marrow profile appears exactly 100 times."""
        labels = marrow_labels()
        order = balanced_epoch(labels, 100, seed=5)
        assert len(order) == 21 * 100
        assert np.all(np.bincount(labels[order], minlength=21) == 100)

    def test_head_class_without_replacement(self):
        """Classes larger than N_c never repeat an index."""
        labels = np.array([0] * 50 + [1] * 2)
        order = balanced_epoch(labels, 10, seed=2)
        head = order[labels[order] == 0]
        assert len(set(head.tolist())) == 10

    def test_deterministic(self):
        """The same seed gives the same order."""
        labels = [0, 0, 1, 1, 1, 2]
        assert np.array_equal(balanced_epoch(labels, 4, seed=7), balanced_epoch(labels, 4, seed=7))

    def test_empty_class(self):
        """A requested class without samples is an error."""
        with pytest.raises(DataError, match="class 2"):
            balanced_epoch([0, 1], 2, seed=0, classes=[0, 1, 2])

    def test_default_samples_per_class(self):
        """N_c defaults to the median nonzero support."""
        assert default_samples_per_class([2, 4, 9, 0]) == 4
        assert default_samples_per_class([7]) == 7
