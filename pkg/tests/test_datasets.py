import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poisonsieve.datasets import (
    DataPoint,
    Dataset,
    PoisonTask,
    budget_count,
    class_pixel_centroids,
    export_dataset,
    import_dataset,
    load_image_batch,
    nearest_centroid_labels,
    save_image_batch,
    select_poison_slots,
    synth_dataset,
)
from poisonsieve.errors import ConfigError, FormatError


class TestSynthDataset:
    def test_counts_and_ids(self):
        data = synth_dataset(classes=10, per_class=50, side=16, seed=1)
        assert len(data) == 500
        assert data.ids() == list(range(500))
        assert all(0.0 <= p.image.min() and p.image.max() <= 1.0 for p in data.points)

    def test_zero_noise_identical_within_class(self):
        data = synth_dataset(classes=3, per_class=4, side=8, seed=1, noise_sigma=0.0)
        for label in range(3):
            imgs = [p.image for p in data.points if p.label == label]
            for img in imgs[1:]:
                assert np.array_equal(img, imgs[0])

    def test_nearest_centroid_on_fresh_draw(self):
        train = synth_dataset(classes=10, per_class=50, side=16, seed=2)
        fresh = synth_dataset(classes=10, per_class=20, side=16, seed=3, id_start=10_000)
        centroids = class_pixel_centroids(train)
        predicted = nearest_centroid_labels(fresh.images(), centroids)
        assert (predicted == fresh.labels()).mean() >= 0.95

    def test_single_class_rejected(self):
        with pytest.raises(ConfigError, match="classes"):
            synth_dataset(classes=1, per_class=5, side=8, seed=0)

    def test_invariants_enforced(self):
        good = DataPoint(0, np.zeros((3, 4, 4)), 0)
        with pytest.raises(ConfigError, match="unique"):
            Dataset(points=[good, DataPoint(0, np.zeros((3, 4, 4)), 1)], classes=2)
        with pytest.raises(ConfigError, match="label"):
            Dataset(points=[DataPoint(1, np.zeros((3, 4, 4)), 5)], classes=2)
        with pytest.raises(ConfigError, match="pixel"):
            Dataset(points=[DataPoint(2, np.full((3, 4, 4), 1.5), 0)], classes=2)


class TestProvenance:
    def test_view_strips_provenance(self):
        data = synth_dataset(classes=2, per_class=3, side=8, seed=1)
        view = data.view()
        assert not hasattr(view.points[0], "provenance")

    def test_poison_insertion_is_new_dataset(self):
        data = synth_dataset(classes=2, per_class=3, side=8, seed=1)
        replacement = np.clip(data.points[0].image + 0.1, 0, 1)
        poisoned = data.with_poisons({0: replacement})
        assert data.points[0].provenance == "clean"
        assert poisoned.points[0].provenance == "poisoned"
        assert np.array_equal(poisoned.points[0].image, replacement)
        assert poisoned.points[1].provenance == "clean"

    def test_subset_keeps_points(self):
        data = synth_dataset(classes=2, per_class=3, side=8, seed=1)
        kept = data.subset([0, 2, 4])
        assert kept.ids() == [0, 2, 4]


class TestCifarBinary:
    def test_roundtrip_lossless_at_quantization(self, tmp_path):
        gen = np.random.default_rng(5)
        quantized = np.round(gen.uniform(0, 1, size=(4, 3, 32, 32)) * 255) / 255.0
        data = Dataset(points=[DataPoint(i, quantized[i], i % 10) for i in range(4)], classes=10)
        path = tmp_path / "batch.bin"
        save_image_batch(data, path)
        back = load_image_batch(path)
        assert len(back) == 4
        for orig, loaded in zip(data.points, back.points):
            assert loaded.label == orig.label
            assert np.array_equal(loaded.image, orig.image)

    def test_record_count(self, tmp_path):
        path = tmp_path / "two.bin"
        path.write_bytes(bytes([1]) + bytes(3072) + bytes([2]) + bytes(3072))
        data = load_image_batch(path)
        assert len(data) == 2
        assert [p.label for p in data.points] == [1, 2]

    def test_truncated_file_reports_offset(self, tmp_path):
        path = tmp_path / "trunc.bin"
        path.write_bytes(bytes([1]) + bytes(3072) + bytes([2]) + bytes(100))
        with pytest.raises(FormatError, match="byte 3073"):
            load_image_batch(path)


class TestPoisonTask:
    def test_base_must_differ_from_target(self):
        with pytest.raises(ConfigError, match="base class"):
            PoisonTask(np.zeros((3, 4, 4)), 3, 3, 0.1, 0.1)

    def test_epsilon_range(self):
        with pytest.raises(ConfigError, match="epsilon"):
            PoisonTask(np.zeros((3, 4, 4)), 3, 2, 0.1, 1.5)
        PoisonTask(np.zeros((3, 4, 4)), 3, 2, 0.1, 0.0)  # degenerate budget allowed

    def test_budget_fraction_maps_to_base_class_count(self):
        assert budget_count(0.14, 50) == 7
        assert budget_count(0.04, 50) == 2
        assert budget_count(1.0, 50) == 50
        assert budget_count(5, 50) == 5


class TestSelectPoisonSlots:
    def setup_method(self):
        self.data = synth_dataset(classes=10, per_class=50, side=8, seed=4)

    def task(self, budget):
        target = synth_dataset(10, 1, 8, seed=9, id_start=99999).points[6]
        return PoisonTask(target.image, 6, 8, budget, 0.1)

    def test_full_budget_is_whole_base_class(self):
        slots = select_poison_slots(self.data, self.task(1.0), seed=0)
        assert slots == self.data.class_ids(8)

    def test_zero_budget_empty(self):
        assert select_poison_slots(self.data, self.task(0), seed=0) == []

    def test_over_budget_rejected(self):
        with pytest.raises(ConfigError, match="exceeds"):
            select_poison_slots(self.data, self.task(51), seed=0)

    def test_all_slots_in_base_class(self):
        slots = select_poison_slots(self.data, self.task(0.14), seed=1)
        assert len(slots) == 7
        labels = {self.data.by_id(i).label for i in slots}
        assert labels == {8}

    def test_seeds_vary_selection(self):
        selections = {tuple(select_poison_slots(self.data, self.task(0.14), seed=s))
                      for s in range(100)}
        assert len(selections) > 50  # collisions are rare

    def test_same_seed_same_selection(self):
        a = select_poison_slots(self.data, self.task(0.14), seed=12)
        b = select_poison_slots(self.data, self.task(0.14), seed=12)
        assert a == b


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), budget=st.floats(0.0, 1.0))
def test_slot_budget_invariant(seed, budget):
    data = synth_dataset(classes=3, per_class=10, side=8, seed=1)
    target = synth_dataset(3, 1, 8, seed=2, id_start=777).points[0]
    task = PoisonTask(target.image, 0, 2, budget if budget > 0 else 0.5, 0.1)
    task.poison_budget = budget
    slots = select_poison_slots(data, task, seed=seed)
    assert len(slots) == int(np.floor(budget * 10))
    assert len(set(slots)) == len(slots)


class TestExportImport:
    def test_roundtrip_with_provenance(self, tmp_path):
        data = synth_dataset(classes=2, per_class=3, side=8, seed=6)
        poisoned = data.with_poisons({1: np.clip(data.points[1].image + 0.05, 0, 1)})
        export_dataset(poisoned, tmp_path / "ds")
        back = import_dataset(tmp_path / "ds")
        assert back.classes == 2
        assert back.ids() == poisoned.ids()
        for orig, loaded in zip(poisoned.points, back.points):
            assert loaded.label == orig.label
            assert loaded.provenance == orig.provenance
            assert np.array_equal(loaded.image, orig.image)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError, match="manifest"):
            import_dataset(tmp_path / "missing")
