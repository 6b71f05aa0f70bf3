import numpy as np
import pytest

from ssnet.data import (
    CLASS_GROUND,
    CLASS_SKY,
    META_FILE,
    MIN_SIZE,
    NUM_CLASSES,
    THING_CLASSES,
    Sample,
    read_dataset,
    read_meta,
    split_dataset,
    synth_generate,
    write_dataset,
)
from ssnet.errors import ConfigurationError, FormatError


class TestSynthGenerate:
    def test_same_seed_same_scenes(self):
        a = synth_generate(seed=11, count=3, height=32, width=48)
        b = synth_generate(seed=11, count=3, height=32, width=48)
        for x, y in zip(a.samples, b.samples):
            assert np.array_equal(x.image, y.image)
            assert np.array_equal(x.instances, y.instances)

    def test_different_seed_differs(self):
        a = synth_generate(seed=1, count=1, height=32, width=32)
        b = synth_generate(seed=2, count=1, height=32, width=32)
        assert not np.array_equal(a[0].image, b[0].image)

    def test_single_shape(self):
        dataset = synth_generate(seed=5, count=4, height=40, width=40, max_shapes=1)
        assert [sample.instance_count for sample in dataset.samples] == [1, 1, 1, 1]

    def test_instance_count_bounded(self):
        dataset = synth_generate(seed=9, count=5, height=64, width=64, max_shapes=3)
        assert all(1 <= sample.instance_count <= 3 for sample in dataset.samples)

    def test_centroids_match_recorded_centres(self, small_dataset):
        for sample in small_dataset.samples:
            assert len(sample.centers) == sample.instance_count
            for instance_id, (cy, cx) in enumerate(sample.centers, start=1):
                rows, cols = np.nonzero(sample.instances == instance_id)
                assert rows.mean() == pytest.approx(cy)
                assert cols.mean() == pytest.approx(cx)

    def test_labels_are_consistent(self, small_dataset):
        for sample in small_dataset.samples:
            assert set(np.unique(sample.semantic)) <= set(range(NUM_CLASSES))
            assert np.isin(sample.semantic[sample.instances > 0], THING_CLASSES).all()
            assert np.isin(sample.semantic[sample.instances == 0], (CLASS_SKY, CLASS_GROUND)).all()
            assert sample.image.min() >= 0.0 and sample.image.max() <= 1.0

    def test_rejects_small_scenes(self):
        with pytest.raises(ConfigurationError):
            synth_generate(seed=0, count=1, height=MIN_SIZE - 1, width=64)

    def test_rejects_zero_shapes(self):
        with pytest.raises(ConfigurationError):
            synth_generate(seed=0, count=1, height=32, width=32, max_shapes=0)

    def test_empty_dataset(self):
        assert len(synth_generate(seed=0, count=0, height=32, width=32)) == 0


class TestSample:
    def test_rejects_instance_on_stuff(self):
        semantic = np.zeros((2, 2), dtype=np.int64)
        instances = np.array([[1, 0], [0, 0]])
        with pytest.raises(FormatError):
            Sample(np.zeros((3, 2, 2)), semantic, instances)

    def test_rejects_sparse_ids(self):
        semantic = np.full((2, 2), THING_CLASSES[0])
        instances = np.array([[1, 3], [0, 0]])
        with pytest.raises(FormatError):
            Sample(np.zeros((3, 2, 2)), semantic, instances)


class TestSplit:
    def test_last_fraction_is_validation(self, small_dataset):
        train, val = split_dataset(small_dataset, 0.5)
        assert len(train) == 3 and len(val) == 3
        assert val[0] is small_dataset[3]

    def test_small_fraction_keeps_one(self, small_dataset):
        train, val = split_dataset(small_dataset, 0.01)
        assert (len(train), len(val)) == (5, 1)

    def test_zero_fraction(self, small_dataset):
        train, val = split_dataset(small_dataset, 0.0)
        assert (len(train), len(val)) == (6, 0)

    def test_bad_fraction(self, small_dataset):
        with pytest.raises(ConfigurationError):
            split_dataset(small_dataset, 1.0)


class TestDiskLayout:
    def test_round_trip(self, small_dataset, dataset_dir):
        loaded = read_dataset(dataset_dir)
        assert len(loaded) == len(small_dataset)
        assert loaded.seed == small_dataset.seed
        assert loaded.thing_classes == THING_CLASSES
        for a, b in zip(small_dataset.samples, loaded.samples):
            np.testing.assert_allclose(b.image, a.image, atol=1e-12)
            assert np.array_equal(b.semantic, a.semantic)
            assert np.array_equal(b.instances, a.instances)

    def test_meta_missing_key(self, tmp_path):
        path = tmp_path / META_FILE
        path.write_text("count=1\nclasses=4\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_meta(path)

    def test_meta_bad_line(self, tmp_path):
        path = tmp_path / META_FILE
        path.write_text("count 1\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_meta(path)

    def test_meta_comments(self, tmp_path):
        path = tmp_path / META_FILE
        path.write_text("# scenes\ncount=0\nclasses=4\nthing_classes=2,3\n", encoding="utf-8")
        assert read_meta(path)["thing_classes"] == "2,3"

    def test_missing_image(self, small_dataset, tmp_path):
        write_dataset(small_dataset, tmp_path)
        (tmp_path / "img_00002.ppm").unlink()
        with pytest.raises(OSError):
            read_dataset(tmp_path)
