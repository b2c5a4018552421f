"""Tests for dataset loading, batch composition, the train loop, and embedding."""

import numpy as np
import pytest

from crossview.model import ModelConfig, build_model
from crossview.retrieval import VIEW_DRONE, VIEW_SATELLITE, build_index, evaluate_retrieval
from crossview.synthdata import SceneSpec, generate_dataset
from crossview.training import (
    DataSet,
    TrainConfig,
    embed_dataset,
    load_dataset,
    sample_batch,
    train,
    write_loss_log,
)


def tiny_model(cls=2, fusion=True, seed=0):
    config = ModelConfig(
        stage_channels=(4, 4, 4, 4),
        input_size=(32, 32),
        d=2,
        cls=cls,
        v_dim=16,
        seed=seed,
        fusion=fusion,
    )
    return build_model(config)


@pytest.fixture(scope="module")
def dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_dataset(SceneSpec(classes=2, views=2, size=32, seed=3), root)
    return root


class TestTrainConfig:
    def test_defaults_validate(self):
        TrainConfig(steps=10).validate()

    def test_invalid_fields_raise(self):
        with pytest.raises(ValueError, match="steps"):
            TrainConfig(steps=0).validate()
        with pytest.raises(ValueError, match="learning rate"):
            TrainConfig(steps=1, lr=0.0).validate()
        with pytest.raises(ValueError, match="momentum"):
            TrainConfig(steps=1, momentum=1.0).validate()
        with pytest.raises(ValueError, match="margin"):
            TrainConfig(steps=1, margin=0.0).validate()
        with pytest.raises(ValueError, match="classes per batch"):
            TrainConfig(steps=1, classes_per_batch=1).validate()
        with pytest.raises(ValueError, match="sample per class"):
            TrainConfig(steps=1, samples_per_class=0).validate()


class TestLoadDataset:
    def test_shapes_labels_and_ranges(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        # 2 classes x (2 drone + 1 satellite).
        assert len(data) == 6
        assert data.rgb.shape == (6, 3, 32, 32)
        assert data.normals.shape == (6, 3, 32, 32)
        assert data.image_size == (32, 32)
        assert data.class_ids == [0, 1]
        assert set(data.labels.tolist()) == {0, 1}
        assert set(data.views.tolist()) == {VIEW_DRONE, VIEW_SATELLITE}
        assert data.rgb.min() >= -1.0 and data.rgb.max() <= 1.0
        assert data.normals.min() >= -1.0 and data.normals.max() <= 1.0

    def test_noncontiguous_class_ids_map_to_labels(self, tmp_path):
        generate_dataset(SceneSpec(classes=2, views=1, size=32, seed=3), tmp_path)
        for split in ("train", "query", "gallery"):
            for view in ("drone", "satellite"):
                base = tmp_path / split / view
                (base / "1").rename(base / "7")
                (base / "0").rename(base / "3")
        data = load_dataset(tmp_path, "train")
        assert data.class_ids == [3, 7]
        assert set(data.labels.tolist()) == {0, 1}


class TestSampleBatch:
    def test_batch_composition(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        rng = np.random.default_rng(42)
        idx = sample_batch(data, rng, classes_per_batch=2, samples_per_class=2)
        assert idx.shape == (8,)
        labels = data.labels[idx]
        views = data.views[idx]
        for label in np.unique(labels):
            for view in (VIEW_DRONE, VIEW_SATELLITE):
                assert np.count_nonzero((labels == label) & (views == view)) == 2

    def test_seeded_batches_repeat(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        a = sample_batch(data, np.random.default_rng(7), 2, 2)
        b = sample_batch(data, np.random.default_rng(7), 2, 2)
        np.testing.assert_array_equal(a, b)

    def test_classes_per_batch_clamped_to_available(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        idx = sample_batch(data, np.random.default_rng(0), classes_per_batch=8, samples_per_class=1)
        assert idx.shape == (4,)

    def test_missing_view_raises(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        drone_only = DataSet(
            class_ids=data.class_ids,
            rgb=data.rgb[data.views == VIEW_DRONE],
            normals=data.normals[data.views == VIEW_DRONE],
            labels=data.labels[data.views == VIEW_DRONE],
            views=data.views[data.views == VIEW_DRONE],
        )
        with pytest.raises(ValueError, match="no samples for view"):
            sample_batch(drone_only, np.random.default_rng(0), 2, 1)


class TestTrain:
    def test_loss_decreases(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        model = tiny_model()
        result = train(model, data, TrainConfig(steps=25, classes_per_batch=2, seed=0))
        assert len(result.loss_log) == 25
        assert result.final_loss < result.loss_log[0][1]
        assert all(np.isfinite(row[1]) for row in result.loss_log)

    def test_identical_seed_gives_identical_log(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        logs = []
        for _ in range(2):
            model = tiny_model(seed=1)
            result = train(model, data, TrainConfig(steps=8, classes_per_batch=2, seed=5))
            logs.append(result.loss_log)
        assert logs[0] == logs[1]

    def test_rgb_only_mode_trains(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        model = tiny_model(fusion=False)
        result = train(
            model, data, TrainConfig(steps=8, classes_per_batch=2, use_normals=False, seed=0)
        )
        assert len(result.loss_log) == 8
        both = train(
            tiny_model(fusion=False), data, TrainConfig(steps=8, classes_per_batch=2, seed=0)
        )
        assert both.loss_log != result.loss_log

    def test_input_size_mismatch_raises(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        config = ModelConfig(
            stage_channels=(4, 4, 4, 4), input_size=(16, 16), d=2, cls=2, v_dim=16
        )
        with pytest.raises(ValueError, match="model expects"):
            train(build_model(config), data, TrainConfig(steps=1, classes_per_batch=2))

    def test_class_count_mismatch_raises(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        with pytest.raises(ValueError, match="classifier expects"):
            train(tiny_model(cls=5), data, TrainConfig(steps=1, classes_per_batch=2))

    def test_non_finite_loss_aborts(self, dataset_root):
        data = load_dataset(dataset_root, "train")
        model = tiny_model()
        bad = model.parameters()[0]
        bad.data = np.full_like(bad.data, np.nan)
        with pytest.raises(FloatingPointError, match="non-finite loss at step 0"):
            train(model, data, TrainConfig(steps=3, classes_per_batch=2))

    def test_loss_log_file(self, dataset_root, tmp_path):
        data = load_dataset(dataset_root, "train")
        result = train(tiny_model(), data, TrainConfig(steps=4, classes_per_batch=2))
        path = tmp_path / "runs" / "loss.log"
        write_loss_log(path, result)
        lines = path.read_text().splitlines()
        assert lines[0] == "step total triplet ce"
        assert len(lines) == 5
        step, total, trip, ce = lines[1].split()
        assert int(step) == 0
        assert float(total) == pytest.approx(float(trip) + float(ce))


class TestEmbedDataset:
    def test_descriptors_cover_dataset_with_unit_norm(self, dataset_root):
        data = load_dataset(dataset_root, "query")
        model = tiny_model()
        descriptors = embed_dataset(model, data, batch_size=4)
        assert len(descriptors) == len(data)
        for (ident, view, vec), label, view_code in zip(descriptors, data.labels, data.views):
            assert ident == data.class_ids[int(label)]
            assert view == int(view_code)
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-9)

    def test_batch_size_does_not_change_output(self, dataset_root):
        data = load_dataset(dataset_root, "query")
        model = tiny_model()
        small = embed_dataset(model, data, batch_size=2)
        large = embed_dataset(model, data, batch_size=64)
        for (id_a, view_a, vec_a), (id_b, view_b, vec_b) in zip(small, large):
            assert id_a == id_b and view_a == view_b
            np.testing.assert_allclose(vec_a, vec_b, atol=1e-12)

    def test_rgb_only_embedding_differs(self, dataset_root):
        data = load_dataset(dataset_root, "query")
        model = tiny_model()
        with_normals = embed_dataset(model, data)
        without = embed_dataset(model, data, use_normals=False)
        deltas = [np.max(np.abs(a[2] - b[2])) for a, b in zip(with_normals, without)]
        assert max(deltas) > 1e-6

    def test_size_mismatch_raises(self, dataset_root):
        data = load_dataset(dataset_root, "query")
        config = ModelConfig(
            stage_channels=(4, 4, 4, 4), input_size=(16, 16), d=2, cls=2, v_dim=16
        )
        with pytest.raises(ValueError, match="model expects"):
            embed_dataset(build_model(config), data)

    def test_self_retrieval_round_trip(self, dataset_root):
        gallery_data = load_dataset(dataset_root, "gallery")
        model = tiny_model()
        descriptors = embed_dataset(model, gallery_data)
        sat = build_index([d for d in descriptors if d[1] == VIEW_SATELLITE])
        metrics = evaluate_retrieval(sat, sat, ks=(1,))
        assert metrics["R@1"] == 1.0
        assert metrics["AP"] == pytest.approx(1.0)
