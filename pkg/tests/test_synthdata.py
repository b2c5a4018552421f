"""Tests for the procedural cross-view dataset generator."""

import numpy as np
import pytest

from crossview.imageio import read_image
from crossview.synthdata import (
    SPLITS,
    SampleRecord,
    SceneSpec,
    decode_normals,
    encode_normals,
    generate_dataset,
    load_sample,
    normal_map_from_gradient,
    scan_split,
    warp_quad,
)

QUANTIZATION = np.sqrt(3.0) / 255.0


def small_spec(**overrides):
    fields = {"classes": 2, "views": 2, "size": 32, "seed": 11}
    fields.update(overrides)
    return SceneSpec(**fields)


def walk_pngs(root):
    return sorted(p for p in root.rglob("*.png"))


class TestSpecValidation:
    def test_valid_spec_passes(self):
        small_spec().validate()

    def test_bad_fields_raise(self):
        with pytest.raises(ValueError, match="class"):
            small_spec(classes=0).validate()
        with pytest.raises(ValueError, match="view"):
            small_spec(views=0).validate()
        with pytest.raises(ValueError, match="size"):
            small_spec(size=8).validate()
        with pytest.raises(ValueError, match="warp"):
            small_spec(warp=0.3).validate()
        with pytest.raises(ValueError, match="jitter"):
            small_spec(jitter=0.6).validate()
        with pytest.raises(ValueError, match="bump"):
            small_spec(gaussians=0).validate()


class TestNormalEncoding:
    def test_round_trip_within_quantization(self):
        rng = np.random.default_rng(42)
        vecs = rng.normal(size=(50, 3))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        decoded = decode_normals(encode_normals(vecs))
        np.testing.assert_allclose(decoded, vecs, atol=1.0 / 255.0)

    def test_flat_field_encodes_straight_up(self):
        flat = normal_map_from_gradient(np.zeros((8, 8)), np.zeros((8, 8)))
        assert np.all(np.abs(flat[..., 0].astype(int) - 128) <= 1)
        assert np.all(np.abs(flat[..., 1].astype(int) - 128) <= 1)
        assert np.all(flat[..., 2] == 255)

    def test_known_slope(self):
        # dh/dx = 1 everywhere: normal is (-1, 0, 1) / sqrt(2).
        gx = np.ones((4, 4))
        gy = np.zeros((4, 4))
        decoded = decode_normals(normal_map_from_gradient(gx, gy))
        expected = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0)
        np.testing.assert_allclose(decoded, np.broadcast_to(expected, (4, 4, 3)), atol=1.0 / 255.0)


class TestWarpQuad:
    def test_corners_stay_inside_their_margin(self):
        rng = np.random.default_rng(42)
        size = 64
        base = np.array([[0.0, 0.0], [63.0, 0.0], [63.0, 63.0], [0.0, 63.0]])
        for _ in range(20):
            quad = warp_quad(rng, size, 0.25)
            assert np.all(quad >= 0.0) and np.all(quad <= 63.0)
            assert np.max(np.abs(quad - base)) <= 0.25 * size

    def test_zero_warp_keeps_full_frame(self):
        rng = np.random.default_rng(42)
        quad = warp_quad(rng, 64, 0.0)
        np.testing.assert_allclose(
            quad, [[0.0, 0.0], [63.0, 0.0], [63.0, 63.0], [0.0, 63.0]], atol=1e-6
        )


class TestGenerateDataset:
    def test_tree_layout_and_counts(self, tmp_path):
        spec = small_spec()
        counts = generate_dataset(spec, tmp_path)
        # Per split: 2 classes x (1 satellite + 2 drone) x (rgb + normal).
        assert counts == {"train": 12, "query": 12, "gallery": 12}
        for split in SPLITS:
            for cid in range(2):
                sat = tmp_path / split / "satellite" / str(cid)
                assert (sat / "0.png").is_file() and (sat / "0_normal.png").is_file()
                drone = tmp_path / split / "drone" / str(cid)
                for i in range(2):
                    assert (drone / f"{i}.png").is_file()
                    assert (drone / f"{i}_normal.png").is_file()

    def test_image_shapes(self, tmp_path):
        spec = small_spec(classes=1, views=1)
        generate_dataset(spec, tmp_path)
        for path in walk_pngs(tmp_path):
            assert read_image(path).shape == (32, 32, 3)

    def test_every_normal_pixel_is_unit_length(self, tmp_path):
        spec = small_spec()
        generate_dataset(spec, tmp_path)
        checked = 0
        for path in walk_pngs(tmp_path):
            if not path.stem.endswith("_normal"):
                continue
            norms = np.linalg.norm(decode_normals(read_image(path)), axis=-1)
            np.testing.assert_allclose(norms, np.ones_like(norms), atol=QUANTIZATION + 1e-9)
            checked += 1
        assert checked == 18

    def test_satellite_shared_across_splits(self, tmp_path):
        generate_dataset(small_spec(), tmp_path)
        for cid in range(2):
            train = (tmp_path / "train" / "satellite" / str(cid) / "0.png").read_bytes()
            query = (tmp_path / "query" / "satellite" / str(cid) / "0.png").read_bytes()
            gallery = (tmp_path / "gallery" / "satellite" / str(cid) / "0.png").read_bytes()
            assert train == query == gallery

    def test_drone_views_differ_within_class(self, tmp_path):
        generate_dataset(small_spec(), tmp_path)
        a = (tmp_path / "train" / "drone" / "0" / "0.png").read_bytes()
        b = (tmp_path / "train" / "drone" / "0" / "1.png").read_bytes()
        assert a != b

    def test_classes_use_independent_scenes(self, tmp_path):
        generate_dataset(small_spec(), tmp_path)
        a = (tmp_path / "train" / "satellite" / "0" / "0.png").read_bytes()
        b = (tmp_path / "train" / "satellite" / "1" / "0.png").read_bytes()
        assert a != b

    def test_fixed_seed_is_byte_identical(self, tmp_path):
        spec = small_spec()
        generate_dataset(spec, tmp_path / "a")
        generate_dataset(spec, tmp_path / "b")
        files_a = walk_pngs(tmp_path / "a")
        files_b = walk_pngs(tmp_path / "b")
        assert [p.relative_to(tmp_path / "a") for p in files_a] == [
            p.relative_to(tmp_path / "b") for p in files_b
        ]
        for pa, pb in zip(files_a, files_b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_different_seed_changes_content(self, tmp_path):
        generate_dataset(small_spec(seed=11), tmp_path / "a")
        generate_dataset(small_spec(seed=12), tmp_path / "b")
        a = (tmp_path / "a" / "train" / "satellite" / "0" / "0.png").read_bytes()
        b = (tmp_path / "b" / "train" / "satellite" / "0" / "0.png").read_bytes()
        assert a != b

    def test_jitter_touches_rgb_only(self, tmp_path):
        generate_dataset(small_spec(jitter=0.0), tmp_path / "plain")
        generate_dataset(small_spec(jitter=0.5), tmp_path / "jittered")
        rel = ("train", "drone", "0")
        plain_rgb = (tmp_path / "plain").joinpath(*rel, "0.png").read_bytes()
        jit_rgb = (tmp_path / "jittered").joinpath(*rel, "0.png").read_bytes()
        plain_normal = (tmp_path / "plain").joinpath(*rel, "0_normal.png").read_bytes()
        jit_normal = (tmp_path / "jittered").joinpath(*rel, "0_normal.png").read_bytes()
        assert plain_rgb != jit_rgb
        assert plain_normal == jit_normal

    def test_invalid_spec_rejected_before_writing(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(small_spec(classes=0), tmp_path)
        assert list(tmp_path.iterdir()) == []


class TestScanSplit:
    def test_enumerates_sorted_records(self, tmp_path):
        generate_dataset(small_spec(), tmp_path)
        records = scan_split(tmp_path, "train")
        assert len(records) == 6
        assert [(r.view, r.class_id, r.index) for r in records] == [
            ("drone", 0, 0),
            ("drone", 0, 1),
            ("drone", 1, 0),
            ("drone", 1, 1),
            ("satellite", 0, 0),
            ("satellite", 1, 0),
        ]
        for record in records:
            assert record.image_path.is_file() and record.normal_path.is_file()

    def test_load_sample_ranges(self, tmp_path):
        generate_dataset(small_spec(classes=1, views=1), tmp_path)
        record = scan_split(tmp_path, "train")[0]
        rgb, normal = load_sample(record)
        assert rgb.shape == (32, 32, 3) and normal.shape == (32, 32, 3)
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0
        assert normal.min() >= -1.0 and normal.max() <= 1.0

    def test_missing_split_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            scan_split(tmp_path, "train")

    def test_missing_normal_sibling_raises(self, tmp_path):
        generate_dataset(small_spec(classes=1, views=1), tmp_path)
        (tmp_path / "train" / "drone" / "0" / "0_normal.png").unlink()
        with pytest.raises(ValueError, match="normal sibling"):
            scan_split(tmp_path, "train")

    def test_non_numeric_class_dir_raises(self, tmp_path):
        generate_dataset(small_spec(classes=1, views=1), tmp_path)
        (tmp_path / "train" / "drone" / "extra").mkdir()
        with pytest.raises(ValueError, match="integer id"):
            scan_split(tmp_path, "train")
