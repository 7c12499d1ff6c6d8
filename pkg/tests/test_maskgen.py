"""Tests for cosine-argmax pseudo-masks, crop sampling, providers and pasting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from carbseg import exporter
from carbseg.exceptions import MissingViewError, ValidationError
from carbseg.labels import view_labels
from carbseg.maskgen import (
    FileFeatureProvider,
    compose_tiled_mask,
    cosine_pseudo_mask,
    local_view_features,
    paste_local_mask,
    quarter_tiles,
    sample_crop,
)
from carbseg.models import (
    IGNORE_INDEX,
    CropConfig,
    CropSpec,
    FeatureMap,
    LabelMap,
    SceneRecord,
    TextEmbeddingSet,
)
from carbseg.rng import stream

AXES = TextEmbeddingSet(np.array([[1.0, 0.0], [0.0, 1.0]]))


def brute_force_mask(f, t):
    """Double-precision cosine argmax, one cell at a time."""
    out = np.zeros(f.shape[:2], dtype=np.int64)
    for y in range(f.shape[0]):
        for x in range(f.shape[1]):
            cell = f[y, x].astype(np.float64)
            best, best_score = 0, -np.inf
            for k in range(t.shape[0]):
                row = t[k].astype(np.float64)
                score = cell @ row / (np.linalg.norm(cell) * np.linalg.norm(row))
                if score > best_score:
                    best, best_score = k, score
            out[y, x] = best
    return out


class TestCosinePseudoMask:
    def test_axis_aligned(self):
        f = FeatureMap(np.array([[[0.9, 0.1], [0.2, 0.8]]]))
        assert cosine_pseudo_mask(f, AXES).data.tolist() == [[0, 1]]

    def test_scaled_text_row(self):
        t = TextEmbeddingSet(np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 1.0], [3.0, 0.0, 1.0]]))
        for k in range(3):
            f = FeatureMap((7.5 * t.data[k])[None, None, :])
            assert cosine_pseudo_mask(f, t).data[0, 0] == k

    def test_matches_brute_force(self):
        rng = np.random.default_rng(19)
        f = rng.standard_normal((4, 4, 8))
        t = rng.standard_normal((5, 8))
        mask = cosine_pseudo_mask(FeatureMap(f), TextEmbeddingSet(t))
        assert np.array_equal(mask.data, brute_force_mask(f, t))

    def test_matches_brute_force_many(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            h, w = (int(v) for v in rng.integers(1, 17, size=2))
            d = int(rng.integers(2, 33))
            c = int(rng.integers(2, 8))
            f, t = rng.standard_normal((h, w, d)), rng.standard_normal((c, d))
            mask = cosine_pseudo_mask(FeatureMap(f), TextEmbeddingSet(t))
            assert np.array_equal(mask.data, brute_force_mask(f, t))

    def test_dim_mismatch(self):
        with pytest.raises(ValidationError, match="dim"):
            cosine_pseudo_mask(FeatureMap(np.ones((1, 1, 3))), AXES)

    def test_empty_allowed(self):
        with pytest.raises(ValidationError):
            cosine_pseudo_mask(FeatureMap(np.ones((1, 1, 2))), AXES, set())

    def test_zero_norm_cell_ignored(self, caplog):
        f = FeatureMap(np.array([[[0.0, 0.0], [1.0, 0.0]]]))
        assert cosine_pseudo_mask(f, AXES).data.tolist() == [[IGNORE_INDEX, 0]]
        assert "zero-norm" in caplog.text

    def test_singleton_allowed_is_constant(self, rng):
        t = TextEmbeddingSet(rng.standard_normal((4, 6)))
        f = FeatureMap(rng.standard_normal((3, 5, 6)))
        assert np.all(cosine_pseudo_mask(f, t, {2}).data == 2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_positive_rescaling_invariance(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.standard_normal((3, 3, 4))
        t = rng.standard_normal((3, 4))
        cell_scale = rng.uniform(0.1, 10.0, size=(3, 3, 1))
        row_scale = rng.uniform(0.1, 10.0, size=(3, 1))
        a = cosine_pseudo_mask(FeatureMap(f), TextEmbeddingSet(t))
        b = cosine_pseudo_mask(FeatureMap(f * cell_scale), TextEmbeddingSet(t * row_scale))
        scores = (f / np.linalg.norm(f, axis=2, keepdims=True)) @ (
            t / np.linalg.norm(t, axis=1, keepdims=True)
        ).T
        top2 = np.sort(scores, axis=2)[:, :, -2:]
        clear = (top2[:, :, 1] - top2[:, :, 0]) > 1e-9
        assert np.array_equal(a.data[clear], b.data[clear])


class TestSampleCrop:
    def test_forced_placement(self):
        rng = stream(1, "test")
        for _ in range(20):
            spec = sample_crop(rng, 512, 512, CropConfig())
            assert (spec.x0, spec.y0) == (0, 0)
            assert 1.0 <= spec.resize_ratio <= 2.0

    def test_ratio_quantized(self):
        rng = stream(2, "test")
        for _ in range(50):
            spec = sample_crop(rng, 64, 64, CropConfig(16, 16, 1.0, 2.0))
            assert spec.resize_ratio == spec.r_milli / 1000

    def test_deterministic(self):
        a = [sample_crop(stream(4, "t"), 100, 80, CropConfig(20, 30)) for _ in range(3)]
        b = [sample_crop(stream(4, "t"), 100, 80, CropConfig(20, 30)) for _ in range(3)]
        assert a == b

    def test_crop_larger_than_frame(self):
        with pytest.raises(ValidationError, match="larger than frame"):
            sample_crop(stream(0, "t"), 256, 512, CropConfig())

    def test_x0_uniform(self):
        rng = stream(5, "chi-square")
        xs = [sample_crop(rng, 1024, 512, CropConfig()).x0 for _ in range(10_000)]
        counts = np.bincount(xs, minlength=513)
        assert counts.size == 513
        assert chisquare(counts).pvalue > 0.01


class TestFileFeatureProvider:
    @pytest.fixture
    def root(self, tmp_path):
        scene = tmp_path / "features" / "s1"
        exporter.write_tensor(scene / "global.dtn1", np.ones((2, 2, 3)))
        exporter.write_tensor(scene / "0_0_16_16_1500.dtn1", np.ones((1, 1, 3)))
        exporter.write_tensor(scene / "0_0_32_32_1250.dtn1", np.ones((2, 2, 3)))
        (tmp_path / "features" / "empty").mkdir()
        return tmp_path / "features"

    def test_scene_ids(self, root):
        assert FileFeatureProvider(root, 16).scene_ids() == ["s1"]

    def test_available_views(self, root):
        views = FileFeatureProvider(root, 16).available_views("s1")
        assert CropSpec(0, 0, 16, 16, 1.5) in views
        assert len(views) == 2

    def test_missing_view_names_scene_and_view(self, root):
        provider = FileFeatureProvider(root, 16)
        with pytest.raises(MissingViewError, match=r"'s1'.*8_8_16_16_1000"):
            provider.view_features("s1", CropSpec(8, 8, 16, 16, 1.0))

    def test_sampling_picks_stored_views(self, root):
        provider = FileFeatureProvider(root, 16)
        scene = SceneRecord("s1", 32, 32)
        rng = stream(0, "t")
        assert provider.sample_local_view(rng, scene, CropConfig()) == CropSpec(0, 0, 16, 16, 1.5)
        assert provider.sample_global_view(rng, scene, CropConfig()) == CropSpec(0, 0, 32, 32, 1.25)

    def test_no_local_views(self, root):
        provider = FileFeatureProvider(root, 16)
        with pytest.raises(MissingViewError):
            provider.sample_local_view(stream(0, "t"), SceneRecord("empty", 32, 32), CropConfig())

    def test_grid_shape_checked(self, root):
        provider = FileFeatureProvider(root, 8)
        with pytest.raises(ValidationError, match="feature grid"):
            local_view_features(provider, SceneRecord("s1", 32, 32), CropSpec(0, 0, 16, 16, 1.5))


class TestLocalViewFeatures:
    def test_noiseless_view_reproduces_ground_truth(self, tiny_dataset, tiny_provider):
        rng = stream(11, "views")
        for scene in tiny_dataset.records():
            for _ in range(5):
                spec = sample_crop(rng, scene.width, scene.height, CropConfig(16, 16, 1.0, 2.0))
                f = local_view_features(tiny_provider, scene, spec)
                assert (f.height, f.width) == spec.grid_shape(tiny_provider.stride)
                mask = cosine_pseudo_mask(f, tiny_dataset.text)
                assert mask == view_labels(scene.ground_truth, spec, tiny_provider.stride)

    def test_view_outside_scene(self, tiny_dataset, tiny_provider):
        scene = tiny_dataset.records()[0]
        with pytest.raises(ValidationError, match="does not fit"):
            local_view_features(tiny_provider, scene, CropSpec(24, 0, 16, 16))


class TestPasteLocalMask:
    def test_full_frame_identity(self):
        local = LabelMap(np.array([[1, 2], [3, 4]], dtype=np.uint8))
        assert paste_local_mask(2, 2, local, CropSpec.full_frame(2, 2)) == local

    def test_outside_crop_is_ignore(self):
        local = LabelMap(np.array([[7]], dtype=np.uint8))
        out = paste_local_mask(3, 2, local, CropSpec(1, 0, 1, 1))
        assert out.data.tolist() == [[IGNORE_INDEX, 7, IGNORE_INDEX], [IGNORE_INDEX] * 3]

    def test_outside_crop_keeps_base(self):
        local = LabelMap(np.array([[7]], dtype=np.uint8))
        out = paste_local_mask(2, 1, local, CropSpec(1, 0, 1, 1), LabelMap.filled(2, 1, 3))
        assert out.data.tolist() == [[3, 7]]

    def test_ratio_two_collapses_blocks(self):
        local = LabelMap(np.arange(16, dtype=np.uint8).reshape(4, 4))
        out = paste_local_mask(2, 2, local, CropSpec(0, 0, 2, 2, 2.0))
        assert out.data.tolist() == [[0, 2], [8, 10]]

    def test_geometry_mismatch(self):
        local = LabelMap(np.zeros((3, 3), dtype=np.uint8))
        with pytest.raises(ValidationError, match="does not match view"):
            paste_local_mask(4, 4, local, CropSpec(0, 0, 2, 2, 2.0))

    def test_read_back_crop(self, rng):
        spec = CropSpec(3, 5, 6, 4, 1.5)
        local = LabelMap(rng.integers(0, 9, size=(spec.view_height, spec.view_width)))
        out = paste_local_mask(12, 12, local, spec)
        region = out.data[5:9, 3:9]
        rows = (np.arange(4) * spec.view_height) // 4
        cols = (np.arange(6) * spec.view_width) // 6
        assert np.array_equal(region, local.data[rows[:, None], cols[None, :]])


class TestQuarterTiling:
    def test_tiles_cover_frame(self):
        tiles = quarter_tiles(5, 4)
        assert [(t.x0, t.y0, t.crop_w, t.crop_h) for t in tiles] == [
            (0, 0, 2, 2), (2, 0, 3, 2), (0, 2, 2, 2), (2, 2, 3, 2),
        ]

    def test_concatenation(self):
        tiles = quarter_tiles(4, 4)
        locals_ = [LabelMap.filled(2, 2, k) for k in range(4)]
        out = compose_tiled_mask(4, 4, list(zip(tiles, locals_)))
        assert out.data.tolist() == [
            [0, 0, 1, 1],
            [0, 0, 1, 1],
            [2, 2, 3, 3],
            [2, 2, 3, 3],
        ]

    def test_no_tiles(self):
        assert compose_tiled_mask(2, 2, []) == LabelMap.filled(2, 2)
