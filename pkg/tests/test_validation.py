"""Tests for the validation rules."""

import logging

import numpy as np
import pytest

from carbseg import exporter
from carbseg.config import from_mapping
from carbseg.exceptions import ValidationError
from carbseg.maskgen import FileFeatureProvider
from carbseg.models import IGNORE_INDEX, LabelMap, TextEmbeddingSet, ValidationResult, ViewMode
from carbseg.validator import (
    errors_of,
    raise_on_errors,
    validate_config,
    validate_features,
    validate_label_pairs,
    validate_labels,
    validate_text,
)
from tests.conftest import TINY_CONFIG, label_map


def rule_ids(results):
    return [r.rule_id for r in results]


class TestValidateConfig:
    def test_clean(self):
        assert validate_config(from_mapping({k: str(v) for k, v in TINY_CONFIG.items()})) == []

    def test_crop_larger_than_scene(self):
        config = from_mapping({"width": "32", "height": "32", "stride": "4",
                               "small_min": "4", "small_max": "8"})
        results = validate_config(config)
        assert rule_ids(errors_of(results)) == ["VAL-CFG-001"]

    def test_carb_without_stage_two(self):
        results = validate_config(from_mapping({"loss_mode": "carb", "stage2_iters": "0"}))
        assert rule_ids(results) == ["VAL-CFG-002"]
        assert results[0].severity == "WARNING"

    def test_fixed_weight_with_plain_loss(self):
        assert rule_ids(validate_config(from_mapping({"weighting": "fixed"}))) == ["VAL-CFG-003"]

    def test_local_filter_in_base_mode(self):
        results = validate_config(from_mapping({"local_filter": "crop"}))
        assert rule_ids(results) == ["VAL-CFG-004"]

    def test_oracle_without_noise(self):
        results = validate_config(from_mapping({"mask_source": "oracle"}))
        assert rule_ids(results) == ["VAL-CFG-005"]

    def test_oracle_files_need_noisy_labels(self, tmp_path):
        config = from_mapping({
            "data": "files", "features_root": str(tmp_path), "text": "t.dtn1",
            "catalog": "camvid", "mask_source": "oracle",
        })
        assert rule_ids(errors_of(validate_config(config))) == ["VAL-CFG-006"]


class TestValidateLabels:
    def test_clean(self):
        assert validate_labels([("a", label_map([[0, 1], [IGNORE_INDEX, 2]]))], 3) == []

    def test_out_of_range_names_first_pixel(self):
        results = validate_labels([("a", label_map([[0, 5], [7, 1]]))], 3)
        assert rule_ids(results) == ["VAL-LBL-001"]
        assert "x=1, y=0" in results[0].message
        assert results[0].details == {"count": 2}

    def test_empty_label_set(self):
        results = validate_labels([("a", LabelMap.filled(2, 2))], 3)
        assert rule_ids(results) == ["VAL-LBL-002"]

    def test_threshold_applies(self):
        results = validate_labels([("a", label_map([[0, 1]]))], 3, min_pixels=2)
        assert rule_ids(results) == ["VAL-LBL-002"]

    def test_pairs(self):
        gts = [("a", LabelMap.filled(2, 2, 0)), ("b", LabelMap.filled(2, 2, 0))]
        others = [("a", LabelMap.filled(3, 2, 0))]
        results = validate_label_pairs(gts, others)
        assert [(r.rule_id, r.entity_id) for r in results] == [
            ("VAL-LBL-003", "a"), ("VAL-LBL-003", "b"),
        ]
        assert "3x2" in results[0].message


class TestValidateText:
    def test_count_must_match_catalog(self, ab_catalog):
        text = TextEmbeddingSet(np.eye(3))
        assert rule_ids(validate_text(text, ab_catalog)) == ["VAL-TXT-001"]

    def test_near_parallel_rows(self):
        text = TextEmbeddingSet(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.01]]))
        results = validate_text(text)
        assert [(r.rule_id, r.entity_id) for r in results] == [("VAL-TXT-002", "0-2")]

    def test_clean(self, ab_catalog):
        assert validate_text(TextEmbeddingSet(np.eye(2)), ab_catalog) == []


class TestValidateFeatures:
    @pytest.fixture
    def root(self, tmp_path):
        features = np.ones((2, 2, 3))
        features[0, 0] = 0.0
        exporter.write_tensor(tmp_path / "s1" / "global.dtn1", features)
        exporter.write_tensor(tmp_path / "s2" / "global.dtn1", np.ones((2, 2, 4)))
        return tmp_path

    def test_findings(self, root):
        provider = FileFeatureProvider(root, 16)
        results = validate_features(provider, TextEmbeddingSet(np.eye(3)))
        assert [(r.rule_id, r.entity_id) for r in results] == [
            ("VAL-FEA-002", "s1"), ("VAL-FEA-001", "s2"),
        ]

    def test_local_views_required(self, root):
        provider = FileFeatureProvider(root, 16)
        results = validate_features(provider, TextEmbeddingSet(np.eye(3)), ViewMode.LOCAL)
        assert ("VAL-FEA-003", "s1") in [(r.rule_id, r.entity_id) for r in results]

    def test_no_scenes(self, tmp_path):
        results = validate_features(FileFeatureProvider(tmp_path), TextEmbeddingSet(np.eye(2)))
        assert rule_ids(results) == ["VAL-FEA-001"]


class TestRaiseOnErrors:
    def test_warnings_are_logged(self, caplog):
        warning = ValidationResult("VAL-X", "WARNING", "text", "t", "just so you know")
        with caplog.at_level(logging.WARNING):
            raise_on_errors([warning])
        assert "just so you know" in caplog.text

    def test_errors_listed(self):
        results = [
            ValidationResult("VAL-A", "ERROR", "label_map", "a", "bad"),
            ValidationResult("VAL-B", "ERROR", "label_map", "b", "worse"),
        ]
        with pytest.raises(ValidationError, match="2 validation error.*VAL-A a: bad; VAL-B b"):
            raise_on_errors(results)
