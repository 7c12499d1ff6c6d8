"""Validation rules for run configurations, label maps, text embeddings and features."""

from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np

from carbseg.config import RunConfig
from carbseg.exceptions import ValidationError
from carbseg.maskgen import FileFeatureProvider
from carbseg.models import (
    IGNORE_INDEX,
    ClassCatalog,
    LabelMap,
    LossMode,
    MaskSource,
    TextEmbeddingSet,
    ValidationResult,
    ValidationSeverity,
    ViewMode,
    WeightingStrategy,
)

logger = logging.getLogger(__name__)

PARALLEL_COSINE = 0.99

ERROR = ValidationSeverity.ERROR.value
WARNING = ValidationSeverity.WARNING.value


def _result(
    rule_id: str,
    severity: str,
    entity_type: str,
    entity_id: str,
    message: str,
    details: dict | None = None,
) -> ValidationResult:
    return ValidationResult(rule_id, severity, entity_type, entity_id, message, details)


def validate_config(config: RunConfig) -> list[ValidationResult]:
    """Check settings that are individually valid but do not fit together."""
    results: list[ValidationResult] = []
    train, synth, data = config.train, config.synthetic, config.data
    crop = train.crop

    # VAL-CFG-001: local crop must fit synthetic scenes
    if data.data == "synthetic" and (crop.crop_w > synth.width or crop.crop_h > synth.height):
        results.append(_result(
            "VAL-CFG-001", ERROR, "config", "crop",
            f"crop {crop.crop_w}x{crop.crop_h} larger than synthetic scene "
            f"{synth.width}x{synth.height}",
        ))
    # VAL-CFG-002: balancing configured but stage 2 is empty
    if train.loss_mode is LossMode.CARB and train.stage2_iters == 0:
        results.append(_result(
            "VAL-CFG-002", WARNING, "config", "stage2_iters",
            "loss_mode = carb has no effect with stage2_iters = 0",
        ))
    # VAL-CFG-003: weighting settings unused by plain loss
    if train.loss_mode is LossMode.PLAIN and train.weighting is WeightingStrategy.FIXED:
        results.append(_result(
            "VAL-CFG-003", WARNING, "config", "weighting",
            "weighting = fixed is ignored when loss_mode = plain",
        ))
    # VAL-CFG-004: local-view settings unused in base mode
    if train.view_mode is ViewMode.BASE and train.local_filter != "image":
        results.append(_result(
            "VAL-CFG-004", WARNING, "config", "local_filter",
            "local_filter has no effect when view_mode = base",
        ))
    # VAL-CFG-005: oracle masks need noise to differ from ground truth
    if (train.mask_source is MaskSource.ORACLE and data.data == "synthetic"
            and synth.noise_fraction == 0):
        results.append(_result(
            "VAL-CFG-005", WARNING, "config", "noise_fraction",
            "oracle masks equal ground truth when noise_fraction = 0",
        ))
    # VAL-CFG-006: oracle masks from files need a noisy label directory
    if (train.mask_source is MaskSource.ORACLE and data.data == "files"
            and data.noisy_labels is None):
        results.append(_result(
            "VAL-CFG-006", ERROR, "config", "noisy_labels",
            "mask_source = oracle with data = files requires noisy_labels",
        ))
    return results


def validate_labels(
    maps: Sequence[tuple[str, LabelMap]], class_count: int, min_pixels: int = 1
) -> list[ValidationResult]:
    results: list[ValidationResult] = []
    for image_id, m in maps:
        # VAL-LBL-001: values outside the label space
        bad = (m.data >= class_count) & (m.data != IGNORE_INDEX)
        if np.any(bad):
            y, x = (int(v) for v in np.argwhere(bad)[0])
            results.append(_result(
                "VAL-LBL-001", ERROR, "label_map", image_id,
                f"pixel (x={x}, y={y}) has value {int(m.data[y, x])} outside 0..{class_count - 1}",
                {"count": int(bad.sum())},
            ))
            continue
        # VAL-LBL-002: no class reaches the presence threshold
        counts = np.bincount(m.data[m.valid].astype(np.int64), minlength=class_count)
        if not np.any(counts >= min_pixels):
            results.append(_result(
                "VAL-LBL-002", WARNING, "label_map", image_id,
                "image-level label set is empty",
            ))
    return results


def validate_label_pairs(
    gts: Sequence[tuple[str, LabelMap]], others: Sequence[tuple[str, LabelMap]]
) -> list[ValidationResult]:
    """VAL-LBL-003: companion maps (noisy masks, predictions) must match ground-truth sizes."""
    results: list[ValidationResult] = []
    by_id = dict(others)
    for image_id, gt in gts:
        other = by_id.get(image_id)
        if other is None:
            results.append(_result(
                "VAL-LBL-003", ERROR, "label_map", image_id, "no companion map for this image",
            ))
        elif other.data.shape != gt.data.shape:
            results.append(_result(
                "VAL-LBL-003", ERROR, "label_map", image_id,
                f"size {other.width}x{other.height} differs from ground truth "
                f"{gt.width}x{gt.height}",
            ))
    return results


def validate_text(
    text: TextEmbeddingSet, catalog: ClassCatalog | None = None
) -> list[ValidationResult]:
    results: list[ValidationResult] = []
    # VAL-TXT-001: one embedding per catalog class
    if catalog is not None and text.class_count != catalog.class_count:
        results.append(_result(
            "VAL-TXT-001", ERROR, "text", "embeddings",
            f"{text.class_count} embeddings for {catalog.class_count} catalog classes",
        ))
    # VAL-TXT-002: near-parallel embeddings make the cosine argmax ambiguous
    unit = text.normalized()
    cos = unit @ unit.T
    for a, b in zip(*np.nonzero(np.triu(cos > PARALLEL_COSINE, k=1))):
        results.append(_result(
            "VAL-TXT-002", WARNING, "text", f"{int(a)}-{int(b)}",
            f"embeddings {int(a)} and {int(b)} are nearly parallel (cos {cos[a, b]:.4f})",
        ))
    return results


def validate_features(
    provider: FileFeatureProvider,
    text: TextEmbeddingSet,
    view_mode: ViewMode = ViewMode.BASE,
) -> list[ValidationResult]:
    results: list[ValidationResult] = []
    scene_ids = provider.scene_ids()
    if not scene_ids:
        results.append(_result(
            "VAL-FEA-001", ERROR, "features", str(provider.root), "no scene holds a global view",
        ))
    for scene_id in scene_ids:
        features = provider.view_features(scene_id)
        # VAL-FEA-001: feature dim must match the text embeddings
        if features.dim != text.dim:
            results.append(_result(
                "VAL-FEA-001", ERROR, "features", scene_id,
                f"feature dim {features.dim} does not match text dim {text.dim}",
            ))
            continue
        # VAL-FEA-002: zero-norm cells become ignore pixels
        zero = int(np.count_nonzero(np.linalg.norm(features.data, axis=2) == 0))
        if zero:
            results.append(_result(
                "VAL-FEA-002", WARNING, "features", scene_id,
                f"{zero} zero-norm feature cells will be ignored",
            ))
        # VAL-FEA-003: local-view modes need stored local views
        if view_mode is not ViewMode.BASE and not provider.available_views(scene_id):
            results.append(_result(
                "VAL-FEA-003", ERROR, "features", scene_id,
                f"view_mode = {view_mode.value} but no local views are stored",
            ))
    return results


def errors_of(results: Sequence[ValidationResult]) -> list[ValidationResult]:
    return [r for r in results if r.severity == ERROR]


def raise_on_errors(results: Sequence[ValidationResult]) -> None:
    """Log warnings and raise ValidationError listing every error finding."""
    for r in results:
        if r.severity == WARNING:
            logger.warning("%s %s %s: %s", r.rule_id, r.entity_type, r.entity_id, r.message)
    errors = errors_of(results)
    if errors:
        lines = "; ".join(f"{r.rule_id} {r.entity_id}: {r.message}" for r in errors)
        raise ValidationError(f"{len(errors)} validation error(s): {lines}")
