"""Confusion-matrix mIoU evaluation."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Protocol, TypeVar

import numpy as np

from carbseg import exporter
from carbseg.exceptions import ValidationError
from carbseg.labels import resize_labels_nearest
from carbseg.models import (
    IGNORE_INDEX,
    ClassCatalog,
    CropSpec,
    EvalReport,
    FeatureMap,
    LabelMap,
    SceneRecord,
)

logger = logging.getLogger(__name__)

_T = TypeVar("_T")


class Predictor(Protocol):
    def predict(self, features: FeatureMap) -> LabelMap: ...


class _Features(Protocol):
    def input_features(self, scene_id: str, spec: CropSpec | None = None) -> FeatureMap: ...


def confusion_matrix(pred: LabelMap, gt: LabelMap, class_count: int) -> np.ndarray:
    """C×(C+1) pixel counts, rows = ground truth.

    Ground-truth ignore pixels are skipped. The extra last column counts
    valid pixels whose prediction is not a class (ignore or out of range);
    they are misses for the ground-truth class.
    """
    if (pred.height, pred.width) != (gt.height, gt.width):
        logger.debug("resizing %dx%d prediction to %dx%d ground truth",
                     pred.width, pred.height, gt.width, gt.height)
        pred = resize_labels_nearest(pred, gt.width, gt.height)
    valid = gt.data != IGNORE_INDEX
    truth = gt.data[valid].astype(np.int64)
    if truth.size and truth.max() >= class_count:
        raise ValidationError(f"ground-truth label {int(truth.max())} outside 0..{class_count - 1}")
    guess = pred.data[valid].astype(np.int64)
    guess = np.where(guess < class_count, guess, class_count)
    width = class_count + 1
    counts = np.bincount(truth * width + guess, minlength=class_count * width)
    return counts.reshape(class_count, class_count + 1)


def report_from_confusion(counts: np.ndarray) -> EvalReport:
    """Per-class IoU ``TP / (TP + FP + FN)``; classes with a zero denominator are undefined."""
    class_count = counts.shape[0]
    square = counts[:, :class_count]
    tp = np.diag(square)
    fn = counts.sum(axis=1) - tp
    fp = square.sum(axis=0) - tp
    union = tp + fp + fn
    per_class: list[float | None] = [
        None if union[c] == 0 else float(tp[c] / union[c]) for c in range(class_count)
    ]
    defined = [v for v in per_class if v is not None]
    miou = float(np.mean(defined)) if defined else float("nan")
    report = EvalReport(per_class_iou=tuple(per_class), miou=miou, confusion=square.copy())
    if report.undefined_classes:
        logger.warning("IoU undefined for classes %s (absent and never predicted)",
                       list(report.undefined_classes))
    return report


class EvalAccumulator:
    """Running confusion matrix over many prediction / ground-truth pairs."""

    def __init__(self, class_count: int) -> None:
        self.class_count = class_count
        self.counts = np.zeros((class_count, class_count + 1), dtype=np.int64)

    def add(self, pred: LabelMap, gt: LabelMap) -> None:
        self.counts += confusion_matrix(pred, gt, self.class_count)

    def report(self) -> EvalReport:
        return report_from_confusion(self.counts)


def _accumulate(matrices: list[np.ndarray], class_count: int) -> EvalReport:
    acc = EvalAccumulator(class_count)
    for counts in matrices:
        acc.counts += counts
    return acc.report()


def _map(fn: Callable[[_T], np.ndarray], items: Sequence[_T], threads: int) -> list[np.ndarray]:
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def evaluate_label_maps(
    preds: Sequence[tuple[str, LabelMap]],
    gts: Sequence[tuple[str, LabelMap]],
    class_count: int,
    *,
    threads: int = 1,
) -> EvalReport:
    """mIoU of prediction maps against ground truth, matched by image id."""
    if not gts:
        raise ValidationError("evaluation needs at least one ground-truth map")
    by_id = dict(preds)
    missing = [image_id for image_id, _ in gts if image_id not in by_id]
    if missing:
        raise ValidationError(f"no prediction for image(s): {', '.join(missing[:5])}")

    def one(item: tuple[str, LabelMap]) -> np.ndarray:
        return confusion_matrix(by_id[item[0]], item[1], class_count)

    return _accumulate(_map(one, gts, threads), class_count)


def predict_scene(head: Predictor, provider: _Features, scene: SceneRecord) -> LabelMap:
    """Unfiltered argmax prediction on the global view, at ground-truth size."""
    pred = head.predict(provider.input_features(scene.scene_id))
    return resize_labels_nearest(pred, scene.width, scene.height)


def evaluate(
    head: Predictor,
    provider: _Features,
    scenes: Sequence[SceneRecord],
    class_count: int,
    *,
    threads: int = 1,
) -> EvalReport:
    """mIoU of *head* on the global views of *scenes* (no label filtering)."""
    labeled = [s for s in scenes if s.ground_truth is not None]
    if not labeled:
        raise ValidationError("evaluation needs at least one scene with ground truth")

    def one(scene: SceneRecord) -> np.ndarray:
        assert scene.ground_truth is not None
        pred = predict_scene(head, provider, scene)
        return confusion_matrix(pred, scene.ground_truth, class_count)

    return _accumulate(_map(one, labeled, threads), class_count)


def write_iou_table(
    report: EvalReport, path: str | Path, catalog: ClassCatalog | None = None
) -> Path:
    """CSV ``class_index,class,iou``; undefined classes have an empty IoU."""
    rows = []
    for c, iou in enumerate(report.per_class_iou):
        name = catalog.names[c] if catalog is not None else str(c)
        rows.append([c, name, "" if iou is None else f"{iou:.6f}"])
    rows.append(["", "mean", f"{report.miou:.6f}"])
    return exporter.write_csv(path, ["class_index", "class", "iou"], rows)
