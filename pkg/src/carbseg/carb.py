"""Consistency-aware region balancing.

A pseudo-mask is split into the pixels where it agrees with the model's
label-filtered prediction (consistent) and where it does not
(inconsistent). The inconsistent-region loss is scaled by the ratio of
the two regions' recent average losses, kept in a pair of bounded queues.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from collections.abc import Iterable

import numpy as np

from carbseg.exceptions import EmptyHistoryError, ValidationError
from carbseg.labels import argmax_labels
from carbseg.models import (
    IGNORE_INDEX,
    ImageLabelSet,
    LabelMap,
    ProbabilityMap,
    RegionLoss,
    RegionPartition,
)

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
"""Probabilities are clamped below at this value before taking the log."""

DEFAULT_QUEUE_CAPACITY = 100


def filtered_prediction(f: ProbabilityMap, present: ImageLabelSet | Iterable[int]) -> LabelMap:
    """Model prediction restricted to the classes present in the image."""
    classes = present.present if isinstance(present, ImageLabelSet) else frozenset(present)
    if not classes:
        raise ValidationError("label filtering needs a non-empty class set")
    return argmax_labels(f, classes)


def partition(p: LabelMap, s: LabelMap) -> RegionPartition:
    """Split the labeled pixels of pseudo-mask *p* by agreement with prediction *s*."""
    if p.data.shape != s.data.shape:
        raise ValidationError(
            f"pseudo-mask {p.width}x{p.height} and prediction {s.width}x{s.height} differ in size"
        )
    valid = p.data != IGNORE_INDEX
    agree = p.data == s.data
    return RegionPartition(consistent=valid & agree, inconsistent=valid & ~agree)


def _label_probs(f: ProbabilityMap, labels: LabelMap, region: np.ndarray) -> np.ndarray:
    if (f.height, f.width) != (labels.height, labels.width) or region.shape != labels.data.shape:
        raise ValidationError(
            f"probabilities {f.width}x{f.height}, labels {labels.width}x{labels.height} "
            f"and region {region.shape[1]}x{region.shape[0]} must share a size"
        )
    if np.any(region & (labels.data == IGNORE_INDEX)):
        raise ValidationError("loss region includes ignored pixels")
    target = labels.data[region].astype(np.int64)
    if target.size and target.max() >= f.class_count:
        raise ValidationError(f"label {int(target.max())} outside 0..{f.class_count - 1}")
    return f.data[region].astype(np.float64)[np.arange(target.size), target]


def region_cross_entropy(f: ProbabilityMap, labels: LabelMap, region: np.ndarray) -> RegionLoss:
    """Mean of ``-log f[label]`` over *region*; an empty region gives 0."""
    picked = _label_probs(f, labels, region)
    if picked.size == 0:
        return RegionLoss(0.0, 0)
    value = float(-np.log(np.maximum(picked, LOG_CLAMP)).sum() / picked.size)
    return RegionLoss(value, int(picked.size))


def region_logit_gradient(
    f: ProbabilityMap, labels: LabelMap, region: np.ndarray, scale: float
) -> np.ndarray:
    """``scale * (softmax - onehot)`` on *region*, zero elsewhere (H×W×C).

    Pixels whose label probability sits under the log clamp get zero
    gradient, matching the clamped value.
    """
    picked = _label_probs(f, labels, region)
    grad = np.zeros(f.data.shape, dtype=np.float64)
    if picked.size == 0 or scale == 0.0:
        return grad
    ys, xs = np.nonzero(region)
    target = labels.data[ys, xs].astype(np.int64)
    rows = f.data[ys, xs].astype(np.float64)
    rows[np.arange(target.size), target] -= 1.0
    rows[picked < LOG_CLAMP] = 0.0
    grad[ys, xs] = scale * rows
    return grad


class LossHistory:
    """Two bounded FIFO queues of recent consistent / inconsistent losses."""

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY) -> None:
        if capacity < 1:
            raise ValidationError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.consistent_losses: deque[float] = deque(maxlen=capacity)
        self.inconsistent_losses: deque[float] = deque(maxlen=capacity)

    @property
    def ready(self) -> bool:
        """True once both queues hold at least one entry."""
        return bool(self.consistent_losses) and bool(self.inconsistent_losses)

    def means(self) -> tuple[float, float]:
        if not self.ready:
            raise EmptyHistoryError(
                f"loss queues hold {len(self.consistent_losses)} consistent and "
                f"{len(self.inconsistent_losses)} inconsistent entries"
            )
        return (
            math.fsum(self.consistent_losses) / len(self.consistent_losses),
            math.fsum(self.inconsistent_losses) / len(self.inconsistent_losses),
        )

    def __repr__(self) -> str:
        return (
            f"LossHistory(capacity={self.capacity}, consistent={len(self.consistent_losses)}, "
            f"inconsistent={len(self.inconsistent_losses)})"
        )


def _check_loss(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise ValidationError(f"{name} loss must be finite and non-negative, got {value}")
    return value


def push_losses(
    h: LossHistory,
    l_c: float | RegionLoss | None,
    l_i: float | RegionLoss | None,
) -> LossHistory:
    """Append one loss pair; ``None`` or an empty :class:`RegionLoss` is skipped."""
    for value, queue, name in (
        (l_c, h.consistent_losses, "consistent"),
        (l_i, h.inconsistent_losses, "inconsistent"),
    ):
        if isinstance(value, RegionLoss):
            value = None if value.empty else value.value
        if value is None:
            logger.debug("empty %s region, queue unchanged", name)
            continue
        queue.append(_check_loss(value, name))
    return h


def adaptive_weight(h: LossHistory) -> float:
    """``clamp(mean_c / mean_i, 0, 1)``; 1 when the inconsistent mean is 0."""
    mean_c, mean_i = h.means()
    if mean_i == 0.0:
        return 1.0
    return min(max(mean_c / mean_i, 0.0), 1.0)


def carb_loss(l_c: RegionLoss | float, l_i: RegionLoss | float, w: float) -> float:
    """``L_c + w * L_i``."""
    if not 0.0 <= w <= 1.0:
        raise ValidationError(f"region weight must be in [0, 1], got {w}")
    value_c = l_c.value if isinstance(l_c, RegionLoss) else float(l_c)
    value_i = l_i.value if isinstance(l_i, RegionLoss) else float(l_i)
    return value_c + w * value_i
