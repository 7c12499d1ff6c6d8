"""Label-map resizing, cropping and restricted argmax."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from carbseg.exceptions import ValidationError
from carbseg.models import CropSpec, LabelMap, ProbabilityMap


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index of each destination index under floor scaling."""
    return (np.arange(dst, dtype=np.int64) * src) // dst


def resize_nearest(arr: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Nearest-neighbour resize of the two leading axes of *arr*."""
    if new_w < 1 or new_h < 1:
        raise ValidationError(f"target size must be positive, got {new_w}x{new_h}")
    rows = nearest_indices(arr.shape[0], new_h)
    cols = nearest_indices(arr.shape[1], new_w)
    return arr[rows[:, None], cols[None, :]]


def resize_labels_nearest(m: LabelMap, new_w: int, new_h: int) -> LabelMap:
    """Resize a label map; each output pixel copies the floor-scaled input pixel."""
    if new_w == m.width and new_h == m.height:
        return m
    return LabelMap(resize_nearest(m.data, new_w, new_h))


def crop_labels(m: LabelMap, spec: CropSpec) -> LabelMap:
    """Cut the crop rectangle of *spec* out of a global-frame label map."""
    if not spec.fits(m.width, m.height):
        raise ValidationError(
            f"crop {spec.key()} does not fit a {m.width}x{m.height} frame"
        )
    return LabelMap(m.data[spec.y0:spec.y0 + spec.crop_h, spec.x0:spec.x0 + spec.crop_w])


def view_labels(m: LabelMap, spec: CropSpec, stride: int) -> LabelMap:
    """Labels of a view at its feature-grid resolution (crop, then nearest resize)."""
    rows, cols = spec.grid_shape(stride)
    return resize_labels_nearest(crop_labels(m, spec), cols, rows)


def argmax_labels(p: ProbabilityMap, allowed: Iterable[int] | None = None) -> LabelMap:
    """Per-pixel argmax over *allowed* classes; ties go to the lowest index."""
    probs = p.data
    if allowed is None:
        return LabelMap(np.argmax(probs, axis=2).astype(np.uint8))
    classes = sorted(set(int(c) for c in allowed))
    if not classes:
        raise ValidationError("allowed class set is empty")
    if classes[0] < 0 or classes[-1] >= p.class_count:
        raise ValidationError(
            f"allowed classes {classes} outside 0..{p.class_count - 1}"
        )
    index = np.asarray(classes, dtype=np.int64)
    best = np.argmax(probs[:, :, index], axis=2)
    return LabelMap(index[best].astype(np.uint8))
