"""Pseudo-mask generation by cosine argmax, local-view sampling and pasting."""

from __future__ import annotations

import logging
import re
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from carbseg import importer
from carbseg.exceptions import MissingViewError, ValidationError
from carbseg.labels import resize_nearest
from carbseg.models import (
    IGNORE_INDEX,
    CropConfig,
    CropSpec,
    FeatureMap,
    LabelMap,
    SceneRecord,
    TextEmbeddingSet,
)

logger = logging.getLogger(__name__)

DEFAULT_STRIDE = 16
GLOBAL_VIEW_FILE = "global.dtn1"
_VIEW_FILE = re.compile(r"^(\d+)_(\d+)_(\d+)_(\d+)_(\d+)\.dtn1$")


# ---------------------------------------------------------------------------
# Eq. 1: cosine argmax
# ---------------------------------------------------------------------------

def cosine_scores(features: FeatureMap, text: TextEmbeddingSet) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity of every cell with every class, plus the zero-norm cell mask."""
    if features.dim != text.dim:
        raise ValidationError(
            f"feature dim {features.dim} does not match text embedding dim {text.dim}"
        )
    cells = features.data.astype(np.float64)
    norms = np.linalg.norm(cells, axis=2, keepdims=True)
    zero = norms[:, :, 0] == 0.0
    unit = cells / np.where(norms == 0.0, 1.0, norms)
    return unit @ text.normalized().T, zero


def cosine_pseudo_mask(
    features: FeatureMap,
    text: TextEmbeddingSet,
    allowed: Iterable[int] | None = None,
) -> LabelMap:
    """Label each feature cell with its most cosine-similar class.

    Restricting to *allowed* classes implements label filtering. Zero-norm
    cells get the ignore index. The mask is at feature-grid resolution.
    """
    scores, zero = cosine_scores(features, text)
    if allowed is None:
        labels = np.argmax(scores, axis=2)
    else:
        classes = sorted(set(int(c) for c in allowed))
        if not classes:
            raise ValidationError("allowed class set is empty")
        if classes[0] < 0 or classes[-1] >= text.class_count:
            raise ValidationError(
                f"allowed classes {classes} outside 0..{text.class_count - 1}"
            )
        index = np.asarray(classes, dtype=np.int64)
        labels = index[np.argmax(scores[:, :, index], axis=2)]
    labels = labels.astype(np.uint8)
    if np.any(zero):
        logger.warning("%d zero-norm feature cells set to ignore", int(np.count_nonzero(zero)))
        labels[zero] = IGNORE_INDEX
    return LabelMap(labels)


# ---------------------------------------------------------------------------
# Local views
# ---------------------------------------------------------------------------

def sample_crop(
    rng: np.random.Generator, global_w: int, global_h: int, cfg: CropConfig
) -> CropSpec:
    """Uniform crop position inside the frame and a ratio in ``[r_min, r_max]``.

    The ratio is quantized to thousandths so every view has an exact file key.
    """
    if cfg.crop_w > global_w or cfg.crop_h > global_h:
        raise ValidationError(
            f"crop {cfg.crop_w}x{cfg.crop_h} larger than frame {global_w}x{global_h}"
        )
    if not 0 < cfg.r_min <= cfg.r_max:
        raise ValidationError(f"resize range [{cfg.r_min}, {cfg.r_max}] is invalid")
    x0 = int(rng.integers(0, global_w - cfg.crop_w + 1))
    y0 = int(rng.integers(0, global_h - cfg.crop_h + 1))
    ratio = float(rng.uniform(cfg.r_min, cfg.r_max))
    ratio = min(max(round(ratio * 1000) / 1000, cfg.r_min), cfg.r_max)
    return CropSpec(x0, y0, cfg.crop_w, cfg.crop_h, ratio)


def sample_global_scale(
    rng: np.random.Generator, global_w: int, global_h: int, cfg: CropConfig
) -> CropSpec:
    """Full-frame view at a random scale (the augmented global view)."""
    full = CropConfig(global_w, global_h, cfg.r_min, cfg.r_max)
    return sample_crop(rng, global_w, global_h, full)


@runtime_checkable
class FeatureProvider(Protocol):
    """Supplies dense features for a scene, optionally for a cropped, resized view.

    ``view_features`` is what pseudo-masks are computed from;
    ``input_features`` is what the segmentation head consumes. Both are
    deterministic for a fixed (scene, view). ``spec=None`` means the
    un-augmented global view.
    """

    stride: int

    def view_features(self, scene_id: str, spec: CropSpec | None = None) -> FeatureMap: ...

    def input_features(self, scene_id: str, spec: CropSpec | None = None) -> FeatureMap: ...

    def sample_local_view(
        self, rng: np.random.Generator, scene: SceneRecord, crop: CropConfig
    ) -> CropSpec: ...

    def sample_global_view(
        self, rng: np.random.Generator, scene: SceneRecord, crop: CropConfig
    ) -> CropSpec | None: ...


class FileFeatureProvider:
    """Reads precomputed features from ``<root>/<scene_id>/*.dtn1``.

    ``global.dtn1`` holds the un-augmented global view; every other view is
    stored as ``<x0>_<y0>_<w>_<h>_<r_milli>.dtn1``. Sampling picks among the
    views that exist on disk.
    """

    def __init__(self, root: str | Path, stride: int = DEFAULT_STRIDE) -> None:
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"Directory not found: {self.root}")
        if stride < 1:
            raise ValidationError(f"stride must be >= 1, got {stride}")
        self.stride = stride
        self._views: dict[str, list[CropSpec]] = {}

    def scene_ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if (p / GLOBAL_VIEW_FILE).is_file())

    def view_path(self, scene_id: str, spec: CropSpec | None = None) -> Path:
        name = GLOBAL_VIEW_FILE if spec is None else f"{spec.key()}.dtn1"
        return self.root / scene_id / name

    def view_features(self, scene_id: str, spec: CropSpec | None = None) -> FeatureMap:
        path = self.view_path(scene_id, spec)
        if not path.is_file():
            view = "global" if spec is None else spec.key()
            raise MissingViewError(f"no features for scene {scene_id!r}, view {view}: {path}")
        return importer.read_feature_map(path)

    def input_features(self, scene_id: str, spec: CropSpec | None = None) -> FeatureMap:
        return self.view_features(scene_id, spec)

    def available_views(self, scene_id: str) -> list[CropSpec]:
        if scene_id not in self._views:
            directory = self.root / scene_id
            specs = []
            if directory.is_dir():
                for path in sorted(directory.iterdir()):
                    match = _VIEW_FILE.match(path.name)
                    if match:
                        x0, y0, w, h, milli = (int(g) for g in match.groups())
                        specs.append(CropSpec(x0, y0, w, h, milli / 1000))
            self._views[scene_id] = specs
        return self._views[scene_id]

    def sample_local_view(
        self, rng: np.random.Generator, scene: SceneRecord, crop: CropConfig
    ) -> CropSpec:
        views = [
            v for v in self.available_views(scene.scene_id)
            if not v.covers(scene.width, scene.height)
        ]
        if not views:
            raise MissingViewError(f"no local views stored for scene {scene.scene_id!r}")
        return views[int(rng.integers(0, len(views)))]

    def sample_global_view(
        self, rng: np.random.Generator, scene: SceneRecord, crop: CropConfig
    ) -> CropSpec | None:
        views = [
            v for v in self.available_views(scene.scene_id)
            if v.covers(scene.width, scene.height)
        ]
        if not views:
            return None
        return views[int(rng.integers(0, len(views)))]


def local_view_features(
    provider: FeatureProvider, scene: SceneRecord, spec: CropSpec
) -> FeatureMap:
    """Features of a cropped, resized view, checked against the view geometry."""
    if not spec.fits(scene.width, scene.height):
        raise ValidationError(
            f"view {spec.key()} does not fit scene {scene.scene_id!r} "
            f"({scene.width}x{scene.height})"
        )
    features = provider.view_features(scene.scene_id, spec)
    expected = spec.grid_shape(provider.stride)
    if (features.height, features.width) != expected:
        raise ValidationError(
            f"scene {scene.scene_id!r} view {spec.key()}: feature grid "
            f"{features.height}x{features.width}, expected {expected[0]}x{expected[1]}"
        )
    return features


# ---------------------------------------------------------------------------
# Composition in global coordinates
# ---------------------------------------------------------------------------

def paste_local_mask(
    frame_w: int,
    frame_h: int,
    local: LabelMap,
    spec: CropSpec,
    base: LabelMap | None = None,
) -> LabelMap:
    """Place a view-resolution local mask into the global frame.

    The local mask (``view_width`` × ``view_height``) is resized back to the
    crop rectangle with nearest sampling. Pixels outside the crop come from
    *base*, or are ignored when no base is given.
    """
    if not spec.fits(frame_w, frame_h):
        raise ValidationError(f"crop {spec.key()} does not fit a {frame_w}x{frame_h} frame")
    if (local.height, local.width) != (spec.view_height, spec.view_width):
        raise ValidationError(
            f"local mask {local.width}x{local.height} does not match view "
            f"{spec.view_width}x{spec.view_height} of crop {spec.key()}"
        )
    if base is None:
        canvas = np.full((frame_h, frame_w), IGNORE_INDEX, dtype=np.uint8)
    else:
        if (base.height, base.width) != (frame_h, frame_w):
            raise ValidationError(
                f"base mask {base.width}x{base.height} does not match frame {frame_w}x{frame_h}"
            )
        canvas = base.data.copy()
    patch = resize_nearest(local.data, spec.crop_w, spec.crop_h)
    canvas[spec.y0:spec.y0 + spec.crop_h, spec.x0:spec.x0 + spec.crop_w] = patch
    return LabelMap(canvas)


def quarter_tiles(frame_w: int, frame_h: int, resize_ratio: float = 1.0) -> list[CropSpec]:
    """The four half-FOV crops that tile a frame."""
    half_w, half_h = frame_w // 2, frame_h // 2
    widths = (half_w, frame_w - half_w)
    heights = (half_h, frame_h - half_h)
    return [
        CropSpec(x0, y0, w, h, resize_ratio)
        for y0, h in ((0, heights[0]), (half_h, heights[1]))
        for x0, w in ((0, widths[0]), (half_w, widths[1]))
    ]


def compose_tiled_mask(
    frame_w: int,
    frame_h: int,
    tiles: Sequence[tuple[CropSpec, LabelMap]],
    base: LabelMap | None = None,
) -> LabelMap:
    """Paste several local masks in order; later tiles overwrite earlier ones."""
    canvas = base
    for spec, local in tiles:
        canvas = paste_local_mask(frame_w, frame_h, local, spec, canvas)
    if canvas is None:
        return LabelMap.filled(frame_w, frame_h)
    return canvas
