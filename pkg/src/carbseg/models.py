"""Domain model dataclasses and enums for carbseg."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

IGNORE_INDEX = 255
"""Reserved label value excluded from losses, statistics and evaluation."""

PROBABILITY_TOLERANCE = 1e-6
"""Allowed deviation of a per-pixel class distribution from summing to 1."""


def _frozen_array(data: Any, dtype: Any) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Enums
# ---------------------------------------------------------------------------

class ViewMode(str, Enum):
    """Which views supervise the segmentation head."""

    BASE = "base"
    LOCAL = "local"
    DUAL = "dual"


class LossMode(str, Enum):
    """Plain cross-entropy or consistency-aware region balancing in stage 2."""

    PLAIN = "plain"
    CARB = "carb"


class WeightingStrategy(str, Enum):
    """How the inconsistent-region weight is chosen in stage 2."""

    ADAPTIVE = "adaptive"
    FIXED = "fixed"


class RegionNormalization(str, Enum):
    """Denominator of each region's cross-entropy."""

    REGION = "region"
    TOTAL = "total"


class MaskSource(str, Enum):
    """Where training pseudo-masks come from."""

    CLIP = "clip"
    ORACLE = "oracle"


class ValidationSeverity(str, Enum):
    """Severity level for validation results."""

    ERROR = "ERROR"
    WARNING = "WARNING"


# ---------------------------------------------------------------------------
# Dense arrays
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class ClassCatalog:
    """Class names, text-prompt names and display colours of a label space."""

    names: tuple[str, ...]
    prompt_names: tuple[str, ...]
    palette: tuple[tuple[int, int, int], ...]
    ignore_index: int = IGNORE_INDEX

    @property
    def class_count(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        """Return the class index of *name* (matches names, then prompt names)."""
        if name in self.names:
            return self.names.index(name)
        return self.prompt_names.index(name)


@dataclass(frozen=True, slots=True, eq=False)
class LabelMap:
    """An H×W grid of class indices; ``IGNORE_INDEX`` marks unlabeled pixels."""

    data: np.ndarray

    def __post_init__(self) -> None:
        raw = np.asarray(self.data)
        if raw.size and raw.dtype != np.uint8 and raw.dtype.kind in "iuf":
            if raw.dtype.kind == "f" and not np.all(np.isfinite(raw) & (raw == np.round(raw))):
                raise ValueError("label values must be whole numbers")
            low, high = raw.min(), raw.max()
            if low < 0 or high > IGNORE_INDEX:
                raise ValueError(
                    f"label values must lie in 0..{IGNORE_INDEX}, got {low:g}..{high:g}"
                )
        arr = _frozen_array(raw, np.uint8)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"label map must be a non-empty 2-D grid, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def valid(self) -> np.ndarray:
        """Boolean mask of pixels that carry a class label."""
        return self.data != IGNORE_INDEX

    @classmethod
    def filled(cls, width: int, height: int, value: int = IGNORE_INDEX) -> LabelMap:
        return cls(np.full((height, width), value, dtype=np.uint8))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, slots=True, eq=False)
class FeatureMap:
    """A dense Hf×Wf×D embedding grid."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = _frozen_array(arr, arr.dtype)
        if arr.ndim != 3 or arr.shape[2] < 1 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"feature map must be Hf×Wf×D with D >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map holds non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def dim(self) -> int:
        return int(self.data.shape[2])


@dataclass(frozen=True, slots=True, eq=False)
class TextEmbeddingSet:
    """One D-dimensional text embedding per class (C×D)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = _frozen_array(arr, arr.dtype)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"text embeddings must be C×D, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def class_count(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def normalized(self) -> np.ndarray:
        """Row-normalized embeddings in double precision."""
        rows = self.data.astype(np.float64)
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)


@dataclass(frozen=True, slots=True, eq=False)
class ProbabilityMap:
    """Per-pixel class distribution, H×W×C."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = _frozen_array(arr, arr.dtype)
        if arr.ndim != 3:
            raise ValueError(f"probability map must be H×W×C, got {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("probabilities must be finite and lie in [0, 1]")
        sums = arr.astype(np.float64).sum(axis=2)
        if np.any(np.abs(sums - 1.0) > PROBABILITY_TOLERANCE):
            raise ValueError("per-pixel probabilities do not sum to 1")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def class_count(self) -> int:
        return int(self.data.shape[2])


# ---------------------------------------------------------------------------
# Dataset statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class ImageLabelSet:
    """Image-level label set derived from a pixel-level label map."""

    image_id: str
    present: frozenset[int]

    @property
    def empty(self) -> bool:
        return not self.present


@dataclass(frozen=True, slots=True, eq=False)
class DatasetStats:
    """The three dataset diagnostics: class counts, co-occurrence, pos/neg."""

    image_count: int
    classes_per_image_hist: dict[int, int]
    cooccurrence: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def class_count(self) -> int:
        return int(self.positives.shape[0])


# ---------------------------------------------------------------------------
# Views
# ---------------------------------------------------------------------------

def view_extent(length: int, ratio: float) -> int:
    """Pixel length of a crop side after resizing (round half up)."""
    return int(math.floor(length * ratio + 0.5))


@dataclass(frozen=True, slots=True)
class CropConfig:
    """Local-view crop size and resize-ratio range."""

    crop_w: int = 512
    crop_h: int = 512
    r_min: float = 1.0
    r_max: float = 2.0

    @classmethod
    def preset(cls, name: str, r_min: float = 1.0, r_max: float = 2.0) -> CropConfig:
        """Build one of the crop-size presets (``square512``, ``vertical``, ...)."""
        try:
            w, h = CROP_PRESETS[name]
        except KeyError:
            raise ValueError(
                f"unknown crop preset {name!r}; expected one of {sorted(CROP_PRESETS)}"
            ) from None
        return cls(crop_w=w, crop_h=h, r_min=r_min, r_max=r_max)


CROP_PRESETS: dict[str, tuple[int, int]] = {
    "square512": (512, 512),
    "square256": (256, 256),
    "vertical": (256, 512),
    "horizontal": (512, 256),
}


@dataclass(frozen=True, slots=True)
class CropSpec:
    """A crop rectangle in the global frame plus the ratio it is resized by."""

    x0: int
    y0: int
    crop_w: int
    crop_h: int
    resize_ratio: float = 1.0

    @property
    def r_milli(self) -> int:
        return int(round(self.resize_ratio * 1000))

    @property
    def view_width(self) -> int:
        return view_extent(self.crop_w, self.resize_ratio)

    @property
    def view_height(self) -> int:
        return view_extent(self.crop_h, self.resize_ratio)

    def grid_shape(self, stride: int) -> tuple[int, int]:
        """Feature-grid (rows, cols) of this view for a patch stride."""
        return max(1, self.view_height // stride), max(1, self.view_width // stride)

    def key(self) -> str:
        """File-name key ``x0_y0_w_h_rmilli``."""
        return f"{self.x0}_{self.y0}_{self.crop_w}_{self.crop_h}_{self.r_milli}"

    def covers(self, width: int, height: int) -> bool:
        return self.x0 == 0 and self.y0 == 0 and self.crop_w == width and self.crop_h == height

    def fits(self, width: int, height: int) -> bool:
        return (
            self.x0 >= 0 and self.y0 >= 0
            and self.crop_w >= 1 and self.crop_h >= 1
            and self.x0 + self.crop_w <= width
            and self.y0 + self.crop_h <= height
        )

    @classmethod
    def full_frame(cls, width: int, height: int, resize_ratio: float = 1.0) -> CropSpec:
        return cls(0, 0, width, height, resize_ratio)


# ---------------------------------------------------------------------------
# Region balancing
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True, eq=False)
class RegionPartition:
    """Consistent / inconsistent pixels of a pseudo-mask against a prediction."""

    consistent: np.ndarray
    inconsistent: np.ndarray

    @property
    def n_consistent(self) -> int:
        return int(np.count_nonzero(self.consistent))

    @property
    def n_inconsistent(self) -> int:
        return int(np.count_nonzero(self.inconsistent))


@dataclass(frozen=True, slots=True)
class RegionLoss:
    """Mean cross-entropy over a region; an empty region has value 0."""

    value: float
    pixel_count: int

    @property
    def empty(self) -> bool:
        return self.pixel_count == 0


@dataclass(frozen=True, slots=True, eq=False)
class LossGradient:
    """Scalar training loss with its analytic gradient on the head parameters."""

    value: float
    grad_weights: np.ndarray
    grad_bias: np.ndarray
    loss_c: RegionLoss | None = None
    loss_i: RegionLoss | None = None


# ---------------------------------------------------------------------------
# Training and evaluation records
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class SmallObject:
    """A small object placed by the synthetic generator."""

    instance_id: int
    class_index: int
    x0: int
    y0: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h


@dataclass(frozen=True, slots=True, eq=False)
class SceneRecord:
    """One training/evaluation scene as the trainer sees it."""

    scene_id: str
    width: int
    height: int
    ground_truth: LabelMap | None = None
    noisy_mask: LabelMap | None = None


@dataclass(frozen=True, slots=True, eq=False)
class EvalReport:
    """Per-class IoU, mean IoU and the confusion matrix (rows = ground truth)."""

    per_class_iou: tuple[float | None, ...]
    miou: float
    confusion: np.ndarray

    @property
    def undefined_classes(self) -> tuple[int, ...]:
        return tuple(c for c, iou in enumerate(self.per_class_iou) if iou is None)

    def mean_over(self, classes: tuple[int, ...] | list[int]) -> float:
        """Mean IoU restricted to *classes*, skipping undefined ones."""
        values = [self.per_class_iou[c] for c in classes]
        defined = [v for v in values if v is not None]
        return float(np.mean(defined)) if defined else float("nan")


@dataclass(frozen=True, slots=True)
class TelemetryRecord:
    """One per-iteration telemetry row."""

    iteration: int
    stage: int
    loss_total: float
    loss_c: float
    loss_i: float
    w: float
    n_c: int
    n_i: int
    train_miou: float | None = None


@dataclass(frozen=True, slots=True)
class RunManifest:
    """Everything needed to re-run a CLI command."""

    command: str
    argv: tuple[str, ...]
    config: dict[str, str]
    seed: int | None
    inputs: dict[str, str]
    outputs: dict[str, str]
    tool_version: str
    started_at: str
    finished_at: str = ""
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, slots=True)
class ValidationResult:
    """A single validation finding (error or warning)."""

    rule_id: str
    severity: str
    entity_type: str
    entity_id: str
    message: str
    details: dict[str, Any] | None = None
