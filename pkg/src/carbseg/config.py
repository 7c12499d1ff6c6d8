"""Plain-text ``key = value`` run configuration."""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, TypeVar

from carbseg import importer
from carbseg.exceptions import ConfigError
from carbseg.models import (
    CROP_PRESETS,
    CropConfig,
    LossMode,
    MaskSource,
    RegionNormalization,
    ViewMode,
    WeightingStrategy,
)

logger = logging.getLogger(__name__)

_E = TypeVar("_E", bound=Enum)

SYNTHETIC_CROP = CropConfig(crop_w=48, crop_h=48, r_min=1.0, r_max=2.0)
"""Local-view crop used with synthetic scenes, which are far smaller than 512 px."""


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _enum(cls: type[_E]) -> Callable[[str], _E]:
    def parse(text: str) -> _E:
        try:
            return cls(text.strip().lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ValueError(f"{text!r} is not one of {choices}") from None
    return parse


def _optional_path(text: str) -> Path | None:
    return Path(text) if text.strip() else None


_PARSERS: dict[type, Callable[[str], Any]] = {int: int, float: float, bool: parse_bool, str: str}


@dataclass(frozen=True, slots=True)
class TrainConfig:
    """Training protocol: stage lengths, optimizer, view and loss modes."""

    stage1_iters: int = 1000
    stage2_iters: int = 2000
    lr: float = 0.1
    momentum: float = 0.9
    temperature: float = 1.0
    use_bias: bool = True
    queue_capacity: int = 100
    view_mode: ViewMode = ViewMode.BASE
    loss_mode: LossMode = LossMode.PLAIN
    weighting: WeightingStrategy = WeightingStrategy.ADAPTIVE
    fixed_weight: float = 0.1
    region_normalization: RegionNormalization = RegionNormalization.REGION
    stage2_keep_plain: bool = False
    filter_pseudo_masks: bool = True
    local_filter: str = "image"
    mask_source: MaskSource = MaskSource.CLIP
    min_pixels: int = 1
    eval_every: int = 100
    curve_window: int = 50
    crop: CropConfig = field(default_factory=CropConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.stage1_iters + self.stage2_iters == 0:
            raise ConfigError("at least one training iteration is required")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.queue_capacity < 1:
            raise ConfigError(f"queue_capacity must be >= 1, got {self.queue_capacity}")
        if not 0 <= self.fixed_weight <= 1:
            raise ConfigError(f"fixed_weight must be in [0, 1], got {self.fixed_weight}")
        if self.local_filter not in ("image", "crop"):
            raise ConfigError(f"local_filter must be image or crop, got {self.local_filter!r}")
        if self.min_pixels < 1:
            raise ConfigError(f"min_pixels must be >= 1, got {self.min_pixels}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.curve_window < 1:
            raise ConfigError(f"curve_window must be >= 1, got {self.curve_window}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if not 0 < self.crop.r_min <= self.crop.r_max:
            raise ConfigError(
                f"resize range [{self.crop.r_min}, {self.crop.r_max}] is invalid"
            )

    @property
    def total_iters(self) -> int:
        return self.stage1_iters + self.stage2_iters

    @property
    def arm(self) -> str:
        """Ablation arm name, e.g. ``local+carb``."""
        suffix = "+carb" if self.loss_mode is LossMode.CARB else ""
        return f"{self.view_mode.value}{suffix}"


@dataclass(frozen=True, slots=True)
class SyntheticConfig:
    """Geometry and noise model of the synthetic benchmark."""

    width: int = 128
    height: int = 128
    class_count: int = 8
    dim: int = 16
    small_classes: int = 3
    scenes: int = 50
    stride: int = 4
    sigma: float = 0.1
    confusion: bool = True
    p0: float = 0.6
    a0: float = 400.0
    min_angle_deg: float = 30.0
    noise_fraction: float = 0.0
    noise_cue: float = 0.5
    blob_min_axis: int = 3
    blob_max_axis: int = 10
    small_min: int = 8
    small_max: int = 16
    objects_min: int = 3
    objects_max: int = 6

    def __post_init__(self) -> None:
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.width < self.stride or self.height < self.stride:
            raise ConfigError(f"scene {self.width}x{self.height} smaller than stride")
        if self.width % self.stride or self.height % self.stride:
            raise ConfigError(
                f"scene size {self.width}x{self.height} must be a multiple of stride {self.stride}"
            )
        if not 0 <= self.small_classes < self.class_count:
            raise ConfigError("small_classes must leave at least one large class")
        if self.class_count >= 255:
            raise ConfigError("class_count collides with the ignore index")
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if self.scenes < 1:
            raise ConfigError(f"scenes must be >= 1, got {self.scenes}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 0 <= self.p0 <= 1 or self.a0 < 0:
            raise ConfigError("p0 must be in [0, 1] and a0 non-negative")
        if not 0 < self.min_angle_deg < 90:
            raise ConfigError(f"min_angle_deg must be in (0, 90), got {self.min_angle_deg}")
        if not 0 <= self.noise_fraction < 1:
            raise ConfigError(f"noise_fraction must be in [0, 1), got {self.noise_fraction}")
        if self.noise_cue < 0:
            raise ConfigError(f"noise_cue must be >= 0, got {self.noise_cue}")
        if self.noise_cue > 0 and self.noise_fraction > 0 and self.dim <= self.class_count:
            raise ConfigError(
                f"noise_cue needs dim > class_count to stay clear of the prototypes, "
                f"got dim {self.dim} for {self.class_count} classes"
            )
        if not 1 <= self.blob_min_axis <= self.blob_max_axis:
            raise ConfigError("blob axes must satisfy 1 <= blob_min_axis <= blob_max_axis")
        if not 1 <= self.small_min <= self.small_max:
            raise ConfigError("small sizes must satisfy 1 <= small_min <= small_max")
        if self.small_max > min(self.width, self.height):
            raise ConfigError("small_max exceeds the scene size")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ConfigError("objects_min must not exceed objects_max")

    @property
    def large_classes(self) -> int:
        return self.class_count - self.small_classes


@dataclass(frozen=True, slots=True)
class DataConfig:
    """Where scenes and features come from."""

    data: str = "synthetic"
    features_root: Path | None = None
    text: Path | None = None
    labels: Path | None = None
    catalog: Path | None = None
    noisy_labels: Path | None = None
    stride: int = 16

    def __post_init__(self) -> None:
        if self.data not in ("synthetic", "files"):
            raise ConfigError(f"data must be synthetic or files, got {self.data!r}")
        if self.data == "files":
            missing = [k for k in ("features_root", "text", "catalog")
                       if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"data = files requires {', '.join(missing)}")


@dataclass(frozen=True, slots=True)
class RunConfig:
    """Everything one config file configures."""

    train: TrainConfig
    synthetic: SyntheticConfig
    data: DataConfig
    source: Mapping[str, str] = field(default_factory=dict)

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, train=replace(self.train, seed=seed))

    def resolved(self) -> dict[str, str]:
        """Every key with its effective value, as written to run manifests."""
        out: dict[str, str] = {}
        for section in (self.train, self.synthetic, self.data):
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, CropConfig):
                    out.update(crop_w=str(value.crop_w), crop_h=str(value.crop_h),
                               r_min=repr(value.r_min), r_max=repr(value.r_max))
                    continue
                if f.name == "stride" and section is self.data and self.data.data == "synthetic":
                    continue
                if isinstance(value, Enum):
                    value = value.value
                elif isinstance(value, bool):
                    value = str(value).lower()
                elif value is None:
                    value = ""
                out[f.name] = str(value)
        return dict(sorted(out.items()))


_TRAIN_PARSERS: dict[str, Callable[[str], Any]] = {
    "view_mode": _enum(ViewMode),
    "loss_mode": _enum(LossMode),
    "weighting": _enum(WeightingStrategy),
    "region_normalization": _enum(RegionNormalization),
    "mask_source": _enum(MaskSource),
}
_CROP_KEYS = ("crop_w", "crop_h", "crop_preset", "r_min", "r_max")
_PATH_KEYS = ("features_root", "text", "labels", "catalog", "noisy_labels")


def _section_parsers(cls: type, overrides: Mapping[str, Callable[[str], Any]]) -> dict[str, Any]:
    defaults = cls()
    parsers: dict[str, Callable[[str], Any]] = {}
    for f in fields(cls):
        if f.name in overrides:
            parsers[f.name] = overrides[f.name]
        elif f.name in _PATH_KEYS:
            parsers[f.name] = _optional_path
        else:
            kind = type(getattr(defaults, f.name))
            if kind in _PARSERS:
                parsers[f.name] = _PARSERS[kind]
    return parsers


def _parse(key: str, text: str, parser: Callable[[str], Any], source: str) -> Any:
    try:
        return parser(text)
    except ValueError as e:
        raise ConfigError(f"{source}: key {key!r}: {e}") from e


def _build(cls: type, values: Mapping[str, Any], source: str) -> Any:
    try:
        return cls(**values)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from e


def from_mapping(mapping: Mapping[str, str], source: str = "<config>") -> RunConfig:
    """Parse raw key/value strings into a :class:`RunConfig`.

    Unknown keys raise :class:`ConfigError`. The crop defaults to
    :data:`SYNTHETIC_CROP` for synthetic data and to 512×512 otherwise.
    """
    train_parsers = _section_parsers(TrainConfig, _TRAIN_PARSERS)
    synth_parsers = _section_parsers(SyntheticConfig, {})
    data_parsers = _section_parsers(DataConfig, {})
    train_parsers.pop("crop", None)
    known = set(train_parsers) | set(synth_parsers) | set(data_parsers) | set(_CROP_KEYS)
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown configuration key(s): {', '.join(unknown)}")

    # stride is shared by the synthetic generator and the file-backed provider
    data_values = {k: _parse(k, v, data_parsers[k], source)
                   for k, v in mapping.items() if k in data_parsers}
    data = _build(DataConfig, data_values, source)

    synth_values = {k: _parse(k, v, synth_parsers[k], source)
                    for k, v in mapping.items() if k in synth_parsers}
    synthetic = _build(SyntheticConfig, synth_values, source)

    base = SYNTHETIC_CROP if data.data == "synthetic" else CropConfig()
    if "crop_preset" in mapping:
        preset = mapping["crop_preset"].strip()
        if preset not in CROP_PRESETS:
            raise ConfigError(
                f"{source}: key 'crop_preset': unknown preset {preset!r}; "
                f"expected one of {', '.join(sorted(CROP_PRESETS))}"
            )
        base = CropConfig.preset(preset, base.r_min, base.r_max)
    crop_types = (("crop_w", int), ("crop_h", int), ("r_min", float), ("r_max", float))
    crop_values = {k: _parse(k, mapping[k], t, source) for k, t in crop_types if k in mapping}
    crop = replace(base, **crop_values)

    train_values = {k: _parse(k, v, train_parsers[k], source)
                    for k, v in mapping.items() if k in train_parsers}
    train = _build(TrainConfig, {**train_values, "crop": crop}, source)
    return RunConfig(train=train, synthetic=synthetic, data=data, source=dict(mapping))


def load_config(path: str | Path, seed: int | None = None) -> RunConfig:
    """Read a config file; an explicit *seed* wins over a ``seed`` key."""
    mapping = importer.read_key_values(path)
    config = from_mapping(mapping, str(path))
    if seed is not None:
        config = config.with_seed(seed)
    logger.debug("loaded %d config keys from %s", len(mapping), path)
    return config
