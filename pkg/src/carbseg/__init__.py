"""carbseg: weakly-supervised segmentation training with region-balanced pseudo-masks."""

__version__ = "1.0.0"

from carbseg.carb import (
    LossHistory,
    adaptive_weight,
    carb_loss,
    filtered_prediction,
    partition,
    push_losses,
    region_cross_entropy,
)
from carbseg.config import RunConfig, SyntheticConfig, TrainConfig, load_config
from carbseg.evaluation import evaluate, evaluate_label_maps
from carbseg.exceptions import (
    CarbSegError,
    ConfigError,
    DataImportError,
    EmptyHistoryError,
    ExportError,
    FormatError,
    MissingViewError,
    ProviderError,
    ValidationError,
)
from carbseg.maskgen import (
    FeatureProvider,
    FileFeatureProvider,
    compose_tiled_mask,
    cosine_pseudo_mask,
    local_view_features,
    paste_local_mask,
    sample_crop,
)
from carbseg.models import (
    IGNORE_INDEX,
    ClassCatalog,
    CropConfig,
    CropSpec,
    DatasetStats,
    EvalReport,
    FeatureMap,
    ImageLabelSet,
    LabelMap,
    LossMode,
    MaskSource,
    ProbabilityMap,
    RegionLoss,
    RegionNormalization,
    RegionPartition,
    RunManifest,
    SceneRecord,
    TelemetryRecord,
    TextEmbeddingSet,
    ValidationResult,
    ValidationSeverity,
    ViewMode,
    WeightingStrategy,
)
from carbseg.stats import compute_stats, emit_stats_csv, image_label_set
from carbseg.synthetic import SyntheticFeatureProvider, make_synthetic_dataset
from carbseg.telemetry import export_curves
from carbseg.trainer import LinearSegHead, forward, loss_and_grad, train

__all__ = [
    "__version__",
    # Models
    "ClassCatalog",
    "LabelMap",
    "FeatureMap",
    "TextEmbeddingSet",
    "ProbabilityMap",
    "ImageLabelSet",
    "DatasetStats",
    "CropConfig",
    "CropSpec",
    "RegionPartition",
    "RegionLoss",
    "SceneRecord",
    "EvalReport",
    "TelemetryRecord",
    "RunManifest",
    "ValidationResult",
    # Enums
    "ViewMode",
    "LossMode",
    "WeightingStrategy",
    "RegionNormalization",
    "MaskSource",
    "ValidationSeverity",
    # Config
    "TrainConfig",
    "SyntheticConfig",
    "RunConfig",
    "load_config",
    # Operations
    "image_label_set",
    "compute_stats",
    "emit_stats_csv",
    "cosine_pseudo_mask",
    "sample_crop",
    "local_view_features",
    "paste_local_mask",
    "compose_tiled_mask",
    "FeatureProvider",
    "FileFeatureProvider",
    "SyntheticFeatureProvider",
    "make_synthetic_dataset",
    "filtered_prediction",
    "partition",
    "region_cross_entropy",
    "LossHistory",
    "adaptive_weight",
    "carb_loss",
    "push_losses",
    "LinearSegHead",
    "forward",
    "loss_and_grad",
    "train",
    "evaluate",
    "evaluate_label_maps",
    "export_curves",
    # Exceptions
    "CarbSegError",
    "ValidationError",
    "ConfigError",
    "DataImportError",
    "FormatError",
    "MissingViewError",
    "ProviderError",
    "ExportError",
    "EmptyHistoryError",
    # Constants
    "IGNORE_INDEX",
]
