"""Synthetic street-like scenes with a feature model that mimics CLIP's failure modes.

Scenes are laid out on the feature-stride lattice: large classes form a
Voronoi partition and small classes are rectangular objects of a few
cells. Every large class appears in every scene. Two feature kinds are
served per view:

- *view features* feed the cosine-argmax pseudo-masks. Cells of a small
  object are swapped to the prototype of a confuser (large) class with a
  probability that drops as the object covers more of the view.
- *input features* feed the segmentation head: prototype plus Gaussian
  noise, without confusion. Where the oracle mask was corrupted, the cells
  also carry a cue toward the corrupted class along a direction orthogonal
  to every prototype, so a head that fits the noisy mask can memorize it
  while the cosine argmax of the input stays the ground truth.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from carbseg import exporter
from carbseg.catalog import synthetic_catalog
from carbseg.config import SyntheticConfig
from carbseg.exceptions import ValidationError
from carbseg.labels import nearest_indices, view_labels
from carbseg.maskgen import (
    GLOBAL_VIEW_FILE,
    cosine_pseudo_mask,
    sample_crop,
    sample_global_scale,
)
from carbseg.models import (
    ClassCatalog,
    CropConfig,
    CropSpec,
    FeatureMap,
    LabelMap,
    SceneRecord,
    SmallObject,
    TextEmbeddingSet,
)
from carbseg.rng import stream

logger = logging.getLogger(__name__)

MAX_PROTOTYPE_ATTEMPTS = 10_000
MAX_PLACEMENT_ATTEMPTS = 50
MAX_BLOBS = 10_000


@dataclass(frozen=True, slots=True, eq=False)
class SyntheticScene:
    """Ground truth, noisy oracle mask and small-object layout of one scene."""

    scene_id: str
    ground_truth: LabelMap
    noisy_mask: LabelMap
    instances: np.ndarray
    objects: tuple[SmallObject, ...]

    @property
    def width(self) -> int:
        return self.ground_truth.width

    @property
    def height(self) -> int:
        return self.ground_truth.height

    def record(self) -> SceneRecord:
        return SceneRecord(
            scene_id=self.scene_id,
            width=self.width,
            height=self.height,
            ground_truth=self.ground_truth,
            noisy_mask=self.noisy_mask,
        )


@dataclass(frozen=True, slots=True, eq=False)
class SyntheticDataset:
    """A generated benchmark: class prototypes, confusion table and scenes."""

    config: SyntheticConfig
    seed: int
    catalog: ClassCatalog
    prototypes: np.ndarray
    confusion: dict[int, int]
    cues: np.ndarray
    scenes: tuple[SyntheticScene, ...]
    _by_id: dict[str, SyntheticScene] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_id.update((s.scene_id, s) for s in self.scenes)

    @property
    def text(self) -> TextEmbeddingSet:
        """Text embeddings equal the class prototypes."""
        return TextEmbeddingSet(self.prototypes)

    @property
    def large_classes(self) -> tuple[int, ...]:
        return tuple(range(self.config.large_classes))

    @property
    def small_classes(self) -> tuple[int, ...]:
        return tuple(range(self.config.large_classes, self.config.class_count))

    def scene(self, scene_id: str) -> SyntheticScene:
        try:
            return self._by_id[scene_id]
        except KeyError:
            raise ValidationError(f"unknown synthetic scene {scene_id!r}") from None

    def records(self) -> list[SceneRecord]:
        return [s.record() for s in self.scenes]

    def __iter__(self) -> Iterator[SyntheticScene]:
        return iter(self.scenes)

    def __len__(self) -> int:
        return len(self.scenes)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def make_prototypes(
    rng: np.random.Generator, class_count: int, dim: int, min_angle_deg: float
) -> np.ndarray:
    """Unit vectors whose pairwise angles all exceed *min_angle_deg*."""
    max_cos = math.cos(math.radians(min_angle_deg))
    rows: list[np.ndarray] = []
    for _ in range(MAX_PROTOTYPE_ATTEMPTS):
        candidate = rng.standard_normal(dim)
        candidate /= np.linalg.norm(candidate)
        if all(abs(float(candidate @ r)) < max_cos for r in rows):
            rows.append(candidate)
            if len(rows) == class_count:
                return np.stack(rows)
    raise ValidationError(
        f"cannot place {class_count} prototypes in {dim} dimensions "
        f"at {min_angle_deg} degrees apart"
    )


def make_cue_directions(rng: np.random.Generator, prototypes: np.ndarray) -> np.ndarray:
    """One unit vector per class, orthogonal to the span of *prototypes*."""
    class_count, dim = prototypes.shape
    if dim <= class_count:
        raise ValidationError(
            f"no room for cue directions: dim {dim} does not exceed {class_count} classes"
        )
    draws = rng.standard_normal((class_count, dim))
    coef = np.linalg.lstsq(prototypes.T, draws.T, rcond=None)[0]
    residual = draws - (prototypes.T @ coef).T
    return residual / np.linalg.norm(residual, axis=1, keepdims=True)


def _small_sizes(cfg: SyntheticConfig) -> list[int]:
    s = cfg.stride
    sizes = [v for v in range(s, cfg.small_max + 1, s) if v >= cfg.small_min]
    if not sizes:
        sizes = [s * max(1, math.ceil(cfg.small_min / s))]
    if sizes[-1] > min(cfg.width, cfg.height):
        raise ValidationError("small objects do not fit the scene on the stride lattice")
    return sizes


def _voronoi_cells(
    rng: np.random.Generator, rows: int, cols: int, large: int
) -> tuple[np.ndarray, np.ndarray]:
    """Lattice labels for the large classes, plus the seed cell of each class."""
    if rows * cols < large:
        raise ValidationError(f"a {cols}x{rows} lattice cannot hold {large} large classes")
    extra = int(rng.integers(0, large + 1))
    count = min(large + extra, rows * cols)
    flat = rng.choice(rows * cols, size=count, replace=False)
    classes = np.concatenate(
        [np.arange(large), rng.integers(0, large, size=count - large)]
    ).astype(np.int64)
    seed_r, seed_c = np.divmod(flat, cols)
    rr, cc = np.mgrid[0:rows, 0:cols]
    dist = (rr[..., None] - seed_r) ** 2 + (cc[..., None] - seed_c) ** 2
    owner = np.argmin(dist, axis=2)
    protected = np.zeros((rows, cols), dtype=bool)
    protected[seed_r[:large], seed_c[:large]] = True
    return classes[owner], protected


def _place_objects(
    rng: np.random.Generator,
    cfg: SyntheticConfig,
    cells: np.ndarray,
    protected: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, list[SmallObject]]:
    s = cfg.stride
    labels = np.repeat(np.repeat(cells, s, axis=0), s, axis=1).astype(np.uint8)
    instances = np.zeros(labels.shape, dtype=np.int32)
    sizes = _small_sizes(cfg)
    objects: list[SmallObject] = []
    if cfg.small_classes == 0:
        return labels, instances, objects
    wanted = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    for _ in range(wanted):
        class_index = cfg.large_classes + int(rng.integers(0, cfg.small_classes))
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            w = sizes[int(rng.integers(0, len(sizes)))]
            h = sizes[int(rng.integers(0, len(sizes)))]
            x0 = s * int(rng.integers(0, (cfg.width - w) // s + 1))
            y0 = s * int(rng.integers(0, (cfg.height - h) // s + 1))
            if protected[y0 // s:(y0 + h) // s, x0 // s:(x0 + w) // s].any():
                continue
            obj = SmallObject(len(objects) + 1, class_index, x0, y0, w, h)
            labels[y0:y0 + h, x0:x0 + w] = class_index
            instances[y0:y0 + h, x0:x0 + w] = obj.instance_id
            objects.append(obj)
            break
        else:
            logger.debug("could not place a class %d object without covering a seed", class_index)
    return labels, instances, objects


def blob_noise(
    rng: np.random.Generator,
    gt: LabelMap,
    fraction: float,
    class_count: int,
    min_axis: int = 3,
    max_axis: int = 10,
) -> LabelMap:
    """Corrupt *gt* with random elliptical blobs until *fraction* of pixels differ.

    Each blob is relabeled to one random class. The last blob is trimmed to
    its pixels nearest the centre so the corrupted fraction lands on target.
    """
    if not 0 <= fraction < 1:
        raise ValidationError(f"noise fraction must be in [0, 1), got {fraction}")
    noisy = gt.data.copy()
    valid = gt.valid
    target = int(math.ceil(fraction * int(valid.sum())))
    if target == 0:
        return LabelMap(noisy)
    h, w = noisy.shape
    yy, xx = np.mgrid[0:h, 0:w]
    corrupted = 0
    for _ in range(MAX_BLOBS):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        a, b = rng.integers(min_axis, max_axis + 1, size=2)
        theta = rng.uniform(0, math.pi)
        label = int(rng.integers(0, class_count))
        dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
        u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
        radius = u * u + v * v
        # pixels that would newly disagree with ground truth
        flips = (radius <= 1.0) & valid & (noisy == gt.data) & (gt.data != label)
        gain = int(flips.sum())
        if gain == 0:
            continue
        if corrupted + gain > target:
            order = np.argsort(radius[flips], kind="stable")[: target - corrupted]
            ys, xs = np.nonzero(flips)
            noisy[ys[order], xs[order]] = label
            corrupted = target
        else:
            noisy[flips] = label
            corrupted += gain
        if corrupted >= target:
            break
    else:
        logger.warning("blob noise stopped at %d of %d corrupted pixels", corrupted, target)
    return LabelMap(noisy)


def make_synthetic_dataset(cfg: SyntheticConfig, seed: int) -> SyntheticDataset:
    """Generate ``cfg.scenes`` scenes deterministically from *seed*."""
    prototypes = make_prototypes(
        stream(seed, "prototypes"), cfg.class_count, cfg.dim, cfg.min_angle_deg
    )
    confuse_rng = stream(seed, "confusion")
    confusion = {
        c: int(confuse_rng.integers(0, cfg.large_classes))
        for c in range(cfg.large_classes, cfg.class_count)
    }
    if cfg.noise_cue > 0 and cfg.noise_fraction > 0:
        cues = make_cue_directions(stream(seed, "cues"), prototypes)
    else:
        cues = np.zeros_like(prototypes)
    rows, cols = cfg.height // cfg.stride, cfg.width // cfg.stride
    scenes = []
    for index in range(cfg.scenes):
        scene_id = f"scene_{index:04d}"
        rng = stream(seed, "scene", index)
        cells, protected = _voronoi_cells(rng, rows, cols, cfg.large_classes)
        labels, instances, objects = _place_objects(rng, cfg, cells, protected)
        gt = LabelMap(labels)
        noisy = blob_noise(
            stream(seed, "blob-noise", index), gt, cfg.noise_fraction, cfg.class_count,
            cfg.blob_min_axis, cfg.blob_max_axis,
        )
        instances.setflags(write=False)
        scenes.append(SyntheticScene(scene_id, gt, noisy, instances, tuple(objects)))
    logger.info(
        "generated %d synthetic scenes (%dx%d, %d classes, seed %d)",
        len(scenes), cfg.width, cfg.height, cfg.class_count, seed,
    )
    return SyntheticDataset(
        config=cfg,
        seed=seed,
        catalog=synthetic_catalog(cfg.class_count, cfg.small_classes),
        prototypes=prototypes,
        confusion=confusion,
        cues=cues,
        scenes=tuple(scenes),
    )


# ---------------------------------------------------------------------------
# Feature provider
# ---------------------------------------------------------------------------

def instance_grid(
    instances: np.ndarray, spec: CropSpec, shape: tuple[int, ...]
) -> np.ndarray:
    """Instance ids of a view, nearest-sampled to a feature grid of *shape*."""
    window = instances[spec.y0:spec.y0 + spec.crop_h, spec.x0:spec.x0 + spec.crop_w]
    rows, cols = shape[0], shape[1]
    return window[nearest_indices(spec.crop_h, rows)[:, None],
                  nearest_indices(spec.crop_w, cols)[None, :]]


def confusion_probability(
    cfg: SyntheticConfig, pixels_in_view: int, spec: CropSpec
) -> float:
    """Swap probability of one small-object cell seen in *spec*.

    The object's effective area is its in-crop pixel count scaled by the
    resize ratio squared and divided by the crop's share of the frame.
    """
    if pixels_in_view <= 0 or not cfg.confusion:
        return 0.0
    share = (spec.crop_w * spec.crop_h) / (cfg.width * cfg.height)
    effective = pixels_in_view * spec.resize_ratio ** 2 / share
    return cfg.p0 * min(1.0, cfg.a0 / effective)


class SyntheticFeatureProvider:
    """Feature provider over a :class:`SyntheticDataset`."""

    def __init__(self, dataset: SyntheticDataset, seed: int | None = None) -> None:
        self.dataset = dataset
        self.config = dataset.config
        self.stride = dataset.config.stride
        self.seed = dataset.seed if seed is None else seed

    def resolve_view(self, scene_id: str, spec: CropSpec | None) -> tuple[SyntheticScene, CropSpec]:
        scene = self.dataset.scene(scene_id)
        if spec is None:
            spec = CropSpec.full_frame(scene.width, scene.height)
        if not spec.fits(scene.width, scene.height):
            raise ValidationError(f"view {spec.key()} does not fit scene {scene_id!r}")
        return scene, spec

    def _noise(
        self, kind: str, scene_id: str, spec: CropSpec, shape: tuple[int, ...]
    ) -> np.ndarray:
        if self.config.sigma == 0:
            return np.zeros(shape)
        rng = stream(self.seed, kind, scene_id, spec.key())
        return self.config.sigma * rng.standard_normal(shape)

    def view_labels(self, scene_id: str, spec: CropSpec | None = None) -> LabelMap:
        """Ground truth of a view at its feature-grid resolution."""
        scene, spec = self.resolve_view(scene_id, spec)
        return view_labels(scene.ground_truth, spec, self.stride)

    def view_features(self, scene_id: str, spec: CropSpec | None = None) -> FeatureMap:
        scene, spec = self.resolve_view(scene_id, spec)
        cells = view_labels(scene.ground_truth, spec, self.stride).data.astype(np.int64)
        if self.config.confusion and scene.objects:
            window = scene.instances[spec.y0:spec.y0 + spec.crop_h,
                                     spec.x0:spec.x0 + spec.crop_w]
            grid = instance_grid(scene.instances, spec, cells.shape)
            rng = stream(self.seed, "confusion-draw", scene_id, spec.key())
            draws = rng.random(cells.shape)
            for obj in scene.objects:
                in_grid = grid == obj.instance_id
                if not in_grid.any():
                    continue
                inside = int(np.count_nonzero(window == obj.instance_id))
                p = confusion_probability(self.config, inside, spec)
                swap = in_grid & (draws < p)
                cells[swap] = self.dataset.confusion[obj.class_index]
        data = self.dataset.prototypes[cells]
        return FeatureMap(data + self._noise("view-noise", scene_id, spec, data.shape))

    def input_features(self, scene_id: str, spec: CropSpec | None = None) -> FeatureMap:
        scene, spec = self.resolve_view(scene_id, spec)
        labels = view_labels(scene.ground_truth, spec, self.stride).data.astype(np.int64)
        data = self.dataset.prototypes[labels]
        if self.config.noise_cue > 0 and self.config.noise_fraction > 0:
            noisy = view_labels(scene.noisy_mask, spec, self.stride).data.astype(np.int64)
            corrupted = noisy != labels
            data[corrupted] += self.config.noise_cue * self.dataset.cues[noisy[corrupted]]
        return FeatureMap(data + self._noise("input-noise", scene_id, spec, data.shape))

    def sample_local_view(
        self, rng: np.random.Generator, scene: SceneRecord, crop: CropConfig
    ) -> CropSpec:
        return sample_crop(rng, scene.width, scene.height, crop)

    def sample_global_view(
        self, rng: np.random.Generator, scene: SceneRecord, crop: CropConfig
    ) -> CropSpec | None:
        return sample_global_scale(rng, scene.width, scene.height, crop)


def small_object_error_rate(
    provider: SyntheticFeatureProvider,
    scene_id: str,
    instance_id: int,
    spec: CropSpec | None = None,
) -> float:
    """Fraction of an object's grid cells whose pseudo-label is wrong in *spec*."""
    scene, spec = provider.resolve_view(scene_id, spec)
    mask = cosine_pseudo_mask(provider.view_features(scene_id, spec), provider.dataset.text)
    grid = instance_grid(scene.instances, spec, (mask.height, mask.width))
    truth = provider.view_labels(scene_id, spec).data
    cells = grid == instance_id
    if not cells.any():
        raise ValidationError(f"object {instance_id} is not visible in view {spec.key()}")
    return float(np.mean(mask.data[cells] != truth[cells]))


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def write_synthetic_dataset(
    dataset: SyntheticDataset,
    out_dir: str | Path,
    crop: CropConfig,
    *,
    local_views: int = 4,
) -> dict[str, Path]:
    """Write a dataset in the file-backed layout.

    Produces ``catalog.tsv``, ``text.dtn1``, ``labels/gt/*.pgm``,
    ``labels/noisy/*.pgm`` and ``features/<scene>/`` holding the global
    view plus *local_views* sampled local views per scene.
    """
    out_dir = Path(out_dir)
    provider = SyntheticFeatureProvider(dataset)
    paths = {
        "catalog": exporter.write_catalog(out_dir / "catalog.tsv", dataset.catalog),
        "text": exporter.write_tensor(out_dir / "text.dtn1", dataset.prototypes[:, None, :]),
        "labels": out_dir / "labels" / "gt",
        "noisy_labels": out_dir / "labels" / "noisy",
        "features_root": out_dir / "features",
    }
    for scene in dataset:
        exporter.write_label_map(paths["labels"] / f"{scene.scene_id}.pgm", scene.ground_truth)
        exporter.write_label_map(paths["noisy_labels"] / f"{scene.scene_id}.pgm", scene.noisy_mask)
        scene_dir = paths["features_root"] / scene.scene_id
        global_view = provider.view_features(scene.scene_id)
        exporter.write_tensor(scene_dir / GLOBAL_VIEW_FILE, global_view.data)
        rng = stream(dataset.seed, "export-views", scene.scene_id)
        for _ in range(local_views):
            spec = sample_crop(rng, scene.width, scene.height, crop)
            exporter.write_tensor(
                scene_dir / f"{spec.key()}.dtn1", provider.view_features(scene.scene_id, spec).data
            )
    logger.info("wrote %d synthetic scenes to %s", len(dataset), out_dir)
    return paths
