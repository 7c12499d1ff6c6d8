"""Linear-softmax segmentation head and the two-stage training protocol.

Stage 1 trains on cosine-argmax pseudo-masks of the global view (and,
in ``local``/``dual`` view modes, a sampled local view) with plain
cross-entropy. Stage 2 splits every pseudo-mask into regions that agree
or disagree with the model's filtered prediction and, with ``loss_mode
= carb``, scales the disagreeing region's loss by the adaptive weight.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from carbseg import exporter, importer
from carbseg.carb import (
    LossHistory,
    adaptive_weight,
    carb_loss,
    filtered_prediction,
    partition,
    push_losses,
    region_cross_entropy,
    region_logit_gradient,
)
from carbseg.config import TrainConfig
from carbseg.evaluation import evaluate
from carbseg.exceptions import DataImportError, ProviderError, ValidationError
from carbseg.labels import argmax_labels, crop_labels, view_labels
from carbseg.maskgen import FeatureProvider, cosine_pseudo_mask, local_view_features
from carbseg.models import (
    CropSpec,
    FeatureMap,
    ImageLabelSet,
    LabelMap,
    LossGradient,
    LossMode,
    MaskSource,
    ProbabilityMap,
    RegionNormalization,
    RegionPartition,
    SceneRecord,
    TelemetryRecord,
    TextEmbeddingSet,
    ViewMode,
    WeightingStrategy,
)
from carbseg.rng import stream
from carbseg.stats import image_label_set

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Head
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LinearSegHead:
    """Per-cell linear classifier ``softmax((W f + b) / tau)``."""

    weights: np.ndarray
    bias: np.ndarray | None = None
    temperature: float = 1.0

    def __post_init__(self) -> None:
        self.weights = np.array(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValidationError(f"weights must be C×D, got shape {self.weights.shape}")
        if self.bias is not None:
            self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape != (self.class_count,):
                raise ValidationError(
                    f"bias has {self.bias.shape[0]} entries for {self.class_count} classes"
                )
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")

    @classmethod
    def from_text(
        cls, text: TextEmbeddingSet, temperature: float = 1.0, use_bias: bool = True
    ) -> LinearSegHead:
        """Weights start at the row-normalized text embeddings, bias at zero."""
        bias = np.zeros(text.class_count) if use_bias else None
        return cls(text.normalized(), bias, temperature)

    @property
    def class_count(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    def logits(self, features: FeatureMap) -> np.ndarray:
        if features.dim != self.dim:
            raise ValidationError(f"feature dim {features.dim} does not match head dim {self.dim}")
        z = features.data.astype(np.float64) @ self.weights.T
        if self.bias is not None:
            z = z + self.bias
        return z / self.temperature

    def predict(self, features: FeatureMap) -> LabelMap:
        """Unfiltered argmax label per cell."""
        return LabelMap(np.argmax(self.logits(features), axis=2).astype(np.uint8))

    def copy(self) -> LinearSegHead:
        return LinearSegHead(
            self.weights.copy(), None if self.bias is None else self.bias.copy(), self.temperature
        )


def forward(head: LinearSegHead, features: FeatureMap) -> ProbabilityMap:
    """Per-cell class distribution."""
    z = head.logits(features)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    return ProbabilityMap(e / e.sum(axis=2, keepdims=True))


def _parameter_gradient(
    head: LinearSegHead, features: FeatureMap, dlogits: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    g = dlogits.reshape(-1, head.class_count) / head.temperature
    f = features.data.reshape(-1, head.dim).astype(np.float64)
    grad_bias = g.sum(axis=0) if head.bias is not None else np.zeros(head.class_count)
    return g.T @ f, grad_bias


def loss_and_grad(
    head: LinearSegHead,
    features: FeatureMap,
    target: LabelMap,
    regions: RegionPartition | None = None,
    w: float = 1.0,
    *,
    normalization: RegionNormalization = RegionNormalization.REGION,
) -> LossGradient:
    """Cross-entropy of *head* against *target* and its gradient on W and b.

    Without *regions* this is the mean CE over all labeled cells. With a
    partition it is ``L_c + w * L_i``; ``region`` normalization divides each
    region by its own size, ``total`` divides both by the labeled-cell count.
    """
    if (features.height, features.width) != (target.height, target.width):
        raise ValidationError(
            f"features {features.width}x{features.height} and target "
            f"{target.width}x{target.height} differ in size"
        )
    probs = forward(head, features)
    if regions is None:
        region = target.valid
        loss = region_cross_entropy(probs, target, region)
        scale = 1.0 / loss.pixel_count if loss.pixel_count else 0.0
        dlogits = region_logit_gradient(probs, target, region, scale)
        grad_w, grad_b = _parameter_gradient(head, features, dlogits)
        return LossGradient(loss.value, grad_w, grad_b)

    if regions.consistent.shape != target.data.shape:
        raise ValidationError("region masks do not match the target size")
    loss_c = region_cross_entropy(probs, target, regions.consistent)
    loss_i = region_cross_entropy(probs, target, regions.inconsistent)
    if normalization is RegionNormalization.REGION:
        value = carb_loss(loss_c, loss_i, w)
        scale_c = 1.0 / loss_c.pixel_count if loss_c.pixel_count else 0.0
        scale_i = w / loss_i.pixel_count if loss_i.pixel_count else 0.0
    else:
        total = loss_c.pixel_count + loss_i.pixel_count
        if total == 0:
            value, scale_c, scale_i = 0.0, 0.0, 0.0
        else:
            weighted = loss_c.pixel_count * loss_c.value + w * loss_i.pixel_count * loss_i.value
            value = weighted / total
            scale_c, scale_i = 1.0 / total, w / total
    dlogits = (
        region_logit_gradient(probs, target, regions.consistent, scale_c)
        + region_logit_gradient(probs, target, regions.inconsistent, scale_i)
    )
    grad_w, grad_b = _parameter_gradient(head, features, dlogits)
    return LossGradient(value, grad_w, grad_b, loss_c, loss_i)


def add_gradients(a: LossGradient, b: LossGradient) -> LossGradient:
    """Sum of two loss terms (e.g. global and local views)."""
    return LossGradient(
        a.value + b.value, a.grad_weights + b.grad_weights, a.grad_bias + b.grad_bias
    )


class MomentumSGD:
    """``v <- mu v + g``, ``theta <- theta - lr v`` on the head parameters."""

    def __init__(self, head: LinearSegHead, lr: float, momentum: float = 0.0) -> None:
        self.head = head
        self.lr = lr
        self.momentum = momentum
        self.velocity_weights = np.zeros_like(head.weights)
        self.velocity_bias = np.zeros(head.class_count)

    def step(self, grad: LossGradient) -> None:
        self.velocity_weights = self.momentum * self.velocity_weights + grad.grad_weights
        self.head.weights = self.head.weights - self.lr * self.velocity_weights
        if self.head.bias is not None:
            self.velocity_bias = self.momentum * self.velocity_bias + grad.grad_bias
            self.head.bias = self.head.bias - self.lr * self.velocity_bias


# ---------------------------------------------------------------------------
# Views
# ---------------------------------------------------------------------------

@dataclass(frozen=True, slots=True, eq=False)
class TrainingView:
    """Head input features of one view with the pseudo-mask supervising it."""

    spec: CropSpec | None
    features: FeatureMap
    mask: LabelMap


@contextmanager
def _provider_errors(scene_id: str, iteration: int | None) -> Iterator[None]:
    try:
        yield
    except (DataImportError, OSError) as e:
        where = "setup" if iteration is None else f"iteration {iteration}"
        raise ProviderError(f"scene {scene_id!r}, {where}: {e}") from e


def view_pseudo_mask(
    provider: FeatureProvider,
    scene: SceneRecord,
    spec: CropSpec | None,
    text: TextEmbeddingSet,
    allowed: ImageLabelSet | None = None,
    mask_source: MaskSource = MaskSource.CLIP,
) -> LabelMap:
    """Feature-grid pseudo-mask of one view of *scene*."""
    if mask_source is MaskSource.ORACLE:
        if scene.noisy_mask is None:
            raise ValidationError(f"scene {scene.scene_id!r} has no oracle mask")
        full = spec or CropSpec.full_frame(scene.width, scene.height)
        return view_labels(scene.noisy_mask, full, provider.stride)
    if spec is None:
        features = provider.view_features(scene.scene_id)
    else:
        features = local_view_features(provider, scene, spec)
    present = None if allowed is None or allowed.empty else allowed.present
    return cosine_pseudo_mask(features, text, present)


def build_view(
    provider: FeatureProvider,
    scene: SceneRecord,
    spec: CropSpec | None,
    text: TextEmbeddingSet,
    allowed: ImageLabelSet | None,
    mask_source: MaskSource,
) -> TrainingView:
    mask = view_pseudo_mask(provider, scene, spec, text, allowed, mask_source)
    features = provider.input_features(scene.scene_id, spec)
    if (features.height, features.width) != (mask.height, mask.width):
        view = "global" if spec is None else spec.key()
        raise ValidationError(
            f"scene {scene.scene_id!r} view {view}: input grid {features.width}x{features.height} "
            f"does not match mask grid {mask.width}x{mask.height}"
        )
    return TrainingView(spec, features, mask)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TrainResult:
    head: LinearSegHead
    telemetry: list[TelemetryRecord]
    history: LossHistory
    iterations: int = 0


def _label_sets(
    scenes: Sequence[SceneRecord], cfg: TrainConfig
) -> list[ImageLabelSet | None]:
    if not cfg.filter_pseudo_masks:
        return [None] * len(scenes)
    return [
        None if s.ground_truth is None
        else image_label_set(s.ground_truth, cfg.min_pixels, s.scene_id)
        for s in scenes
    ]


def _local_allowed(
    scene: SceneRecord, spec: CropSpec, image_set: ImageLabelSet | None, cfg: TrainConfig
) -> ImageLabelSet | None:
    if image_set is None or cfg.local_filter == "image" or scene.ground_truth is None:
        return image_set
    return image_label_set(crop_labels(scene.ground_truth, spec), cfg.min_pixels, scene.scene_id)


def _mean_nonempty(values: list[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def train(
    cfg: TrainConfig,
    provider: FeatureProvider,
    scenes: Sequence[SceneRecord],
    text: TextEmbeddingSet,
    *,
    threads: int = 1,
) -> TrainResult:
    """Run both training stages and return the head with per-iteration telemetry."""
    if not scenes:
        raise ValidationError("training needs at least one scene")
    head = LinearSegHead.from_text(text, cfg.temperature, cfg.use_bias)
    optimizer = MomentumSGD(head, cfg.lr, cfg.momentum)
    history = LossHistory(cfg.queue_capacity)
    label_sets = _label_sets(scenes, cfg)
    labeled = [s for s in scenes if s.ground_truth is not None]

    def prepare(index: int) -> TrainingView:
        scene = scenes[index]
        with _provider_errors(scene.scene_id, None):
            return build_view(provider, scene, None, text, label_sets[index], cfg.mask_source)

    indices = range(len(scenes))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            global_views = list(pool.map(prepare, indices))
    else:
        global_views = [prepare(i) for i in indices]
    logger.info(
        "training %s on %d scenes: %d + %d iterations",
        cfg.arm, len(scenes), cfg.stage1_iters, cfg.stage2_iters,
    )

    records: list[TelemetryRecord] = []
    for it in range(cfg.total_iters):
        stage = 1 if it < cfg.stage1_iters else 2
        if it == cfg.stage1_iters and stage == 2:
            logger.info("stage 2 starts at iteration %d (%s loss)", it, cfg.loss_mode.value)
        rng = stream(cfg.seed, "iteration", it)
        index = int(rng.integers(0, len(scenes)))
        scene = scenes[index]
        image_set = label_sets[index]

        views = [global_views[index]]
        with _provider_errors(scene.scene_id, it):
            if cfg.view_mode is ViewMode.DUAL:
                spec = provider.sample_global_view(rng, scene, cfg.crop)
                if spec is not None:
                    views[0] = build_view(provider, scene, spec, text, image_set, cfg.mask_source)
            if cfg.view_mode in (ViewMode.LOCAL, ViewMode.DUAL):
                spec = provider.sample_local_view(rng, scene, cfg.crop)
                views.append(build_view(
                    provider, scene, spec, text,
                    _local_allowed(scene, spec, image_set, cfg), cfg.mask_source,
                ))

        parts = []
        losses_c: list[float | None] = []
        losses_i: list[float | None] = []
        for view in views:
            probs = forward(head, view.features)
            if image_set is not None and not image_set.empty:
                pred = filtered_prediction(probs, image_set)
            else:
                pred = argmax_labels(probs)
            part = partition(view.mask, pred)
            l_c = region_cross_entropy(probs, view.mask, part.consistent)
            l_i = region_cross_entropy(probs, view.mask, part.inconsistent)
            parts.append(part)
            losses_c.append(None if l_c.empty else l_c.value)
            losses_i.append(None if l_i.empty else l_i.value)
        push_losses(history, _mean_nonempty(losses_c), _mean_nonempty(losses_i))

        balancing = stage == 2 and cfg.loss_mode is LossMode.CARB
        if not balancing:
            w = 1.0
        elif cfg.weighting is WeightingStrategy.FIXED:
            w = cfg.fixed_weight
        else:
            w = adaptive_weight(history) if history.ready else 1.0

        total: LossGradient | None = None
        for view, part in zip(views, parts):
            if balancing:
                term = loss_and_grad(head, view.features, view.mask, part, w,
                                     normalization=cfg.region_normalization)
                if cfg.stage2_keep_plain:
                    term = add_gradients(term, loss_and_grad(head, view.features, view.mask))
            else:
                term = loss_and_grad(head, view.features, view.mask)
            total = term if total is None else add_gradients(total, term)
        assert total is not None
        optimizer.step(total)

        miou = None
        last = it == cfg.total_iters - 1
        if labeled and ((it + 1) % cfg.eval_every == 0 or last):
            miou = evaluate(head, provider, labeled, text.class_count, threads=threads).miou
        records.append(TelemetryRecord(
            iteration=it,
            stage=stage,
            loss_total=total.value,
            loss_c=_mean_nonempty(losses_c) or 0.0,
            loss_i=_mean_nonempty(losses_i) or 0.0,
            w=w,
            n_c=sum(p.n_consistent for p in parts),
            n_i=sum(p.n_inconsistent for p in parts),
            train_miou=miou,
        ))
        if (it + 1) % 100 == 0:
            logger.debug(
                "iter %d stage %d loss %.4f w %.3f n_c %d n_i %d",
                it, stage, total.value, w, records[-1].n_c, records[-1].n_i,
            )
    if records and records[-1].train_miou is not None:
        logger.info("final training mIoU %.4f", records[-1].train_miou)
    return TrainResult(head=head, telemetry=records, history=history, iterations=cfg.total_iters)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    head: LinearSegHead, directory: str | Path, iteration: int, seed: int | None = None
) -> Path:
    return exporter.write_checkpoint(
        directory, head.weights, head.bias,
        temperature=head.temperature, iteration=iteration, seed=seed,
    )


def load_checkpoint(directory: str | Path) -> tuple[LinearSegHead, int, int | None]:
    """Return the stored head, the iteration it was saved at and the training seed.

    The seed is ``None`` for checkpoints written without one.
    """
    data = importer.read_checkpoint(directory)
    bias = None if data["bias"] is None else np.asarray(data["bias"], dtype=np.float64)
    head = LinearSegHead(np.asarray(data["weights"], dtype=np.float64), bias, data["temperature"])
    return head, int(data["iteration"]), data["seed"]
