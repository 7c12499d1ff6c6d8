"""Seeded synthetic ablations: view/loss arms, fixed-weight sweep, resize-ratio sweep."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from carbseg import exporter
from carbseg.config import RunConfig
from carbseg.evaluation import evaluate
from carbseg.exceptions import ConfigError
from carbseg.models import (
    ClassCatalog,
    EvalReport,
    LossMode,
    TelemetryRecord,
    ViewMode,
    WeightingStrategy,
)
from carbseg.synthetic import SyntheticFeatureProvider, make_synthetic_dataset
from carbseg.trainer import train

logger = logging.getLogger(__name__)

ARMS: dict[str, tuple[ViewMode, LossMode]] = {
    "base": (ViewMode.BASE, LossMode.PLAIN),
    "base+carb": (ViewMode.BASE, LossMode.CARB),
    "local": (ViewMode.LOCAL, LossMode.PLAIN),
    "local+carb": (ViewMode.LOCAL, LossMode.CARB),
    "dual": (ViewMode.DUAL, LossMode.PLAIN),
    "dual+carb": (ViewMode.DUAL, LossMode.CARB),
}
WEIGHT_SWEEP = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5)
RESIZE_SWEEP: tuple[tuple[float, float], ...] = (
    (0.5, 0.5), (1.0, 1.0), (1.5, 1.5), (2.0, 2.0), (1.0, 2.0),
)


@dataclass(frozen=True, slots=True, eq=False)
class ArmResult:
    """Outcome of one training run on a synthetic dataset."""

    arm: str
    seed: int
    report: EvalReport
    small_miou: float
    large_miou: float
    final_w: float
    telemetry: tuple[TelemetryRecord, ...]

    @property
    def miou(self) -> float:
        return self.report.miou


def arm_config(config: RunConfig, arm: str) -> RunConfig:
    try:
        view_mode, loss_mode = ARMS[arm]
    except KeyError:
        raise ConfigError(f"unknown arm {arm!r}; expected one of {', '.join(ARMS)}") from None
    return replace(config, train=replace(config.train, view_mode=view_mode, loss_mode=loss_mode))


def run_config(config: RunConfig, label: str, seed: int, *, threads: int = 1) -> ArmResult:
    """Generate the dataset for *seed*, train, and evaluate on clean ground truth."""
    if config.data.data != "synthetic":
        raise ConfigError("experiments run on synthetic data only")
    dataset = make_synthetic_dataset(config.synthetic, seed)
    provider = SyntheticFeatureProvider(dataset)
    scenes = dataset.records()
    train_cfg = replace(config.train, seed=seed)
    result = train(train_cfg, provider, scenes, dataset.text, threads=threads)
    report = evaluate(result.head, provider, scenes, dataset.catalog.class_count, threads=threads)
    logger.info("%s seed %d: mIoU %.4f", label, seed, report.miou)
    return ArmResult(
        arm=label,
        seed=seed,
        report=report,
        small_miou=report.mean_over(list(dataset.small_classes)),
        large_miou=report.mean_over(list(dataset.large_classes)),
        final_w=result.telemetry[-1].w,
        telemetry=tuple(result.telemetry),
    )


def run_ablation(
    config: RunConfig,
    arms: Sequence[str] = tuple(ARMS),
    seeds: Sequence[int] = (0,),
    *,
    threads: int = 1,
) -> list[ArmResult]:
    """Every arm on every seed; each seed gets its own dataset."""
    return [
        run_config(arm_config(config, arm), arm, seed, threads=threads)
        for arm in arms
        for seed in seeds
    ]


def weight_sweep(
    config: RunConfig,
    weights: Sequence[float] = WEIGHT_SWEEP,
    seeds: Sequence[int] = (0,),
    *,
    threads: int = 1,
) -> list[ArmResult]:
    """Balancing with a fixed inconsistent-region weight, one run per weight and seed."""
    results = []
    for weight in weights:
        train_cfg = replace(
            config.train, loss_mode=LossMode.CARB,
            weighting=WeightingStrategy.FIXED, fixed_weight=weight,
        )
        for seed in seeds:
            results.append(run_config(replace(config, train=train_cfg), f"w={weight:g}",
                                      seed, threads=threads))
    return results


def resize_sweep(
    config: RunConfig,
    ranges: Sequence[tuple[float, float]] = RESIZE_SWEEP,
    seeds: Sequence[int] = (0,),
    *,
    threads: int = 1,
) -> list[ArmResult]:
    """Local-view training at fixed or random resize ratios."""
    results = []
    for r_min, r_max in ranges:
        crop = replace(config.train.crop, r_min=r_min, r_max=r_max)
        train_cfg = replace(config.train, view_mode=ViewMode.LOCAL, crop=crop)
        label = f"r={r_min:g}" if r_min == r_max else f"r={r_min:g}-{r_max:g}"
        for seed in seeds:
            results.append(
                run_config(replace(config, train=train_cfg), label, seed, threads=threads)
            )
    return results


def summarize(results: Sequence[ArmResult]) -> dict[str, dict[str, float]]:
    """Mean mIoU, small/large-class mIoU and final weight per arm, in first-seen order."""
    grouped: dict[str, list[ArmResult]] = {}
    for r in results:
        grouped.setdefault(r.arm, []).append(r)
    return {
        arm: {
            "miou": float(np.mean([r.miou for r in runs])),
            "small_miou": float(np.nanmean([r.small_miou for r in runs])),
            "large_miou": float(np.nanmean([r.large_miou for r in runs])),
            "final_w": float(np.mean([r.final_w for r in runs])),
            "runs": float(len(runs)),
        }
        for arm, runs in grouped.items()
    }


def write_results(
    results: Sequence[ArmResult], out_dir: str | Path, catalog: ClassCatalog | None = None
) -> list[Path]:
    """``runs.csv`` (one row per run, with per-class IoU) and ``summary.csv``."""
    out_dir = Path(out_dir)
    if not results:
        raise ConfigError("no experiment results to write")
    class_count = len(results[0].report.per_class_iou)
    names = [catalog.names[c] if catalog else f"iou_{c}" for c in range(class_count)]
    run_rows = [
        [r.arm, r.seed, f"{r.miou:.6f}", f"{r.small_miou:.6f}", f"{r.large_miou:.6f}",
         f"{r.final_w:.6f}", *("" if v is None else f"{v:.6f}" for v in r.report.per_class_iou)]
        for r in results
    ]
    summary_rows = [
        [arm, int(s["runs"]), f"{s['miou']:.6f}", f"{s['small_miou']:.6f}",
         f"{s['large_miou']:.6f}", f"{s['final_w']:.6f}"]
        for arm, s in summarize(results).items()
    ]
    return [
        exporter.write_csv(
            out_dir / "runs.csv",
            ["arm", "seed", "miou", "small_miou", "large_miou", "final_w", *names],
            run_rows,
        ),
        exporter.write_csv(
            out_dir / "summary.csv",
            ["arm", "runs", "miou", "small_miou", "large_miou", "final_w"],
            summary_rows,
        ),
    ]
