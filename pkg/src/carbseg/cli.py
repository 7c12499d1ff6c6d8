"""Command-line entry point: ``carbseg <command> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 input/output error.
Every command writes ``run_manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from carbseg import __version__, exporter, importer
from carbseg.catalog import builtin_catalog, synthetic_catalog
from carbseg.config import RunConfig, load_config
from carbseg.evaluation import evaluate, evaluate_label_maps, write_iou_table
from carbseg.exceptions import (
    DataImportError,
    ExportError,
    ProviderError,
    ValidationError,
)
from carbseg.experiments import (
    ARMS,
    RESIZE_SWEEP,
    WEIGHT_SWEEP,
    resize_sweep,
    run_ablation,
    summarize,
    weight_sweep,
    write_results,
)
from carbseg.labels import resize_labels_nearest
from carbseg.maskgen import FeatureProvider, FileFeatureProvider, cosine_pseudo_mask
from carbseg.models import ClassCatalog, LabelMap, RunManifest, SceneRecord, TextEmbeddingSet
from carbseg.stats import compute_stats, emit_stats_csv, image_label_set, image_label_sets
from carbseg.synthetic import (
    SyntheticFeatureProvider,
    make_synthetic_dataset,
    write_synthetic_dataset,
)
from carbseg.telemetry import export_curves, write_telemetry
from carbseg.trainer import load_checkpoint, save_checkpoint, train
from carbseg.validator import (
    raise_on_errors,
    validate_config,
    validate_features,
    validate_label_pairs,
    validate_labels,
    validate_text,
)

logger = logging.getLogger(__name__)

MANIFEST_FILE = "run_manifest.json"
LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


class UsageError(ValidationError):
    """Bad command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class _Run:
    """Inputs and outputs a command records in its manifest."""

    command: str
    argv: Sequence[str]
    started_at: str = field(default_factory=_now)
    config: dict[str, str] = field(default_factory=dict)
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def finish(self, directory: Path) -> Path:
        manifest = RunManifest(
            command=self.command,
            argv=tuple(self.argv),
            config=dict(self.config),
            seed=self.seed,
            inputs=dict(self.inputs),
            outputs=dict(self.outputs),
            tool_version=__version__,
            started_at=self.started_at,
            finished_at=_now(),
            extra=dict(self.extra),
        )
        return exporter.write_manifest(directory / MANIFEST_FILE, manifest)


# ---------------------------------------------------------------------------
# Loading helpers
# ---------------------------------------------------------------------------

def _catalog(spec: str) -> ClassCatalog:
    """A catalog file, or a built-in name (cityscapes, camvid, wilddash2)."""
    path = Path(spec)
    if path.is_file():
        return importer.read_catalog(path)
    try:
        return builtin_catalog(spec)
    except ValueError:
        raise FileNotFoundError(f"File not found: {spec}") from None


def _map_threads(fn: Callable[[Any], Any], items: Sequence[Any], threads: int) -> list[Any]:
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class _Data:
    provider: FeatureProvider
    scenes: list[SceneRecord]
    text: TextEmbeddingSet
    catalog: ClassCatalog
    inputs: dict[str, str]


def _load_data(config: RunConfig, gt_dir: Path | None = None) -> _Data:
    """Scenes, provider, text embeddings and catalog for ``train`` and ``eval``."""
    if config.data.data == "synthetic":
        dataset = make_synthetic_dataset(config.synthetic, config.train.seed)
        scenes = dataset.records()
        if gt_dir is not None:
            gts = dict(importer.read_label_dir(gt_dir, dataset.catalog.class_count))
            scenes = [
                SceneRecord(s.scene_id, s.width, s.height, gts.get(s.scene_id, s.ground_truth),
                            s.noisy_mask)
                for s in scenes
            ]
        return _Data(SyntheticFeatureProvider(dataset), scenes, dataset.text, dataset.catalog, {})

    data = config.data
    assert data.features_root is not None and data.text is not None and data.catalog is not None
    catalog = _catalog(str(data.catalog))
    text = importer.read_text_embeddings(data.text)
    provider = FileFeatureProvider(data.features_root, data.stride)
    results = validate_text(text, catalog) + validate_features(
        provider, text, config.train.view_mode
    )
    labels_dir = gt_dir or data.labels
    gts = dict(importer.read_label_dir(labels_dir, catalog.class_count)) if labels_dir else {}
    noisy = (
        dict(importer.read_label_dir(data.noisy_labels, catalog.class_count))
        if data.noisy_labels else {}
    )
    if gts:
        results += validate_labels(
            sorted(gts.items()), catalog.class_count, config.train.min_pixels
        )
    if noisy and gts:
        results += validate_label_pairs(sorted(gts.items()), sorted(noisy.items()))
    raise_on_errors(results)

    scenes = []
    for scene_id in provider.scene_ids():
        gt = gts.get(scene_id)
        if gt is not None:
            width, height = gt.width, gt.height
        else:
            grid = provider.view_features(scene_id)
            width, height = grid.width * provider.stride, grid.height * provider.stride
        scenes.append(SceneRecord(scene_id, width, height, gt, noisy.get(scene_id)))
    inputs = {
        k: str(getattr(data, k))
        for k in ("features_root", "text", "catalog", "noisy_labels")
        if getattr(data, k) is not None
    }
    if labels_dir:
        inputs["labels"] = str(labels_dir)
    return _Data(provider, scenes, text, catalog, inputs)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_stats(args: argparse.Namespace, run: _Run) -> int:
    catalog = _catalog(args.catalog)
    maps = importer.read_label_dir(args.labels, catalog.class_count)
    if not maps:
        raise ValidationError(f"no label maps in {args.labels}")
    sets = image_label_sets(maps, args.min_pixels, threads=args.threads)
    stats = compute_stats(sets, catalog.class_count)
    written = emit_stats_csv(stats, args.out, catalog)
    run.config = {"min_pixels": str(args.min_pixels)}
    run.inputs = {"labels": str(args.labels), "catalog": args.catalog}
    run.outputs = {p.stem: str(p) for p in written}
    run.finish(Path(args.out))
    return 0


def cmd_pseudomask(args: argparse.Namespace, run: _Run) -> int:
    provider = FileFeatureProvider(args.features, args.stride)
    text = importer.read_text_embeddings(args.text)
    if args.catalog:
        raise_on_errors(validate_text(text, _catalog(args.catalog)))
    labels: dict[str, LabelMap] = {}
    if args.allowed_from_labels:
        labels = dict(importer.read_label_dir(args.allowed_from_labels, text.class_count))
    scene_ids = provider.scene_ids()
    if not scene_ids:
        raise ValidationError(f"no scenes with {args.features}/<scene>/global.dtn1")
    out = Path(args.out)

    def one(scene_id: str) -> Path:
        allowed = None
        size = None
        gt = labels.get(scene_id)
        if gt is not None:
            present = image_label_set(gt, args.min_pixels, scene_id)
            allowed = present.present or None
            size = (gt.width, gt.height)
        mask = cosine_pseudo_mask(provider.view_features(scene_id), text, allowed)
        if size is None:
            size = (mask.width * provider.stride, mask.height * provider.stride)
        mask = resize_labels_nearest(mask, *size)
        return exporter.write_label_map(out / f"{scene_id}.pgm", mask)

    written = _map_threads(one, scene_ids, args.threads)
    logger.info("wrote %d pseudo-masks to %s", len(written), out)
    run.config = {"stride": str(args.stride), "min_pixels": str(args.min_pixels)}
    run.inputs = {"features": str(args.features), "text": str(args.text)}
    if args.allowed_from_labels:
        run.inputs["allowed_from_labels"] = str(args.allowed_from_labels)
    run.outputs = {"masks": str(out)}
    run.extra = {"scenes": len(written)}
    run.finish(out)
    return 0


def cmd_synth(args: argparse.Namespace, run: _Run) -> int:
    config = load_config(args.config, args.seed)
    raise_on_errors(validate_config(config))
    dataset = make_synthetic_dataset(config.synthetic, args.seed)
    paths = write_synthetic_dataset(
        dataset, args.out, config.train.crop, local_views=args.local_views
    )
    run.config, run.seed = config.resolved(), args.seed
    run.inputs = {"config": str(args.config)}
    run.outputs = {k: str(v) for k, v in paths.items()}
    run.extra = {"local_views": args.local_views}
    run.finish(Path(args.out))
    return 0


def cmd_train(args: argparse.Namespace, run: _Run) -> int:
    config = load_config(args.config, args.seed)
    raise_on_errors(validate_config(config))
    data = _load_data(config)
    result = train(config.train, data.provider, data.scenes, data.text, threads=args.threads)
    out = Path(args.out)
    run.outputs = {
        "telemetry": str(write_telemetry(out / "telemetry.csv", result.telemetry)),
        "checkpoint": str(save_checkpoint(
            result.head, out / "checkpoint", result.iterations, seed=config.train.seed
        )),
    }
    if any(s.ground_truth is not None for s in data.scenes):
        report = evaluate(result.head, data.provider, data.scenes, data.catalog.class_count,
                          threads=args.threads)
        run.outputs["iou"] = str(write_iou_table(report, out / "iou.csv", data.catalog))
        run.extra = {"miou": report.miou}
        print(f"mIoU {report.miou:.6f}")
    run.config, run.seed = config.resolved(), args.seed
    run.inputs = {"config": str(args.config), **data.inputs}
    run.finish(out)
    return 0


def _check_eval_seed(
    config: RunConfig, cli_seed: int | None, trained_seed: int | None
) -> None:
    """Synthetic scenes must be rebuilt from the seed the checkpoint was trained on."""
    if config.data.data != "synthetic":
        return
    if cli_seed is None and trained_seed is None and "seed" not in config.source:
        raise UsageError(
            "eval: --seed is required; the checkpoint does not record the seed "
            "its synthetic scenes were generated from"
        )
    if cli_seed is not None and trained_seed is not None and cli_seed != trained_seed:
        raise UsageError(
            f"eval: --seed {cli_seed} differs from the checkpoint's training seed {trained_seed}"
        )


def cmd_eval(args: argparse.Namespace, run: _Run) -> int:
    catalog = _catalog(args.catalog)
    run.inputs = {"gt": str(args.gt), "catalog": args.catalog}
    if args.pred:
        preds = importer.read_label_dir(args.pred)
        gts = importer.read_label_dir(args.gt, catalog.class_count)
        report = evaluate_label_maps(preds, gts, catalog.class_count, threads=args.threads)
        run.inputs["pred"] = str(args.pred)
    else:
        if not args.config:
            raise UsageError("eval: --checkpoint requires --config")
        head, iteration, trained_seed = load_checkpoint(args.checkpoint)
        config = load_config(args.config, trained_seed if args.seed is None else args.seed)
        _check_eval_seed(config, args.seed, trained_seed)
        data = _load_data(config, Path(args.gt))
        if head.class_count != catalog.class_count:
            raise ValidationError(
                f"checkpoint has {head.class_count} classes, catalog {catalog.class_count}"
            )
        report = evaluate(head, data.provider, data.scenes, catalog.class_count,
                          threads=args.threads)
        run.config, run.seed = config.resolved(), config.train.seed
        run.inputs.update(checkpoint=str(args.checkpoint), config=str(args.config), **data.inputs)
        run.extra = {"checkpoint_iteration": iteration}
    print(f"mIoU {report.miou:.6f}")
    out = Path(args.out) if args.out else Path.cwd()
    if args.out:
        run.outputs = {"iou": str(write_iou_table(report, out / "iou.csv", catalog))}
    run.extra["miou"] = report.miou
    run.finish(out)
    return 0


def cmd_export_curves(args: argparse.Namespace, run: _Run) -> int:
    window = args.window
    run.seed = args.seed
    if args.config:
        config = load_config(args.config, args.seed)
        run.config, run.seed = config.resolved(), config.train.seed
        run.inputs["config"] = str(args.config)
        if window is None:
            window = config.train.curve_window
    window = 50 if window is None else window
    written = export_curves(args.telemetry, args.out, window)
    run.inputs["telemetry"] = str(args.telemetry)
    run.outputs = {p.stem: str(p) for p in written}
    run.extra = {"window": window}
    run.finish(Path(args.out))
    return 0


def cmd_ablate(args: argparse.Namespace, run: _Run) -> int:
    config = load_config(args.config, args.seed)
    raise_on_errors(validate_config(config))
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise UsageError(f"ablate: unknown arm(s) {', '.join(unknown)}; expected {', '.join(ARMS)}")
    seeds = [args.seed + k for k in range(args.seeds)]
    if args.sweep == "weight":
        results = weight_sweep(config, WEIGHT_SWEEP, seeds, threads=args.threads)
    elif args.sweep == "resize":
        results = resize_sweep(config, RESIZE_SWEEP, seeds, threads=args.threads)
    else:
        results = run_ablation(config, arms, seeds, threads=args.threads)
    catalog = synthetic_catalog(config.synthetic.class_count, config.synthetic.small_classes)
    written = write_results(results, args.out, catalog)
    for arm, s in summarize(results).items():
        print(f"{arm}\tmIoU {s['miou']:.6f}\tsmall {s['small_miou']:.6f}\tw {s['final_w']:.4f}")
    run.config, run.seed = config.resolved(), args.seed
    run.inputs = {"config": str(args.config)}
    run.outputs = {p.stem: str(p) for p in written}
    run.extra = {"sweep": args.sweep, "seeds": seeds}
    if args.sweep == "arms":
        run.extra["arms"] = arms
    run.finish(Path(args.out))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="carbseg", description="Region-balanced training from cosine-argmax pseudo-masks."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("stats", help="dataset class statistics")
    p.add_argument("--labels", required=True, type=Path, help="directory of label maps")
    p.add_argument("--catalog", required=True, help="catalog file or built-in name")
    p.add_argument("--min-pixels", type=_positive, default=1)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threads", type=_positive, default=1)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pseudomask", help="cosine-argmax pseudo-masks from stored features")
    p.add_argument("--features", required=True, type=Path, help="feature root directory")
    p.add_argument("--text", required=True, type=Path, help="text embeddings (DTN1)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--allowed-from-labels", type=Path, help="label maps used for filtering")
    p.add_argument("--catalog", help="catalog file or built-in name to check against")
    p.add_argument("--stride", type=_positive, default=16)
    p.add_argument("--min-pixels", type=_positive, default=1)
    p.add_argument("--threads", type=_positive, default=1)
    p.set_defaults(func=cmd_pseudomask)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", required=True, type=_seed)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--local-views", type=_positive, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", required=True, type=_seed)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threads", type=_positive, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mIoU of predictions or a checkpoint")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--pred", type=Path, help="directory of predicted label maps")
    source.add_argument("--checkpoint", type=Path, help="checkpoint directory")
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--catalog", required=True, help="catalog file or built-in name")
    p.add_argument("--config", type=Path, help="run config (with --checkpoint)")
    p.add_argument("--seed", type=_seed)
    p.add_argument("--out", type=Path)
    p.add_argument("--threads", type=_positive, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-curves", help="window-averaged loss, area and weight curves")
    p.add_argument("--telemetry", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--window", type=_positive)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=_seed, help="seed of the run the telemetry came from")
    p.set_defaults(func=cmd_export_curves)

    p = sub.add_parser("ablate", help="ablations and sweeps on synthetic data")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", required=True, type=_seed)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument(
        "--sweep", choices=("arms", "weight", "resize"), default="arms",
        help="view/loss arms, fixed inconsistent-region weights, or local resize ranges",
    )
    p.add_argument("--arms", default=",".join(ARMS))
    p.add_argument("--seeds", type=_positive, default=1, help="number of consecutive seeds")
    p.add_argument("--threads", type=_positive, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def dispatch(argv: Sequence[str]) -> int:
    """Parse *argv*, run the command, and map errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    configure_logging(args.verbose, args.quiet)
    run = _Run(command=args.command, argv=list(argv))
    try:
        return int(args.func(args, run))
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataImportError, ExportError, ProviderError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main(argv: Sequence[str] | None = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
