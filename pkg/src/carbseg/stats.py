"""Dataset diagnostics: classes per image, class co-occurrence, positives/negatives."""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from carbseg import exporter
from carbseg.exceptions import ValidationError
from carbseg.models import IGNORE_INDEX, ClassCatalog, DatasetStats, ImageLabelSet, LabelMap

logger = logging.getLogger(__name__)

HIST_FILE = "classes_per_image.csv"
COOCCURRENCE_FILE = "cooccurrence.csv"
POSNEG_FILE = "positives_negatives.csv"


def image_label_set(m: LabelMap, min_pixels: int = 1, image_id: str = "") -> ImageLabelSet:
    """Classes occupying at least *min_pixels* non-ignored pixels of *m*."""
    if min_pixels < 1:
        raise ValidationError(f"min_pixels must be >= 1, got {min_pixels}")
    values = m.data[m.data != IGNORE_INDEX]
    counts = np.bincount(values.astype(np.int64), minlength=1)
    present = frozenset(int(c) for c in np.flatnonzero(counts >= min_pixels))
    if not present:
        logger.warning("image %r has no labeled class (all pixels ignored or below threshold)",
                       image_id)
    return ImageLabelSet(image_id=image_id, present=present)


def image_label_sets(
    maps: Sequence[tuple[str, LabelMap]], min_pixels: int = 1, *, threads: int = 1
) -> list[ImageLabelSet]:
    """Label sets for many images, data-parallel, in input order."""
    def one(item: tuple[str, LabelMap]) -> ImageLabelSet:
        return image_label_set(item[1], min_pixels, item[0])

    if threads <= 1:
        return [one(item) for item in maps]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, maps))


def compute_stats(sets: Sequence[ImageLabelSet], class_count: int) -> DatasetStats:
    """Reduce image label sets to the three dataset diagnostics.

    ``cooccurrence[a][b]`` is the fraction of images containing ``a`` that
    also contain ``b``; rows of classes that never occur are zero.
    """
    if not sets:
        raise ValidationError("compute_stats needs at least one image label set")
    presence = np.zeros((len(sets), class_count), dtype=np.int64)
    for row, label_set in enumerate(sets):
        for c in label_set.present:
            if not 0 <= c < class_count:
                raise ValidationError(
                    f"image {label_set.image_id!r}: class {c} outside 0..{class_count - 1}"
                )
            presence[row, c] = 1
    pairs = presence.T @ presence
    positives = presence.sum(axis=0)
    # rows of absent classes have zero pair counts, so they stay zero
    cooccurrence = pairs / np.maximum(positives[:, None], 1)
    hist = Counter(len(s.present) for s in sets)
    return DatasetStats(
        image_count=len(sets),
        classes_per_image_hist=dict(sorted(hist.items())),
        cooccurrence=cooccurrence.astype(np.float64),
        positives=positives,
        negatives=len(sets) - positives,
    )


def _name(catalog: ClassCatalog | None, index: int) -> str:
    return catalog.names[index] if catalog is not None else str(index)


def emit_stats_csv(
    stats: DatasetStats, out_dir: str | Path, catalog: ClassCatalog | None = None
) -> list[Path]:
    """Write the three diagnostic tables into *out_dir*.

    - ``classes_per_image.csv``: ``class_count,image_count``
    - ``cooccurrence.csv``: ``class,<name 0>,...`` with 6-decimal ratios
    - ``positives_negatives.csv``: ``class_index,class,positives,negatives``
    """
    out_dir = Path(out_dir)
    names = [_name(catalog, c) for c in range(stats.class_count)]
    written = [
        exporter.write_csv(
            out_dir / HIST_FILE,
            ["class_count", "image_count"],
            sorted(stats.classes_per_image_hist.items()),
        ),
        exporter.write_csv(
            out_dir / COOCCURRENCE_FILE,
            ["class", *names],
            (
                [names[a], *(f"{v:.6f}" for v in stats.cooccurrence[a])]
                for a in range(stats.class_count)
            ),
        ),
        exporter.write_csv(
            out_dir / POSNEG_FILE,
            ["class_index", "class", "positives", "negatives"],
            (
                [c, names[c], int(stats.positives[c]), int(stats.negatives[c])]
                for c in range(stats.class_count)
            ),
        ),
    ]
    logger.info("dataset statistics for %d images written to %s", stats.image_count, out_dir)
    return written
