"""Writers for label maps, DTN1 tensors, catalogs, CSV tables and manifests."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from collections.abc import Iterable, Sequence
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from carbseg.exceptions import ExportError, ValidationError
from carbseg.importer import TENSOR_MAGIC
from carbseg.models import ClassCatalog, LabelMap, RunManifest

logger = logging.getLogger(__name__)


def write_atomic(path: str | Path, data: bytes) -> Path:
    """Write *data* to a sibling temp file, then rename it over *path*."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
    except OSError as e:
        raise ExportError(f"cannot write {path}: {e}") from e
    return path


def encode_tensor(arr: np.ndarray) -> bytes:
    """DTN1 bytes for a 2-D or 3-D float array (2-D gets depth 1)."""
    data = np.asarray(arr)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise ValidationError(f"tensor must be 2-D or 3-D, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValidationError("refusing to write non-finite tensor values")
    rows, cols, depth = data.shape
    header = TENSOR_MAGIC + np.array([rows, cols, depth], dtype="<u4").tobytes()
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def write_tensor(path: str | Path, arr: np.ndarray) -> Path:
    return write_atomic(path, encode_tensor(arr))


def encode_pgm(m: LabelMap) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(m.data, dtype=np.uint8)).save(buf, format="PPM")
    return buf.getvalue()


def write_label_map(path: str | Path, m: LabelMap) -> Path:
    """Write a label map; ``.dtn1`` suffix selects DTN1, anything else binary PGM."""
    path = Path(path)
    if path.suffix.lower() == ".dtn1":
        return write_atomic(path, encode_tensor(m.data.astype(np.float32)))
    return write_atomic(path, encode_pgm(m))


def format_catalog(catalog: ClassCatalog) -> str:
    lines = [
        f"{i}\t{name}\t{prompt}\t{r},{g},{b}"
        for i, (name, prompt, (r, g, b)) in enumerate(
            zip(catalog.names, catalog.prompt_names, catalog.palette)
        )
    ]
    return "\n".join(lines) + "\n"


def write_catalog(path: str | Path, catalog: ClassCatalog) -> Path:
    return write_atomic(path, format_catalog(catalog).encode("utf-8"))


def write_key_values(path: str | Path, values: dict[str, Any]) -> Path:
    text = "".join(f"{k} = {v}\n" for k, v in values.items())
    return write_atomic(path, text.encode("utf-8"))


def write_csv(
    path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]
) -> Path:
    """Write a CSV table with ``\\n`` line endings (byte-stable across platforms)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path = write_atomic(path, buf.getvalue().encode("utf-8"))
    logger.debug("wrote %s", path)
    return path


def write_checkpoint(
    directory: str | Path,
    weights: np.ndarray,
    bias: np.ndarray | None,
    *,
    temperature: float,
    iteration: int,
    seed: int | None = None,
) -> Path:
    """Write ``weights.dtn1`` (C, 1, D), ``bias.dtn1`` (C, 1, 1) and ``meta.txt``.

    *seed* is the training seed; synthetic scenes are rebuilt from it at evaluation.
    """
    directory = Path(directory)
    class_count, dim = weights.shape
    write_tensor(directory / "weights.dtn1", weights[:, None, :])
    if bias is not None:
        write_tensor(directory / "bias.dtn1", bias[:, None, None])
    meta: dict[str, Any] = {
        "class_count": class_count,
        "dim": dim,
        "temperature": repr(float(temperature)),
        "iteration": iteration,
    }
    if seed is not None:
        meta["seed"] = seed
    write_key_values(directory / "meta.txt", meta)
    logger.info("checkpoint written to %s", directory)
    return directory


def write_manifest(path: str | Path, manifest: RunManifest) -> Path:
    payload = asdict(manifest)
    payload["argv"] = list(manifest.argv)
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    return write_atomic(path, text.encode("utf-8"))
