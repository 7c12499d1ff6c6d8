"""Readers for label maps, DTN1 tensors, class catalogs and checkpoints."""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, UnidentifiedImageError

from carbseg.exceptions import ConfigError, FormatError, ValidationError
from carbseg.models import (
    IGNORE_INDEX,
    PROBABILITY_TOLERANCE,
    ClassCatalog,
    FeatureMap,
    LabelMap,
    ProbabilityMap,
    TextEmbeddingSet,
)

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"DTN1"
_HEADER = struct.Struct("<4s3I")
LABEL_SUFFIXES = (".pgm", ".dtn1")


def _require_file(path: str | Path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"File not found: {path}")
    return path


# ---------------------------------------------------------------------------
# DTN1 tensors
# ---------------------------------------------------------------------------

def parse_tensor(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode DTN1 bytes into a read-only float32 (rows, cols, depth) array."""
    if len(raw) < _HEADER.size:
        raise FormatError(f"{source}: truncated DTN1 header ({len(raw)} bytes)")
    magic, rows, cols, depth = _HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    expected = rows * cols * depth * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(
            f"{source}: payload length mismatch, header ({rows}, {cols}, {depth}) "
            f"needs {expected} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(rows, cols, depth)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{source}: non-finite values in payload")
    data.setflags(write=False)
    return data


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a DTN1 file: magic, three u32 LE dims, then f32 LE values (depth fastest)."""
    path = _require_file(path)
    return parse_tensor(path.read_bytes(), str(path))


def read_feature_map(path: str | Path) -> FeatureMap:
    return FeatureMap(read_tensor(path))


def read_text_embeddings(path: str | Path) -> TextEmbeddingSet:
    """Read a C×D embedding set stored as a (C, 1, D) tensor."""
    data = read_tensor(path)
    if data.shape[1] == 1:
        rows = data[:, 0, :]
    elif data.shape[0] == 1:
        rows = data[0]
    else:
        raise FormatError(f"{path}: text embeddings must be (C, 1, D), got {data.shape}")
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    zero = np.flatnonzero(norms <= 0.0)
    if zero.size:
        raise ValidationError(f"{path}: text embedding row {int(zero[0])} has zero norm")
    return TextEmbeddingSet(rows)


def read_probability_map(
    path: str | Path, *, tolerance: float = PROBABILITY_TOLERANCE
) -> ProbabilityMap:
    """Read an H×W×C distribution map; rows within *tolerance* of 1 are renormalized."""
    data = read_tensor(path)
    if np.any(data < 0.0) or np.any(data > 1.0):
        raise ValidationError(f"{path}: probabilities outside [0, 1]")
    sums = data.astype(np.float64).sum(axis=2)
    if np.any(np.abs(sums - 1.0) > tolerance):
        raise ValidationError(f"{path}: per-pixel probabilities do not sum to 1")
    return ProbabilityMap(data.astype(np.float64) / sums[..., None])


# ---------------------------------------------------------------------------
# Label maps
# ---------------------------------------------------------------------------

def check_labels(m: LabelMap, class_count: int, source: str = "<label map>") -> LabelMap:
    """Raise ValidationError naming the first pixel outside the label space."""
    bad = (m.data >= class_count) & (m.data != IGNORE_INDEX)
    if np.any(bad):
        y, x = (int(v) for v in np.argwhere(bad)[0])
        raise ValidationError(
            f"{source}: pixel (x={x}, y={y}) has value {int(m.data[y, x])}, "
            f"outside 0..{class_count - 1} and not the ignore index {IGNORE_INDEX}"
        )
    return m


def _read_pgm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.format != "PPM" or img.mode != "L":
                raise FormatError(
                    f"{path}: expected an 8-bit graymap, got {img.format} mode {img.mode}"
                )
            return np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, SyntaxError, ValueError, OSError) as e:
        raise FormatError(f"{path}: malformed graymap header: {e}") from e


def _labels_from_tensor(data: np.ndarray, path: Path) -> np.ndarray:
    if data.shape[2] != 1:
        raise FormatError(f"{path}: label tensor must have depth 1, got {data.shape[2]}")
    values = data[:, :, 0]
    if np.any(values != np.round(values)) or np.any(values < 0) or np.any(values > 255):
        raise FormatError(f"{path}: label tensor holds non-integral or out-of-byte values")
    return values.astype(np.uint8)


def read_label_map(
    path: str | Path,
    class_count: int | ClassCatalog | None = None,
) -> LabelMap:
    """Read a binary PGM (P5, maxval 255) or a depth-1 DTN1 label map."""
    path = _require_file(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == TENSOR_MAGIC:
        data = _labels_from_tensor(read_tensor(path), path)
    elif head[:2] == b"P5":
        data = _read_pgm(path)
    else:
        raise FormatError(f"{path}: not a binary graymap (P5) or DTN1 file")
    m = LabelMap(data)
    if isinstance(class_count, ClassCatalog):
        class_count = class_count.class_count
    if class_count is not None:
        check_labels(m, class_count, str(path))
    return m


def list_label_files(directory: str | Path) -> list[tuple[str, Path]]:
    """Return ``(image_id, path)`` for every label map in *directory*, sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Directory not found: {directory}")
    found = [
        (p.stem, p) for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in LABEL_SUFFIXES
    ]
    found.sort(key=lambda item: item[0])
    ids = [i for i, _ in found]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{directory}: duplicate image ids across label formats")
    return found


def read_label_dir(
    directory: str | Path, class_count: int | None = None
) -> list[tuple[str, LabelMap]]:
    maps = [
        (image_id, read_label_map(path, class_count))
        for image_id, path in list_label_files(directory)
    ]
    logger.debug("read %d label maps from %s", len(maps), directory)
    return maps


# ---------------------------------------------------------------------------
# Catalogs and checkpoints
# ---------------------------------------------------------------------------

def parse_catalog(text: str, source: str = "<catalog>") -> ClassCatalog:
    """Parse ``index<TAB>name<TAB>prompt_name<TAB>R,G,B`` lines."""
    names: list[str] = []
    prompts: list[str] = []
    palette: list[tuple[int, int, int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{source}:{lineno}: expected 4 tab-separated fields")
        try:
            index = int(parts[0])
            rgb = tuple(int(v) for v in parts[3].split(","))
        except ValueError as e:
            raise FormatError(f"{source}:{lineno}: {e}") from e
        if index != len(names):
            raise FormatError(f"{source}:{lineno}: expected index {len(names)}, got {index}")
        if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
            raise FormatError(f"{source}:{lineno}: colour must be three bytes")
        name, prompt = parts[1].strip(), parts[2].strip()
        if not name or not prompt:
            raise ValidationError(f"{source}:{lineno}: empty class name")
        if name in names:
            raise ValidationError(f"{source}:{lineno}: duplicate class name {name!r}")
        names.append(name)
        prompts.append(prompt)
        palette.append((rgb[0], rgb[1], rgb[2]))
    if not names:
        raise FormatError(f"{source}: catalog has no classes")
    if len(names) >= IGNORE_INDEX:
        raise ValidationError(f"{source}: {len(names)} classes collide with the ignore index")
    return ClassCatalog(names=tuple(names), prompt_names=tuple(prompts), palette=tuple(palette))


def read_catalog(path: str | Path) -> ClassCatalog:
    path = _require_file(path)
    return parse_catalog(path.read_text(encoding="utf-8"), str(path))


def read_key_values(path: str | Path) -> dict[str, str]:
    """Read ``key=value`` lines (``#`` comments) without type conversion."""
    path = _require_file(path)
    values: dict[str, str] = {}
    seen_at: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen_at:
            raise ConfigError(
                f"{path}:{lineno}: key {key!r} already set on line {seen_at[key]}"
            )
        seen_at[key] = lineno
        values[key] = value
    return values


def read_checkpoint(directory: str | Path) -> dict[str, Any]:
    """Read ``weights.dtn1``, ``bias.dtn1`` and ``meta.txt`` from a checkpoint directory."""
    directory = Path(directory)
    meta = read_key_values(directory / "meta.txt")
    weights = read_tensor(directory / "weights.dtn1")
    bias_path = directory / "bias.dtn1"
    bias = read_tensor(bias_path)[:, 0, 0] if bias_path.exists() else None
    try:
        class_count = int(meta["class_count"])
        dim = int(meta["dim"])
        temperature = float(meta["temperature"])
        iteration = int(meta.get("iteration", "0"))
        seed = int(meta["seed"]) if "seed" in meta else None
    except (KeyError, ValueError) as e:
        raise FormatError(f"{directory}/meta.txt: incomplete checkpoint metadata: {e}") from e
    if weights.shape != (class_count, 1, dim):
        raise FormatError(
            f"{directory}: weights shape {weights.shape} disagrees with meta "
            f"({class_count}, 1, {dim})"
        )
    return {
        "weights": weights[:, 0, :],
        "bias": bias,
        "temperature": temperature,
        "iteration": iteration,
        "seed": seed,
    }
