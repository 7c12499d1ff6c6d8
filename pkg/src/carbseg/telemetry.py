"""Per-iteration training telemetry: CSV records, queries and curve export."""

from __future__ import annotations

import csv
import io
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from carbseg import exporter
from carbseg.exceptions import FormatError, ValidationError
from carbseg.models import TelemetryRecord

logger = logging.getLogger(__name__)

TELEMETRY_HEADER = (
    "iter", "stage", "loss_total", "loss_c", "loss_i", "w", "n_c", "n_i", "train_miou_every_100",
)
LOSS_CURVE_FILE = "loss_curve.csv"
AREA_CURVE_FILE = "area_curve.csv"
WEIGHT_CURVE_FILE = "weight_curve.csv"
DEFAULT_WINDOW = 50


def format_float(value: float) -> str:
    return "%.10g" % value


def record_row(rec: TelemetryRecord) -> list[str]:
    return [
        str(rec.iteration),
        str(rec.stage),
        format_float(rec.loss_total),
        format_float(rec.loss_c),
        format_float(rec.loss_i),
        format_float(rec.w),
        str(rec.n_c),
        str(rec.n_i),
        "" if rec.train_miou is None else format_float(rec.train_miou),
    ]


def format_telemetry(records: Iterable[TelemetryRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TELEMETRY_HEADER)
    writer.writerows(record_row(r) for r in records)
    return buf.getvalue()


def write_telemetry(path: str | Path, records: Sequence[TelemetryRecord]) -> Path:
    """Write the telemetry CSV atomically."""
    path = exporter.write_atomic(path, format_telemetry(records).encode("utf-8"))
    logger.info("telemetry with %d rows written to %s", len(records), path)
    return path


def parse_telemetry(text: str, source: str = "<telemetry>") -> list[TelemetryRecord]:
    """Parse telemetry CSV text; a malformed row raises FormatError with its line number."""
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None or tuple(header) != TELEMETRY_HEADER:
        raise FormatError(f"{source}:1: expected header {','.join(TELEMETRY_HEADER)}")
    records: list[TelemetryRecord] = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(TELEMETRY_HEADER):
            raise FormatError(
                f"{source}:{lineno}: expected {len(TELEMETRY_HEADER)} fields, got {len(row)}"
            )
        try:
            records.append(TelemetryRecord(
                iteration=int(row[0]),
                stage=int(row[1]),
                loss_total=float(row[2]),
                loss_c=float(row[3]),
                loss_i=float(row[4]),
                w=float(row[5]),
                n_c=int(row[6]),
                n_i=int(row[7]),
                train_miou=float(row[8]) if row[8] else None,
            ))
        except ValueError as e:
            raise FormatError(f"{source}:{lineno}: {e}") from e
    return records


def read_telemetry(path: str | Path) -> list[TelemetryRecord]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"File not found: {path}")
    return parse_telemetry(path.read_text(encoding="utf-8"), str(path))


def query_telemetry(
    records: Iterable[TelemetryRecord],
    *,
    stage: int | None = None,
    since: int | None = None,
    until: int | None = None,
) -> list[TelemetryRecord]:
    """Filter records by stage and iteration range (inclusive)."""
    out = []
    for rec in records:
        if stage is not None and rec.stage != stage:
            continue
        if since is not None and rec.iteration < since:
            continue
        if until is not None and rec.iteration > until:
            continue
        out.append(rec)
    return out


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing mean over the last *window* values (fewer at the start)."""
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        return data
    return np.array([data[max(0, k - window + 1):k + 1].mean() for k in range(data.size)])


def export_curves(
    records: Sequence[TelemetryRecord] | str | Path,
    out_dir: str | Path,
    window: int = DEFAULT_WINDOW,
) -> list[Path]:
    """Write window-averaged loss, area and weight curves.

    - ``loss_curve.csv``: ``iter,loss_c,loss_i``
    - ``area_curve.csv``: ``iter,n_c,n_i``
    - ``weight_curve.csv``: ``iter,w``
    """
    if isinstance(records, (str, Path)):
        records = read_telemetry(records)
    if not records:
        raise ValidationError("telemetry has no rows")
    out_dir = Path(out_dir)
    iters = [r.iteration for r in records]

    def column(name: str) -> np.ndarray:
        return moving_average([float(getattr(r, name)) for r in records], window)

    def rows(*series: np.ndarray) -> list[list[str]]:
        return [[str(it), *(format_float(s[k]) for s in series)] for k, it in enumerate(iters)]

    written = [
        exporter.write_csv(out_dir / LOSS_CURVE_FILE, ["iter", "loss_c", "loss_i"],
                           rows(column("loss_c"), column("loss_i"))),
        exporter.write_csv(out_dir / AREA_CURVE_FILE, ["iter", "n_c", "n_i"],
                           rows(column("n_c"), column("n_i"))),
        exporter.write_csv(out_dir / WEIGHT_CURVE_FILE, ["iter", "w"], rows(column("w"))),
    ]
    logger.info("curves over %d iterations (window %d) written to %s", len(iters), window, out_dir)
    return written
