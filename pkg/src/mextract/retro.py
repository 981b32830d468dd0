"""Longitudinal analysis of historical API responses.

Historical snapshots only kept the top-1 class and its confidence.  The
missing mass is spread uniformly over the other classes, which is the
maximum-entropy completion under those constraints.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InconsistentConfidence, NoOverlap, SchemaViolation

SNAPSHOT_HEADER = "# mextract-snapshot v1"
SNAPSHOT_COLUMNS = ("input_id", "year", "class", "confidence")


@dataclass(frozen=True)
class LongitudinalRecord:
    input_id: str
    year_tag: str
    top_class: int
    top_confidence: float


@dataclass(frozen=True)
class SnapshotDiff:
    overlap: float
    mean_abs_conf_delta: float
    mean_conf_a: float
    mean_conf_b: float
    n_intersection: int
    n_a: int
    n_b: int

    @property
    def coverage(self) -> float:
        """Share of the larger snapshot that both years have in common."""
        return self.n_intersection / max(self.n_a, self.n_b)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coverage"] = self.coverage
        return d


def impute_full_simplex(top_class: int, top_confidence: float, m: int) -> np.ndarray:
    if m < 2:
        raise ValueError("need at least two classes")
    if not 0 <= top_class < m:
        raise ValueError(f"class {top_class} outside [0, {m})")
    if top_confidence > 1.0 or top_confidence < 1.0 / m - 1e-12:
        raise InconsistentConfidence(
            f"top confidence {top_confidence} impossible as the maximum of {m} probabilities"
        )
    top_confidence = float(top_confidence)
    # min() guards the c ~ 1/m edge against rounding above the top class
    p = np.full(m, min((1.0 - top_confidence) / (m - 1), top_confidence))
    p[top_class] = top_confidence
    return p


def expand_binary_sentiment(label: int, confidence: float, m: int = 3) -> np.ndarray:
    """Lift a positive/negative top-1 answer onto an ``m``-class simplex.

    Used for sentiment APIs whose historical outputs are binary while the
    current label space has extra classes such as "mixed".
    """
    return impute_full_simplex(label, confidence, m)


def snapshot_diff(year_a: Iterable[LongitudinalRecord], year_b: Iterable[LongitudinalRecord]) -> SnapshotDiff:
    a = {r.input_id: r for r in year_a}
    b = {r.input_id: r for r in year_b}
    common = sorted(a.keys() & b.keys())
    if not common:
        raise NoOverlap("snapshots share no input ids")
    same = sum(a[k].top_class == b[k].top_class for k in common)
    deltas = [abs(a[k].top_confidence - b[k].top_confidence) for k in common]
    return SnapshotDiff(
        overlap=same / len(common),
        mean_abs_conf_delta=float(np.mean(deltas)),
        mean_conf_a=float(np.mean([a[k].top_confidence for k in common])),
        mean_conf_b=float(np.mean([b[k].top_confidence for k in common])),
        n_intersection=len(common),
        n_a=len(a),
        n_b=len(b),
    )


def ingest_snapshot(path: str | Path, num_classes: int | None = None) -> list[LongitudinalRecord]:
    """Read a snapshot CSV.

    The first line must be the version header, the second the column names
    ``input_id,year,class,confidence``.  Every malformed row is reported;
    the first one raises :class:`SchemaViolation` with its line number.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != SNAPSHOT_HEADER:
        raise SchemaViolation(f"missing header {SNAPSHOT_HEADER!r}", line=1)
    reader = csv.reader(lines[1:])
    try:
        columns = next(reader)
    except StopIteration:
        raise SchemaViolation("missing column row", line=2) from None
    if tuple(c.strip() for c in columns) != SNAPSHOT_COLUMNS:
        raise SchemaViolation(f"columns must be {','.join(SNAPSHOT_COLUMNS)}", line=2)

    records: list[LongitudinalRecord] = []
    seen: dict[tuple[str, str], int] = {}
    for offset, row in enumerate(reader):
        lineno = offset + 3
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise SchemaViolation(f"expected 4 fields, got {len(row)}", line=lineno)
        iid, year, cls, conf = (c.strip() for c in row)
        if not iid or not year:
            raise SchemaViolation("empty input_id or year", line=lineno)
        try:
            cls_i = int(cls)
            conf_f = float(conf)
        except ValueError:
            raise SchemaViolation(f"unparseable class/confidence {cls!r}/{conf!r}", line=lineno) from None
        if cls_i < 0 or (num_classes is not None and cls_i >= num_classes):
            raise SchemaViolation(f"class {cls_i} out of range", line=lineno)
        if not 0.0 <= conf_f <= 1.0:
            raise SchemaViolation(f"confidence {conf_f} outside [0, 1]", line=lineno)
        if num_classes is not None and conf_f < 1.0 / num_classes - 1e-12:
            raise SchemaViolation(f"confidence {conf_f} below 1/{num_classes}", line=lineno)
        key = (iid, year)
        if key in seen:
            raise SchemaViolation(f"duplicate key {key} (first at line {seen[key]})", line=lineno)
        seen[key] = lineno
        records.append(LongitudinalRecord(iid, year, cls_i, conf_f))
    return records


def write_snapshot(path: str | Path, records: Sequence[LongitudinalRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(SNAPSHOT_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SNAPSHOT_COLUMNS)
        for r in records:
            w.writerow([r.input_id, r.year_tag, r.top_class, repr(r.top_confidence)])


def diff_report(diff: SnapshotDiff, fidelity_delta: float | None = None) -> str:
    """JSON document with the four per-API longitudinal columns."""
    doc = {
        "predicted_class_overlap": diff.overlap,
        "avg_confidence_a": diff.mean_conf_a,
        "avg_confidence_b": diff.mean_conf_b,
        "mean_abs_confidence_delta": diff.mean_abs_conf_delta,
        "fidelity_delta": fidelity_delta,
        "counts": {"intersection": diff.n_intersection, "a": diff.n_a, "b": diff.n_b},
        "coverage": diff.coverage,
    }
    return json.dumps(doc, indent=2, sort_keys=True)
