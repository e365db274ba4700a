"""Evaluation metrics and dataset-level reports.

Detection quality is summarized as average precision over image scores.
Localization quality (MCC, F1, IoU against ground-truth masks) is averaged
over the spliced images only, since authentic images have empty masks.
Thresholds are fixed once per dataset and echoed into every report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .consistency import ResponseMap
from .decision import BinaryMask, Thresholds, localize, score_response
from .errors import DataError
from .imagedata import DatasetManifest, load_mask


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the step-interpolated precision-recall curve.

    The threshold sweeps descending score values; tied scores are absorbed
    in a single step so the result does not depend on tie order.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    positives = int(y.sum())
    if positives == 0:
        raise DataError("average precision is undefined without positive labels")

    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ap, tp, fp, prev_recall = 0.0, 0, 0, 0.0
    i, n = 0, len(s)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        recall = tp / positives
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
        i = j
    return ap


def mcc(counts: ConfusionCounts) -> float:
    """Matthews correlation coefficient; 0 when any marginal is empty."""
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def f1_iou(pred: BinaryMask, gt: BinaryMask) -> tuple[float, float, ConfusionCounts]:
    """F1 and IoU of a predicted mask against ground truth.

    Both metrics are 1 when prediction and truth are both empty and 0 when
    a zero denominator arises any other way.
    """
    p, g = pred.values, gt.values
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    counts = ConfusionCounts(tp, tn, fp, fn)
    if tp + fp + fn == 0:
        return 1.0, 1.0, counts  # both masks empty: perfect agreement
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    iou = tp / (tp + fp + fn)
    return f1, iou, counts


@dataclass
class ImageRow:
    image_id: str
    label: str
    score: float
    inverted: bool
    verdict: str
    mcc: float | None = None
    f1: float | None = None
    iou: float | None = None

    def csv_row(self) -> str:
        def opt(x: float | None) -> str:
            return "" if x is None else f"{x:.6f}"

        return (
            f"{self.image_id},{self.label},{self.score:.6f},{int(self.inverted)},"
            f"{self.verdict},{opt(self.mcc)},{opt(self.f1)},{opt(self.iou)}"
        )


@dataclass
class MetricsReport:
    ap: float
    mean_mcc: float
    mean_f1: float
    mean_iou: float
    thresholds: Thresholds
    detection_method: str
    rows: list[ImageRow] = field(default_factory=list)

    def header(self) -> str:
        t = self.thresholds
        return (
            f"# method={self.detection_method},delta_b={t.delta_b:g},"
            f"delta_l={t.localization_threshold:g},rho_threshold={t.rho_threshold:g}"
        )

    def to_csv(self) -> str:
        lines = [self.header(), "image_id,label,score,inverted,verdict,mcc,f1,iou"]
        lines += [r.csv_row() for r in self.rows]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        spliced = sum(1 for r in self.rows if r.label == "spliced")
        return "\n".join(
            [
                f"images evaluated: {len(self.rows)} ({spliced} spliced)",
                f"detection method: {self.detection_method}",
                f"detection AP: {self.ap:.4f}",
                f"mean MCC (spliced only): {self.mean_mcc:.4f}",
                f"mean F1 (spliced only): {self.mean_f1:.4f}",
                f"mean IoU (spliced only): {self.mean_iou:.4f}",
                f"thresholds: delta_b={self.thresholds.delta_b:g} "
                f"delta_l={self.thresholds.localization_threshold:g} "
                f"rho_threshold={self.thresholds.rho_threshold:g}",
            ]
        )

    def write_csv(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())


def evaluate_dataset(
    manifest: DatasetManifest,
    responses: Mapping[str, ResponseMap],
    thresholds: Thresholds,
    detection_method: str = "spavg",
) -> MetricsReport:
    """Score every manifest image and aggregate detection + localization.

    Every entry must have a response; every spliced entry must have a
    ground-truth mask of matching shape. Entries are processed in image-id
    order so the report does not depend on manifest row order.
    """
    entries = sorted(manifest.entries, key=lambda e: e.image_id)
    missing = [e.image_id for e in entries if e.image_id not in responses]
    if missing:
        raise DataError(f"missing responses for: {', '.join(missing)}")

    rows: list[ImageRow] = []
    scores: list[float] = []
    labels: list[int] = []
    for entry in entries:
        response = responses[entry.image_id]
        result = score_response(response, detection_method, thresholds)
        verdict = "spliced" if result.verdict(thresholds.rho_threshold) else "authentic"
        row = ImageRow(entry.image_id, entry.label, result.score, result.inverted, verdict)
        if entry.label == "spliced":
            if entry.mask_path is None:
                raise DataError(f"spliced image {entry.image_id!r} has no mask path")
            gt = load_mask(entry.mask_path, expect_shape=response.shape)
            pred = localize(response, thresholds)
            row.f1, row.iou, counts = f1_iou(pred, BinaryMask(entry.image_id, gt))
            row.mcc = mcc(counts)
        rows.append(row)
        scores.append(result.score)
        labels.append(1 if entry.label == "spliced" else 0)

    ap = average_precision(scores, labels)
    spliced_rows = [r for r in rows if r.label == "spliced"]
    return MetricsReport(
        ap=ap,
        mean_mcc=float(np.mean([r.mcc for r in spliced_rows])),
        mean_f1=float(np.mean([r.f1 for r in spliced_rows])),
        mean_iou=float(np.mean([r.iou for r in spliced_rows])),
        thresholds=thresholds,
        detection_method=detection_method,
        rows=rows,
    )
