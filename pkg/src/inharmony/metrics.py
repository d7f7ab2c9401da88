"""Pixel-level AP / F1 / IoU and their dataset aggregation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

N_LEVELS = 256


def _as_arrays(pred_prob, gt):
    pred = np.asarray(pred_prob, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.size} pixels but ground truth has {gt.size}")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("ground truth must be binary")
    return pred, gt.astype(bool)


def quantize(pred_prob) -> np.ndarray:
    """8-bit level of every probability; level ``k`` passes threshold ``k / 255``."""
    return np.clip(np.rint(np.asarray(pred_prob, dtype=np.float64) * 255), 0, 255).astype(np.int64)


def _pr_curve(levels, gt):
    # counts of positives / all pixels at each level, then cumulative from the top level down
    pos = np.bincount(levels[gt], minlength=N_LEVELS)[::-1].cumsum()
    tot = np.bincount(levels, minlength=N_LEVELS)[::-1].cumsum()
    n_gt = int(gt.sum())
    recall = pos / n_gt
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tot > 0, pos / np.maximum(tot, 1), 1.0)
    return precision, recall


def _interpolated_ap(precision, recall):
    # thresholds run from k = 255 down to 0, so recall is non-decreasing
    rect = np.maximum.accumulate(precision[::-1])[::-1]
    delta = np.diff(recall, prepend=0.0)
    # summing only the recall steps keeps the result bit-identical under any
    # increasing remapping of the levels, which only inserts or removes empty steps
    step = delta > 0
    return float(np.sum(delta[step] * rect[step]))


def average_precision(pred_prob, gt) -> float:
    """Interpolated AP over the 256 thresholds ``k / 255``.

    Raises ``ValueError`` when ``gt`` has no positive pixel (AP undefined).
    """
    pred, gt = _as_arrays(pred_prob, gt)
    if not gt.any():
        raise ValueError("average precision is undefined for an empty ground-truth mask")
    precision, recall = _pr_curve(quantize(pred), gt)
    return _interpolated_ap(precision, recall)


def pooled_average_precision(preds, gts) -> float:
    """AP over the pixels of all images at once instead of per image."""
    pred = np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in preds])
    gt = np.concatenate([np.asarray(g).reshape(-1) for g in gts])
    return average_precision(pred, gt)


def f1_iou(pred_prob, gt, threshold: float = 0.5) -> tuple[float, float]:
    """F1 and IoU of ``pred_prob >= threshold``; both are 1 when prediction and truth are empty."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pred, gt = _as_arrays(pred_prob, gt)
    binary = pred >= threshold
    tp = int(np.sum(binary & gt))
    fp = int(np.sum(binary & ~gt))
    fn = int(np.sum(~binary & gt))
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


@dataclass
class MetricsReport:
    ap: float
    f1: float
    iou: float
    n_images: int
    n_ap_skipped: int = 0
    per_image: list[tuple[float | None, float, float]] | None = field(default=None, repr=False)
    pooled_ap: float | None = None

    def rows(self) -> list[tuple[str, float]]:
        rows = [("ap", self.ap), ("f1", self.f1), ("iou", self.iou),
                ("n_images", self.n_images), ("n_ap_skipped", self.n_ap_skipped)]
        if self.pooled_ap is not None:
            rows.append(("pooled_ap", self.pooled_ap))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in self.rows():
            writer.writerow([name, repr(value) if isinstance(value, float) else value])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'metric':<14}{'value':>12}", "-" * 26]
        for name, value in self.rows():
            text = f"{value:.6f}" if isinstance(value, float) else str(value)
            lines.append(f"{name:<14}{text:>12}")
        return "\n".join(lines) + "\n"


def image_metrics(pred_prob, gt, threshold: float = 0.5):
    """``(ap or None, f1, iou)`` for one image; AP is None when ``gt`` is empty."""
    ap = average_precision(pred_prob, gt) if np.any(np.asarray(gt)) else None
    f1, iou = f1_iou(pred_prob, gt, threshold)
    return ap, f1, iou


def aggregate(per_image) -> MetricsReport:
    """Unweighted means; images whose AP is ``None`` are left out of the AP mean only."""
    per_image = list(per_image)
    if not per_image:
        raise ValueError("no images to aggregate")
    aps = [p[0] for p in per_image if p[0] is not None]
    return MetricsReport(
        ap=float(np.mean(aps)) if aps else float("nan"),
        f1=float(np.mean([p[1] for p in per_image])),
        iou=float(np.mean([p[2] for p in per_image])),
        n_images=len(per_image),
        n_ap_skipped=len(per_image) - len(aps),
        per_image=per_image,
    )
