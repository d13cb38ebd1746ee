"""Dice, IoU and HD95 plus per-task / mean aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class TaskReport:
    task_id: int
    dice: float  # percent
    iou: float  # percent
    hd95: float  # pixels; nan when every pair was excluded
    n_samples: int
    hd95_excluded: int = 0


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def iou_score(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels 4-adjacent to background or to the image border."""
    padded = np.pad(mask.astype(bool), 1, constant_values=False)
    core = padded[1:-1, 1:-1]
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return core & ~interior


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(math.ceil(q / 100.0 * v.size), 1)
    return float(v[k - 1])


def hd95(pred, gt) -> float:
    """95th-percentile symmetric boundary distance (nearest rank); nan if a mask is empty."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return float("nan")
    bp, bg = boundary(p), boundary(g)
    # exact Euclidean distance from every pixel to the nearest boundary pixel of the other set
    to_g = ndimage.distance_transform_edt(~bg)
    to_p = ndimage.distance_transform_edt(~bp)
    return max(nearest_rank(to_g[bp]), nearest_rank(to_p[bg]))


def aggregate(per_sample: dict[int, list[tuple[float, float, float]]]) -> tuple[list[TaskReport], float, float]:
    """Average (dice, iou, hd95) rows within each task, then unweighted across tasks."""
    reports = []
    for tid in sorted(per_sample):
        rows = per_sample[tid]
        d = [r[0] for r in rows]
        j = [r[1] for r in rows]
        h = [r[2] for r in rows if not math.isnan(r[2])]
        reports.append(
            TaskReport(
                task_id=tid,
                dice=100.0 * float(np.mean(d)),
                iou=100.0 * float(np.mean(j)),
                hd95=float(np.mean(h)) if h else float("nan"),
                n_samples=len(rows),
                hd95_excluded=len(rows) - len(h),
            )
        )
    m_dice = float(np.mean([r.dice for r in reports]))
    m_iou = float(np.mean([r.iou for r in reports]))
    return reports, m_dice, m_iou


REPORT_FIELDS = ["task", "dice", "iou", "hd95", "n_samples", "hd95_excluded"]


def report_rows(reports: list[TaskReport], m_dice: float, m_iou: float) -> list[dict]:
    rows = [
        {
            "task": r.task_id,
            "dice": f"{r.dice:.4f}",
            "iou": f"{r.iou:.4f}",
            "hd95": f"{r.hd95:.4f}",
            "n_samples": r.n_samples,
            "hd95_excluded": r.hd95_excluded,
        }
        for r in reports
    ]
    hd = [r.hd95 for r in reports if not math.isnan(r.hd95)]
    rows.append(
        {
            "task": "mean",
            "dice": f"{m_dice:.4f}",
            "iou": f"{m_iou:.4f}",
            "hd95": f"{np.mean(hd):.4f}" if hd else "nan",
            "n_samples": sum(r.n_samples for r in reports),
            "hd95_excluded": sum(r.hd95_excluded for r in reports),
        }
    )
    return rows


def format_csv(reports, m_dice, m_iou) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(report_rows(reports, m_dice, m_iou))
    return buf.getvalue()


def format_table(reports, m_dice, m_iou, names: dict[int, str] | None = None) -> str:
    names = names or {}
    lines = [f"{'task':<18}{'Dice%':>9}{'IoU%':>9}{'HD95':>9}{'n':>6}"]
    for r in reports:
        label = names.get(r.task_id, str(r.task_id))
        lines.append(f"{label:<18}{r.dice:>9.2f}{r.iou:>9.2f}{r.hd95:>9.2f}{r.n_samples:>6}")
    lines.append(f"{'mDice / mIoU':<18}{m_dice:>9.2f}{m_iou:>9.2f}")
    return "\n".join(lines)
