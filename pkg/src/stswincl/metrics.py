"""Segmentation metrics and paired significance testing.

Two protocols are provided:

* frame protocol: per-frame IoU/Dice over the classes present in that frame's
  ground truth (background and ignore excluded), averaged over frames;
* dataset protocol: one confusion matrix over all pixels, giving PA, PAC and
  mIoU over the classes that occur in the ground truth.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .data import IGNORE

logger = logging.getLogger(__name__)


@dataclass
class FrameScore:
    frame_id: str
    iou: dict[int, float]
    dice: dict[int, float]
    miou: float
    mdice: float
    skipped: bool = False


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")


def frame_scores(pred: np.ndarray, gt: np.ndarray, background: int = 0, ignore: int = IGNORE,
                 frame_id: str = "") -> FrameScore:
    """IoU and Dice per present foreground class, plus their means.

    A frame whose ground truth holds no foreground class gets ``skipped=True``
    and NaN means.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_pair(pred, gt)
    valid = gt != ignore
    p, g = pred[valid], gt[valid]
    iou, dice = {}, {}
    for c in np.unique(g):
        c = int(c)
        if c == background:
            continue
        pc, gc = p == c, g == c
        tp = int(np.count_nonzero(pc & gc))
        fp = int(np.count_nonzero(pc & ~gc))
        fn = int(np.count_nonzero(~pc & gc))
        iou[c] = Fraction(tp, tp + fp + fn)
        dice[c] = Fraction(2 * tp, 2 * tp + fp + fn)
    if not iou:
        return FrameScore(frame_id, {}, {}, math.nan, math.nan, skipped=True)
    # exact rational means, rounded once
    miou = float(sum(iou.values()) / len(iou))
    mdice = float(sum(dice.values()) / len(dice))
    return FrameScore(frame_id, {c: float(v) for c, v in iou.items()},
                      {c: float(v) for c, v in dice.items()}, miou, mdice)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_ids: Iterable[int] = (IGNORE,)) -> np.ndarray:
    """``cm[g, p]`` pixel counts; pixels whose gt is in ``ignore_ids`` are dropped."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    _check_pair(pred, gt)
    keep = ~np.isin(gt, list(ignore_ids)) & (gt < num_classes)
    p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise ValueError("prediction holds class ids outside [0, num_classes)")
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


@dataclass
class DatasetScores:
    pa: float
    pac: float
    miou: float
    per_class_iou: dict[int, float]


def scores_from_confusion(cm: np.ndarray) -> DatasetScores:
    total = cm.sum()
    present = np.flatnonzero(cm.sum(axis=1) > 0)
    if total == 0 or present.size == 0:
        return DatasetScores(math.nan, math.nan, math.nan, {})
    tp = np.diag(cm).astype(np.float64)
    recall = tp[present] / cm.sum(axis=1)[present]
    union = cm.sum(axis=1) + cm.sum(axis=0) - np.diag(cm)
    iou = tp[present] / union[present]
    return DatasetScores(float(tp.sum() / total), float(recall.mean()), float(iou.mean()),
                         {int(c): float(v) for c, v in zip(present, iou)})


def dataset_scores(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], num_classes: int,
                   ignore_ids: Iterable[int] = (IGNORE,)) -> DatasetScores:
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth lists differ in length")
    ignore_ids = tuple(ignore_ids)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        cm += confusion_matrix(p, g, num_classes, ignore_ids)
    return scores_from_confusion(cm)


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass
class WilcoxonResult:
    statistic: float   # W+ (sum of ranks of positive differences)
    p_value: float
    n: int             # non-zero differences
    method: str        # "exact", "normal" or "degenerate"


EXACT_MAX_N = 25


def _exact_two_sided(doubled: np.ndarray, w2: int) -> float:
    """P-value from the exact sign-flip distribution of the doubled-rank sum."""
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts += shifted
    n_all = 2 ** len(doubled)
    lower = int(counts[: w2 + 1].sum())
    upper = int(counts[w2:].sum())
    p = 2 * min(lower, upper) / n_all
    return float(min(1.0, p))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], exact: bool | None = None) -> WilcoxonResult:
    """Two-sided paired test of ``a - b``; zero differences are dropped, ties get average ranks.

    ``exact=None`` uses the exact sign-flip distribution when at most
    ``EXACT_MAX_N`` differences are non-zero and the tie-corrected normal
    approximation otherwise.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("score lists must be 1-D and of equal length")
    if a.size < 6:
        raise ValueError(f"need at least 6 paired scores, got {a.size}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    use_exact = n <= EXACT_MAX_N if exact is None else exact
    if use_exact:
        doubled = np.rint(2 * ranks).astype(np.int64)
        return WilcoxonResult(w_plus, _exact_two_sided(doubled, int(round(2 * w_plus))), n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    if var <= 0:
        return WilcoxonResult(w_plus, 1.0, n, "degenerate")
    z = (w_plus - mean) / math.sqrt(var)
    return WilcoxonResult(w_plus, float(min(1.0, 2.0 * ndtr(-abs(z)))), n, "normal")


# --------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    frames: list[tuple[str, FrameScore]] = field(default_factory=list)   # (sequence, score)
    per_sequence: dict[str, dict] = field(default_factory=dict)
    overall_miou: float = math.nan
    overall_dice: float = math.nan
    per_class_iou: dict[int, float] = field(default_factory=dict)      # frame-averaged where present
    dataset: DatasetScores | None = None
    p_values: dict[str, float] = field(default_factory=dict)

    def frame_mious(self) -> list[float]:
        """Per-frame mIoU of non-skipped frames, in evaluation order."""
        return [f.miou for _, f in self.frames if not f.skipped]

    def to_dict(self) -> dict:
        return {
            "overall": {"mIoU": self.overall_miou, "Dice": self.overall_dice},
            "per_sequence": self.per_sequence,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "dataset": None if self.dataset is None else {
                "PA": self.dataset.pa, "PAC": self.dataset.pac, "mIoU": self.dataset.miou,
                "per_class_iou": {str(k): v for k, v in self.dataset.per_class_iou.items()}},
            "p_values": self.p_values,
            "frames": [{"sequence": s, "frame": f.frame_id, "mIoU": f.miou, "Dice": f.mdice, "skipped": f.skipped,
                        "iou": {str(k): v for k, v in f.iou.items()}} for s, f in self.frames],
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "sequence", "frame", "mIoU", "Dice", "frames"])
            for seq, f in self.frames:
                w.writerow(["frame", seq, f.frame_id, _fmt(f.miou), _fmt(f.mdice), ""])
            for seq, s in self.per_sequence.items():
                w.writerow(["sequence", seq, "", _fmt(s["mIoU"]), _fmt(s["Dice"]), s["frames"]])
            w.writerow(["overall", "", "", _fmt(self.overall_miou), _fmt(self.overall_dice), len(self.frame_mious())])


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def build_report(items: Iterable[tuple[str, str, np.ndarray, np.ndarray]], num_classes: int,
                 background: int = 0, ignore: int = IGNORE) -> MetricsReport:
    """Score ``(sequence, frame_id, pred, gt)`` tuples under both protocols."""
    rep = MetricsReport()
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    seq_scores: dict[str, list[FrameScore]] = {}
    class_vals: dict[int, list[float]] = {}
    for seq, fid, pred, gt in items:
        fs = frame_scores(pred, gt, background, ignore, fid)
        rep.frames.append((seq, fs))
        seq_scores.setdefault(seq, []).append(fs)
        for c, v in fs.iou.items():
            class_vals.setdefault(c, []).append(v)
        cm += confusion_matrix(pred, gt, num_classes, (ignore,))
    for seq, fl in seq_scores.items():
        kept = [f for f in fl if not f.skipped]
        rep.per_sequence[seq] = {
            "mIoU": float(np.mean([f.miou for f in kept])) if kept else math.nan,
            "Dice": float(np.mean([f.mdice for f in kept])) if kept else math.nan,
            "frames": len(kept),
        }
    kept = [f for _, f in rep.frames if not f.skipped]
    if len(kept) < len(rep.frames):
        logger.info("%d background-only frames skipped", len(rep.frames) - len(kept))
    if kept:
        rep.overall_miou = float(np.mean([f.miou for f in kept]))
        rep.overall_dice = float(np.mean([f.mdice for f in kept]))
    rep.per_class_iou = {c: float(np.mean(v)) for c, v in sorted(class_vals.items())}
    rep.dataset = scores_from_confusion(cm)
    return rep
