"""Instance segmentation evaluation: mask IoU, greedy matching, F1 and AP@50.

Matching protocol: within an image, predictions are visited in descending
score order (ties by ascending index); each claims the unmatched ground truth
of the same class with the highest mask IoU at or above the threshold
(ties by ascending ground-truth index). Matched predictions are true
positives, the rest false positives, and unclaimed ground truths false
negatives.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset, ImageRecord
from .errors import ContractError
from .geometry import rasterize
from .jsonio import canonical_dumps

AP_RECALL_POINTS = 101


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


def mask_iou(a, b, width: int, height: int) -> float:
    """IoU of two polygon sets rasterized on a ``width x height`` grid."""
    ma = rasterize(a, width, height)
    mb = rasterize(b, width, height)
    union = int(np.count_nonzero(ma | mb))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(ma & mb)) / union


def iou_matrix(pred_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """Pairwise IoU between stacks of boolean masks, shape ``(P, G)``."""
    if len(pred_masks) == 0 or len(gt_masks) == 0:
        return np.zeros((len(pred_masks), len(gt_masks)))
    p = pred_masks.reshape(len(pred_masks), -1).astype(np.float64)
    g = gt_masks.reshape(len(gt_masks), -1).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_predictions: list[int] = field(default_factory=list)
    unmatched_ground_truths: list[int] = field(default_factory=list)


def _score(obj) -> float:
    s = getattr(obj, "score", None)
    return 1.0 if s is None else float(s)


def match_instances(predictions: Sequence, ground_truths: Sequence, width: int, height: int,
                    iou_threshold: float = 0.5) -> MatchResult:
    """Greedy confidence-ordered one-to-one matching within one image.

    ``predictions`` and ``ground_truths`` are objects with ``category_id`` and
    ``segmentation``; predictions also carry ``score`` (missing means 1.0).
    """
    pm = np.array([rasterize(p.segmentation, width, height) for p in predictions]).reshape(len(predictions), height, width)
    gm = np.array([rasterize(g.segmentation, width, height) for g in ground_truths]).reshape(len(ground_truths), height, width)
    ious = iou_matrix(pm, gm)
    order = sorted(range(len(predictions)), key=lambda i: (-_score(predictions[i]), i))
    gt_cls = [g.category_id for g in ground_truths]
    taken = [False] * len(ground_truths)
    result = MatchResult()
    for i in order:
        best, best_iou = -1, -1.0
        cls = predictions[i].category_id
        for j, c in enumerate(gt_cls):
            if taken[j] or c != cls:
                continue
            v = ious[i, j]
            if v >= iou_threshold and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            result.pairs.append((i, best, float(best_iou)))
        else:
            result.unmatched_predictions.append(i)
    result.unmatched_predictions.sort()
    result.unmatched_ground_truths = [j for j, t in enumerate(taken) if not t]
    return result


def _ap_exact(scores: Sequence[float], is_tp: Sequence[bool], num_gt: int) -> Optional[Fraction]:
    if num_gt <= 0:
        return None
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp_flags = np.array([bool(is_tp[i]) for i in order], dtype=np.int64)
    if tp_flags.size == 0:
        return Fraction(0)
    tp = np.cumsum(tp_flags)
    # precision envelope: best precision at this rank or any deeper rank
    envelope = [Fraction(0)] * tp.size
    best = Fraction(0)
    for r in range(tp.size - 1, -1, -1):
        best = max(best, Fraction(int(tp[r]), r + 1))
        envelope[r] = best
    total = Fraction(0)
    for k in range(AP_RECALL_POINTS):
        # first rank whose recall tp/num_gt reaches k/100, compared in integers
        idx = int(np.searchsorted(tp * (AP_RECALL_POINTS - 1), k * num_gt, side="left"))
        if idx < tp.size:
            total += envelope[idx]
    return total / AP_RECALL_POINTS


def interpolated_ap(scores: Sequence[float], is_tp: Sequence[bool], num_gt: int) -> Optional[float]:
    """101-point interpolated average precision of a ranked detection list.

    Ranks by descending score, ties by ascending position. Returns ``None``
    when there are no ground truths. Accumulated in exact rationals and
    rounded once.
    """
    ap = _ap_exact(scores, is_tp, num_gt)
    return None if ap is None else float(ap)


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ap50: Optional[float] = None

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return _f1(self.tp, self.fp, self.fn)

    @property
    def num_gt(self) -> int:
        return self.tp + self.fn


@dataclass
class EvalReport:
    per_class: dict[int, ClassStats]
    micro_f1: float
    macro_f1: float
    map50: float
    iou_threshold: float = 0.5

    def to_dict(self, provenance: Optional[dict] = None) -> dict:
        out = {
            "iou_threshold": float(self.iou_threshold),
            "micro_f1": float(self.micro_f1),
            "macro_f1": float(self.macro_f1),
            "map50": float(self.map50),
            "per_class": {
                str(cid): {
                    "tp": s.tp,
                    "fp": s.fp,
                    "fn": s.fn,
                    "precision": float(s.precision),
                    "recall": float(s.recall),
                    "f1": float(s.f1),
                    "ap50": None if s.ap50 is None else float(s.ap50),
                }
                for cid, s in sorted(self.per_class.items())
            },
        }
        if provenance is not None:
            out["provenance"] = provenance
        return out

    def to_json(self, provenance: Optional[dict] = None) -> str:
        return canonical_dumps(self.to_dict(provenance))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "tp", "fp", "fn", "precision", "recall", "f1", "ap50"])
        for cid, s in sorted(self.per_class.items()):
            ap = "" if s.ap50 is None else f"{s.ap50:.6f}"
            w.writerow([cid, s.tp, s.fp, s.fn, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}", ap])
        return buf.getvalue()


def _check_tables(pred: Dataset, gt: Dataset) -> None:
    key = lambda d: [(im.id, im.width, im.height) for im in d.images]
    if key(pred) != key(gt):
        raise ContractError("prediction and ground-truth image tables differ")
    if [(c.id, c.name) for c in pred.categories] != [(c.id, c.name) for c in gt.categories]:
        raise ContractError("prediction and ground-truth category tables differ")


def _match_all(pred: Dataset, gt: Dataset, iou_threshold: float):
    """Per-class counts plus ranked (score, index, is_tp) lists for AP."""
    _check_tables(pred, gt)
    stats: dict[int, ClassStats] = {}
    ranked: dict[int, list[tuple[float, int, bool]]] = {}
    pred_by_img = pred.annotations_by_image()
    gt_by_img = gt.annotations_by_image()
    global_index = {a.id: k for k, a in enumerate(pred.annotations)}
    for im in gt.images:
        ps, gs = pred_by_img[im.id], gt_by_img[im.id]
        m = match_instances(ps, gs, im.width, im.height, iou_threshold)
        matched = {i for i, _, _ in m.pairs}
        for i, p in enumerate(ps):
            s = stats.setdefault(p.category_id, ClassStats())
            hit = i in matched
            if hit:
                s.tp += 1
            else:
                s.fp += 1
            ranked.setdefault(p.category_id, []).append((_score(p), global_index[p.id], hit))
        for j in m.unmatched_ground_truths:
            stats.setdefault(gs[j].category_id, ClassStats()).fn += 1
        for _, j, _ in m.pairs:
            stats.setdefault(gs[j].category_id, ClassStats())
    return stats, ranked


def _f1_fields(stats: dict[int, ClassStats]) -> tuple[float, float]:
    tp = sum(s.tp for s in stats.values())
    fp = sum(s.fp for s in stats.values())
    fn = sum(s.fn for s in stats.values())
    present = [s for s in stats.values() if s.num_gt > 0]
    macro = sum(Fraction(2 * s.tp, 2 * s.tp + s.fp + s.fn) for s in present) / len(present) if present else 0
    return _f1(tp, fp, fn), float(macro)


def f1_report(pred_dataset: Dataset, gt_dataset: Dataset, iou_threshold: float = 0.5) -> EvalReport:
    """Per-class and pooled F1. ``map50`` is left at 0; see :func:`evaluate`."""
    stats, _ = _match_all(pred_dataset, gt_dataset, iou_threshold)
    micro, macro = _f1_fields(stats)
    return EvalReport(stats, micro, macro, 0.0, iou_threshold)


def average_precision_50(predictions: Sequence, ground_truths: Sequence, category_id: int,
                         images: dict[int, ImageRecord], iou_threshold: float = 0.5) -> Optional[float]:
    """AP of one class, with predictions pooled over images.

    ``predictions`` and ``ground_truths`` need ``image_id``; ``images`` maps
    image ids to their records. Ties in score are broken by position in
    ``predictions``. Returns ``None`` if the class has no ground truth.
    """
    preds = [(k, p) for k, p in enumerate(predictions) if p.category_id == category_id]
    gts = [g for g in ground_truths if g.category_id == category_id]
    if not gts:
        return None
    scores, flags = [], []
    for image_id in sorted({p.image_id for _, p in preds} | {g.image_id for g in gts}):
        im = images[image_id]
        ip = [(k, p) for k, p in preds if p.image_id == image_id]
        ig = [g for g in gts if g.image_id == image_id]
        m = match_instances([p for _, p in ip], ig, im.width, im.height, iou_threshold)
        matched = {i for i, _, _ in m.pairs}
        for i, (k, p) in enumerate(ip):
            scores.append((_score(p), k))
            flags.append(i in matched)
    # rank by global position on ties
    order = sorted(range(len(scores)), key=lambda i: (-scores[i][0], scores[i][1]))
    return interpolated_ap([scores[i][0] for i in order], [flags[i] for i in order], len(gts))


def evaluate(pred_dataset: Dataset, gt_dataset: Dataset, iou_threshold: float = 0.5) -> EvalReport:
    """F1 fields plus per-class AP and their mean over classes with ground truth."""
    stats, ranked = _match_all(pred_dataset, gt_dataset, iou_threshold)
    aps = []
    for cid, s in stats.items():
        if s.num_gt == 0:
            s.ap50 = None
            continue
        entries = sorted(ranked.get(cid, []), key=lambda e: (-e[0], e[1]))
        ap = _ap_exact([e[0] for e in entries], [e[2] for e in entries], s.num_gt)
        s.ap50 = float(ap)
        aps.append(ap)
    micro, macro = _f1_fields(stats)
    map50 = float(sum(aps) / len(aps)) if aps else 0.0
    return EvalReport(stats, micro, macro, map50, iou_threshold)
