"""Detection metrics over axis-aligned boxes: IoU, Recall@k, and mAP.

Matching, for both metrics, processes detections in descending score
(ties broken by insertion order) and assigns each to the unmatched
ground-truth box of the same image and class with the highest IoU at or
above the threshold; IoU ties go to the lowest ground-truth index.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class BoxRect:
    """Axis-aligned box with corner coordinates; must have positive area."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise EvaluationError(f"degenerate box: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: BoxRect
    class_id: int


@dataclass(frozen=True)
class DetectionInstance:
    image_id: int
    box: BoxRect
    class_id: int
    score: float


def iou(a: BoxRect, b: BoxRect) -> float:
    """Intersection area over union area; 0 when the boxes are disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _match_ranked(dets_ranked, gt_entries, iou_threshold):
    """Greedy matching; yields (det, matched_gt_index or None) in rank order.

    gt_entries: list of (gt_index, GroundTruth) for one image, one class pool.
    """
    taken: set = set()
    for det in dets_ranked:
        best = None
        best_iou = -1.0
        for gi, gt in gt_entries:
            if gi in taken or gt.class_id != det.class_id or gt.image_id != det.image_id:
                continue
            v = iou(det.box, gt.box)
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best = gi
        if best is not None:
            taken.add(best)
        yield det, best


def recall_counts(
    detections: list[DetectionInstance],
    gts: list[GroundTruth],
    k: int = 100,
    iou_threshold: float = 0.5,
) -> dict[int, list[int]]:
    """Per-class [matched, total] ground-truth counts under the top-k protocol."""
    if not gts:
        raise EvaluationError("recall is undefined for an empty ground-truth set")
    by_image_dets: dict = {}
    for order, det in enumerate(detections):
        by_image_dets.setdefault(det.image_id, []).append((order, det))
    by_image_gts: dict = {}
    counts: dict[int, list[int]] = {}
    for gi, gt in enumerate(gts):
        by_image_gts.setdefault(gt.image_id, []).append((gi, gt))
        counts.setdefault(gt.class_id, [0, 0])[1] += 1
    for image_id, gt_entries in by_image_gts.items():
        ranked = sorted(by_image_dets.get(image_id, []), key=lambda t: (-t[1].score, t[0]))
        top = [det for _, det in ranked[:k]]
        for det, matched in _match_ranked(top, gt_entries, iou_threshold):
            if matched is not None:
                counts[det.class_id][0] += 1
    return counts


def recall_at_k(
    detections: list[DetectionInstance],
    gts: list[GroundTruth],
    k: int = 100,
    iou_threshold: float = 0.5,
) -> float:
    counts = recall_counts(detections, gts, k=k, iou_threshold=iou_threshold)
    matched = sum(m for m, _ in counts.values())
    total = sum(t for _, t in counts.values())
    return matched / total


def average_precisions(
    detections: list[DetectionInstance],
    gts: list[GroundTruth],
    iou_threshold: float = 0.5,
) -> tuple[dict[int, float], list[int]]:
    """All-point interpolated AP per class.

    Returns ({class_id: ap} over classes with ground truth, [excluded]);
    excluded lists classes that appear only in detections and therefore
    have no defined AP.
    """
    if not gts:
        raise EvaluationError("AP is undefined for an empty ground-truth set")
    gt_classes = sorted({gt.class_id for gt in gts})
    det_classes = {det.class_id for det in detections}
    excluded = sorted(det_classes - set(gt_classes))

    aps: dict[int, float] = {}
    for cls in gt_classes:
        entries = [(gi, gt) for gi, gt in enumerate(gts) if gt.class_id == cls]
        npos = len(entries)
        ranked = sorted(
            ((order, det) for order, det in enumerate(detections) if det.class_id == cls),
            key=lambda t: (-t[1].score, t[0]),
        )
        tp_flags = np.array(
            [matched is not None for _, matched in _match_ranked([d for _, d in ranked], entries, iou_threshold)],
            dtype=np.float64,
        )
        if tp_flags.size == 0:
            aps[cls] = 0.0
            continue
        tp = np.cumsum(tp_flags)
        fp = np.cumsum(1.0 - tp_flags)
        recall = tp / npos
        precision = tp / (tp + fp)
        # precision envelope, then sum area under the stepwise curve
        mrec = np.concatenate([[0.0], recall, [recall[-1]]])
        mpre = np.concatenate([[0.0], precision, [0.0]])
        for i in range(mpre.size - 2, -1, -1):
            mpre[i] = max(mpre[i], mpre[i + 1])
        steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
        aps[cls] = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return aps, excluded


def mean_average_precision(
    detections: list[DetectionInstance],
    gts: list[GroundTruth],
    iou_threshold: float = 0.5,
) -> tuple[float, dict[int, float], list[int]]:
    aps, excluded = average_precisions(detections, gts, iou_threshold)
    return float(np.mean(list(aps.values()))), aps, excluded


@dataclass
class MetricsReport:
    """Evaluation results in a JSON/CSV-serializable form."""

    recall: dict[str, float]
    map_50: float
    per_class_ap: dict[int, float]
    excluded_classes: list[int]
    num_images: int
    num_gts: int
    num_detections: int
    num_gts_per_class: dict[int, int] = field(default_factory=dict)
    group_recall: dict[str, dict[str, float]] | None = None

    def to_dict(self) -> dict:
        out = {
            "recall_at_100": self.recall,
            "map_50": self.map_50,
            "per_class_ap": {str(c): ap for c, ap in sorted(self.per_class_ap.items())},
            "excluded_classes": list(self.excluded_classes),
            "num_images": self.num_images,
            "num_gts": self.num_gts,
            "num_detections": self.num_detections,
        }
        if self.group_recall is not None:
            out["group_recall_at_100"] = self.group_recall
        return out

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for thr, value in sorted(self.recall.items()):
                writer.writerow([f"recall@100@{thr}", repr(value)])
            writer.writerow(["map@0.5", repr(self.map_50)])
            if self.group_recall:
                for group, recs in sorted(self.group_recall.items()):
                    for thr, value in sorted(recs.items()):
                        writer.writerow([f"{group}_recall@100@{thr}", repr(value)])

    def write_per_class_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "ap", "num_gts"])
            for cls, ap in sorted(self.per_class_ap.items()):
                writer.writerow([cls, repr(ap), self.num_gts_per_class.get(cls, 0)])


def score_proposals(head, eval_set) -> tuple[list[DetectionInstance], list[GroundTruth]]:
    """Run a classifier head over every proposal and emit detections.

    A proposal whose argmax lands on the head's background column produces
    no detection; otherwise the detection carries the argmax class and its
    softmax probability. Argmax ties resolve to the lowest column index,
    and head columns are ordered by ascending class id with background
    last, so ties go to the lowest class id.
    """
    detections: list[DetectionInstance] = []
    gts: list[GroundTruth] = []
    for image in eval_set.images:
        gts.extend(image.gts)
        if not image.proposals:
            continue
        feats = np.stack([p.feature for p in image.proposals])
        logits = head.logits(feats)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=1, keepdims=True)
        winners = np.argmax(logits, axis=1)
        n_classes = len(head.class_ids)
        for prop, col, prob_row in zip(image.proposals, winners, probs):
            if head.has_background and col == n_classes:
                continue
            detections.append(
                DetectionInstance(
                    image_id=image.image_id,
                    box=prop.box,
                    class_id=head.class_ids[int(col)],
                    score=float(prob_row[int(col)]),
                )
            )
    return detections, gts


def evaluate_pipeline(
    head,
    eval_set,
    thresholds: tuple[float, ...] = (0.4, 0.5, 0.6),
    k: int = 100,
    map_threshold: float = 0.5,
    groups: dict[str, set[int]] | None = None,
) -> MetricsReport:
    """Score an eval split with a head and compute the full metric table.

    `groups` optionally maps a label (e.g. "seen") to a class-id set;
    recall is then also reported restricted to each group's ground truth.
    """
    detections, gts = score_proposals(head, eval_set)
    if not gts:
        raise EvaluationError("eval set has no ground truth")
    recall = {}
    per_class_counts: dict[float, dict[int, list[int]]] = {}
    for thr in thresholds:
        counts = recall_counts(detections, gts, k=k, iou_threshold=thr)
        per_class_counts[thr] = counts
        matched = sum(m for m, _ in counts.values())
        total = sum(t for _, t in counts.values())
        recall[f"{thr:g}"] = matched / total
    map_value, per_class_ap, excluded = mean_average_precision(detections, gts, map_threshold)
    group_recall = None
    if groups:
        group_recall = {}
        for label, class_set in groups.items():
            group_recall[label] = {}
            for thr in thresholds:
                counts = per_class_counts[thr]
                matched = sum(m for c, (m, _) in counts.items() if c in class_set)
                total = sum(t for c, (_, t) in counts.items() if c in class_set)
                group_recall[label][f"{thr:g}"] = matched / total if total else 0.0
    gts_per_class: dict[int, int] = {}
    for gt in gts:
        gts_per_class[gt.class_id] = gts_per_class.get(gt.class_id, 0) + 1
    return MetricsReport(
        recall=recall,
        map_50=map_value,
        per_class_ap=per_class_ap,
        excluded_classes=excluded,
        num_images=len(eval_set.images),
        num_gts=len(gts),
        num_detections=len(detections),
        num_gts_per_class=gts_per_class,
        group_recall=group_recall,
    )
