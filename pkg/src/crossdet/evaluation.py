"""Detection scoring: COCO-style AP, VOC-style mAP, WIDER-style PR curves.

All modes share one greedy matcher. Detections are ranked globally per class
by (-score, image_id, insertion index); that order is stable and documented
because AP changes under re-orderings of tied scores. Ignore-flagged ground
truth absorbs detections without counting them as TP or FP.

Greedy matching is prefix-consistent: a detection's outcome depends only on
higher-ranked detections, so one matching pass supports every score
threshold (used by the WIDER 1000-threshold curves).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .anchors import iou_matrix
from .errors import (
    MalformedLine,
    MissingDifficultyTags,
    UnknownClass,
    UnknownImage,
)
from .ingest import BBox, HybridManifest

TP = 1
FP = 0
ABSORBED = -1

COCO_IOU_THRESHOLDS = np.arange(0.50, 0.96, 0.05).round(2)
SIZE_BUCKETS = {
    "S": (0.0, 32.0**2),
    "M": (32.0**2, 96.0**2),
    "L": (96.0**2, float("inf")),
}
WIDER_SUBSETS = ("easy", "medium", "hard")
# nested subsets: easy is the smallest, hard contains everything
_SUBSET_RANK = {"easy": 0, "medium": 1, "hard": 2}


@dataclass
class Detection:
    image_id: int
    hybrid_class: int
    bbox: BBox
    score: float


def match_detections(
    det_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    iou_threshold: float,
    gt_ignore: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy-match one image's detections of one class against its gt.

    Detections must already be in descending-score order. Each detection
    takes the unmatched real gt of highest IoU >= threshold (ties go to the
    lowest gt index); failing that, an ignore-flagged gt of highest IoU
    absorbs it without being consumed. Returns (labels, matched_gt) where
    labels hold TP / FP / ABSORBED and matched_gt is -1 for FP.
    """
    det_boxes = np.atleast_2d(np.asarray(det_boxes, dtype=np.float64))
    n = 0 if det_boxes.size == 0 else det_boxes.shape[0]
    labels = np.full(n, FP, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    gt_boxes = np.atleast_2d(np.asarray(gt_boxes, dtype=np.float64))
    m = 0 if gt_boxes.size == 0 else gt_boxes.shape[0]
    if n == 0 or m == 0:
        return labels, matched

    if gt_ignore is None:
        gt_ignore = np.zeros(m, dtype=bool)
    else:
        gt_ignore = np.asarray(gt_ignore, dtype=bool)
    overlaps = iou_matrix(det_boxes, gt_boxes)
    taken = np.zeros(m, dtype=bool)
    real = ~gt_ignore
    for d in range(n):
        row = overlaps[d]
        best, best_iou = -1, iou_threshold
        for g in np.flatnonzero(real & ~taken):
            if row[g] >= best_iou and (best == -1 or row[g] > best_iou):
                best, best_iou = g, row[g]
        if best >= 0:
            taken[best] = True
            labels[d] = TP
            matched[d] = best
            continue
        ig = np.flatnonzero(gt_ignore)
        if ig.size and row[ig].max() >= iou_threshold:
            labels[d] = ABSORBED
            matched[d] = ig[np.argmax(row[ig])]
    return labels, matched


def average_precision(labels: Sequence[int], num_gt: int, mode: str) -> float:
    """AP from ranked TP/FP labels (absorbed detections already removed).

    coco-101pt takes the mean of the best precision at or beyond each of
    the 101 recall levels {0, 0.01, ..., 1}; voc-allpoint integrates the
    monotonized PR curve exactly.
    """
    if mode not in ("coco-101pt", "voc-allpoint"):
        raise ValueError(f"unknown AP mode {mode!r}")
    if num_gt <= 0:
        return 0.0
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    tp = np.cumsum(labels == TP).astype(np.float64)
    fp = np.cumsum(labels == FP).astype(np.float64)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    if mode == "coco-101pt":
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        levels = np.linspace(0.0, 1.0, 101)
        idx = np.searchsorted(recall, levels, side="left")
        inside = idx < recall.size
        values = np.where(inside, envelope[np.minimum(idx, recall.size - 1)], 0.0)
        return float(np.mean(values))
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


@dataclass
class EvalReport:
    mode: str
    aggregate: dict
    per_class: dict
    gt_counts: dict
    pr_curves: dict | None = None

    def to_dict(self) -> dict:
        doc = {
            "mode": self.mode,
            "aggregate": self.aggregate,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "gt_counts": {str(k): v for k, v in self.gt_counts.items()},
        }
        if self.pr_curves is not None:
            doc["pr_curves"] = {
                subset: {str(k): curve for k, curve in curves.items()}
                for subset, curves in self.pr_curves.items()
            }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def per_class_csv(self) -> str:
        keys = sorted({k for v in self.per_class.values() for k in v})
        lines = ["class," + ",".join(keys)]
        for idx in sorted(self.per_class):
            row = [str(idx)]
            for k in keys:
                v = self.per_class[idx].get(k)
                row.append("" if v is None else repr(float(v)))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shared per-class machinery


@dataclass
class _ClassEval:
    """One class's detections in global rank order plus per-image gt."""

    scores: np.ndarray  # descending under the documented tie-break
    image_ids: np.ndarray
    det_areas: np.ndarray
    det_boxes_by_image: dict
    det_positions_by_image: dict
    gt_boxes_by_image: dict
    gt_ignore_by_image: dict
    gt_extra_by_image: dict  # per-gt payload: area or difficulty rank

    def matched_labels(
        self,
        iou_threshold: float,
        gt_keep=None,
    ) -> tuple[np.ndarray, int]:
        """Match every image, honoring a per-gt keep predicate.

        gt_keep(extra) -> bool marks which gts stay real; the rest become
        ignore-flagged for this evaluation. Returns labels in global rank
        order and the count of real gts.
        """
        labels = np.full(self.scores.size, FP, dtype=np.int8)
        num_gt = 0
        for img, gt_boxes in self.gt_boxes_by_image.items():
            ignore = self.gt_ignore_by_image[img].copy()
            if gt_keep is not None and ignore.size:
                drop = ~np.array(
                    [gt_keep(x) for x in self.gt_extra_by_image[img]], dtype=bool
                )
                ignore |= drop
            num_gt += int((~ignore).sum())
            det = self.det_boxes_by_image.get(img)
            if det is None:
                continue
            img_labels, _ = match_detections(det, gt_boxes, iou_threshold, ignore)
            labels[self.det_positions_by_image[img]] = img_labels
        return labels, num_gt


def _index_detections(
    detections: Sequence[Detection],
    manifest: HybridManifest,
    max_dets: int | None,
) -> dict:
    """Validate, cap per image, and bucket detections by class."""
    image_meta = {rec.image_id: rec for rec in manifest.images}
    num_classes = len(manifest.label_space.classes)
    for det in detections:
        if det.image_id not in image_meta:
            raise UnknownImage(f"detection references unknown image {det.image_id}")
        if not 0 <= det.hybrid_class < num_classes:
            raise UnknownClass(f"detection has unknown class {det.hybrid_class}")
        if not np.isfinite(det.score):
            raise MalformedLine(f"detection score not finite: {det.score!r}")

    indexed = list(enumerate(detections))
    if max_dets is not None:
        by_image: dict = {}
        for pos, det in indexed:
            by_image.setdefault(det.image_id, []).append((pos, det))
        kept = []
        for img in by_image:
            ranked = sorted(by_image[img], key=lambda t: (-t[1].score, t[0]))
            kept.extend(ranked[:max_dets])
        kept.sort(key=lambda t: t[0])
        indexed = kept

    per_class: dict = {}
    for pos, det in indexed:
        per_class.setdefault(det.hybrid_class, []).append((pos, det))
    return per_class


def _class_eval(
    class_dets: list,
    manifest: HybridManifest,
    class_idx: int,
    gt_extra,
) -> _ClassEval:
    """Build the rank-ordered view of one class.

    gt_extra(annotation, record) supplies the per-gt payload used by
    bucket / subset filters.
    """
    ranked = sorted(class_dets, key=lambda t: (-t[1].score, t[1].image_id, t[0]))
    scores = np.array([d.score for _, d in ranked], dtype=np.float64)
    image_ids = np.array([d.image_id for _, d in ranked], dtype=np.int64)
    det_areas = np.array([d.bbox.area for _, d in ranked], dtype=np.float64)

    det_boxes_by_image: dict = {}
    det_positions_by_image: dict = {}
    for rank, (_, det) in enumerate(ranked):
        det_boxes_by_image.setdefault(det.image_id, []).append(det.bbox.as_tuple())
        det_positions_by_image.setdefault(det.image_id, []).append(rank)
    det_boxes_by_image = {
        k: np.asarray(v, dtype=np.float64) for k, v in det_boxes_by_image.items()
    }
    det_positions_by_image = {
        k: np.asarray(v, dtype=np.int64) for k, v in det_positions_by_image.items()
    }

    gt_boxes_by_image: dict = {}
    gt_ignore_by_image: dict = {}
    gt_extra_by_image: dict = {}
    for rec in manifest.images:
        boxes, ignore, extra = [], [], []
        for ann in rec.annotations:
            if ann.hybrid_class != class_idx:
                continue
            boxes.append(ann.bbox.as_tuple())
            ignore.append(ann.ignore)
            extra.append(gt_extra(ann, rec))
        if boxes:
            gt_boxes_by_image[rec.image_id] = np.asarray(boxes, dtype=np.float64)
            gt_ignore_by_image[rec.image_id] = np.asarray(ignore, dtype=bool)
            gt_extra_by_image[rec.image_id] = extra
    return _ClassEval(
        scores,
        image_ids,
        det_areas,
        det_boxes_by_image,
        det_positions_by_image,
        gt_boxes_by_image,
        gt_ignore_by_image,
        gt_extra_by_image,
    )


def _mean_defined(values: list) -> float:
    defined = [v for v in values if v is not None]
    if not defined:
        return 0.0
    return float(np.mean(np.asarray(defined, dtype=np.float64)))


# ---------------------------------------------------------------------------
# COCO report


def coco_report(
    detections: Sequence[Detection],
    manifest: HybridManifest,
    max_dets: int = 100,
) -> EvalReport:
    """COCO-style report: AP over IoU 0.50:0.05:0.95, AP50, AP75, AP_S/M/L.

    Size buckets go by gt box area (S < 32^2, M in [32^2, 96^2), L >= 96^2);
    out-of-bucket gt is ignore-flagged, and an unmatched detection whose own
    area falls outside the bucket is dropped rather than counted as FP.
    Detections are capped at max_dets per image by score before anything
    else.
    """
    per_class_dets = _index_detections(detections, manifest, max_dets)
    classes = range(len(manifest.label_space.classes))

    per_class: dict = {}
    gt_counts: dict = {}
    for c in classes:
        ev = _class_eval(
            per_class_dets.get(c, []), manifest, c, lambda ann, rec: ann.bbox.area
        )
        total_gt = sum(
            int((~ig).sum()) for ig in ev.gt_ignore_by_image.values()
        )
        gt_counts[c] = total_gt
        if total_gt == 0:
            continue

        ap_at: dict = {}
        bucket_ap: dict = {name: [] for name in SIZE_BUCKETS}
        bucket_has_gt = {name: False for name in SIZE_BUCKETS}
        for thr in COCO_IOU_THRESHOLDS:
            labels, num_gt = ev.matched_labels(float(thr))
            counted = labels != ABSORBED
            ap_at[float(thr)] = average_precision(
                labels[counted], num_gt, "coco-101pt"
            )
            for name, (lo, hi) in SIZE_BUCKETS.items():
                blabels, bnum = ev.matched_labels(
                    float(thr), gt_keep=lambda area: lo <= area < hi
                )
                if bnum == 0:
                    continue
                bucket_has_gt[name] = True
                out = (ev.det_areas < lo) | (ev.det_areas >= hi)
                blabels = blabels.copy()
                blabels[(blabels == FP) & out] = ABSORBED
                bcounted = blabels != ABSORBED
                bucket_ap[name].append(
                    average_precision(blabels[bcounted], bnum, "coco-101pt")
                )

        metrics = {
            "AP": float(np.mean([ap_at[float(t)] for t in COCO_IOU_THRESHOLDS])),
            "AP50": ap_at[0.5],
            "AP75": ap_at[0.75],
        }
        for name in SIZE_BUCKETS:
            metrics[f"AP_{name}"] = (
                float(np.mean(bucket_ap[name])) if bucket_has_gt[name] else None
            )
        per_class[c] = metrics

    aggregate = {
        key: _mean_defined([m.get(key) for m in per_class.values()])
        for key in ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")
    }
    return EvalReport("coco", aggregate, per_class, gt_counts)


# ---------------------------------------------------------------------------
# VOC report


def voc_report(
    detections: Sequence[Detection],
    manifest: HybridManifest,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """VOC-style report: per-class all-point AP at a single IoU threshold."""
    per_class_dets = _index_detections(detections, manifest, None)
    per_class: dict = {}
    gt_counts: dict = {}
    for c in range(len(manifest.label_space.classes)):
        ev = _class_eval(per_class_dets.get(c, []), manifest, c, lambda ann, rec: None)
        labels, num_gt = ev.matched_labels(iou_threshold)
        gt_counts[c] = num_gt
        if num_gt == 0:
            continue
        counted = labels != ABSORBED
        per_class[c] = {
            "AP": average_precision(labels[counted], num_gt, "voc-allpoint")
        }
    aggregate = {"mAP": _mean_defined([m["AP"] for m in per_class.values()])}
    return EvalReport("voc", aggregate, per_class, gt_counts)


# ---------------------------------------------------------------------------
# WIDER report


def derive_difficulty(gt_height: float, canvas_height: float) -> str:
    """Height-based stand-in for difficulty tags on synthetic data."""
    if gt_height >= canvas_height / 4.0:
        return "easy"
    if gt_height >= canvas_height / 8.0:
        return "medium"
    return "hard"


def wider_report(
    detections: Sequence[Detection],
    manifest: HybridManifest,
    iou_threshold: float = 0.5,
    num_thresholds: int = 1000,
    derive_missing: bool = False,
) -> EvalReport:
    """WIDER-style report: per-difficulty-subset AP plus PR curve samples.

    Subsets are nested (easy is the smallest; hard contains every gt): the
    easy pass ignores medium- and hard-tagged gt, the hard pass ignores
    none. The PR curve is sampled at num_thresholds score cutoffs from 1.0
    down, and AP is the all-point integral of those samples. Gt without a
    difficulty tag raises MissingDifficultyTags unless derive_missing is
    set, in which case the height rule fills it in.
    """
    per_class_dets = _index_detections(detections, manifest, None)

    def gt_difficulty(ann, rec):
        if ann.difficulty is not None:
            if ann.difficulty not in _SUBSET_RANK:
                raise MissingDifficultyTags(
                    f"unknown difficulty tag {ann.difficulty!r}"
                )
            return _SUBSET_RANK[ann.difficulty]
        if ann.ignore:
            return 0  # stays ignore-flagged in every subset, rank unused
        if not derive_missing:
            raise MissingDifficultyTags(
                f"gt of class {ann.hybrid_class} on image {rec.image_id} "
                "has no difficulty tag"
            )
        return _SUBSET_RANK[derive_difficulty(ann.bbox.h, rec.height)]

    thresholds = np.arange(num_thresholds, 0, -1) / float(num_thresholds)
    per_class: dict = {}
    gt_counts: dict = {}
    pr_curves: dict = {name: {} for name in WIDER_SUBSETS}
    for c in range(len(manifest.label_space.classes)):
        ev = _class_eval(per_class_dets.get(c, []), manifest, c, gt_difficulty)
        total_gt = sum(int((~ig).sum()) for ig in ev.gt_ignore_by_image.values())
        gt_counts[c] = total_gt
        if total_gt == 0:
            continue
        metrics = {}
        for name in WIDER_SUBSETS:
            rank = _SUBSET_RANK[name]
            labels, num_gt = ev.matched_labels(
                iou_threshold, gt_keep=lambda r: r <= rank
            )
            counted = labels != ABSORBED
            scores = ev.scores[counted]
            clabels = labels[counted]
            tp = np.cumsum(clabels == TP).astype(np.float64)
            fp = np.cumsum(clabels == FP).astype(np.float64)
            # prefix size at each cutoff: counted detections scoring >= t
            if scores.size:
                k = np.searchsorted(-scores, -thresholds, side="right")
                tp_k = np.where(k > 0, tp[np.maximum(k - 1, 0)], 0.0)
                fp_k = np.where(k > 0, fp[np.maximum(k - 1, 0)], 0.0)
            else:
                tp_k = np.zeros_like(thresholds)
                fp_k = np.zeros_like(thresholds)
            denom = tp_k + fp_k
            precision = np.where(denom > 0, tp_k / np.where(denom > 0, denom, 1.0), 0.0)
            recall = tp_k / num_gt if num_gt > 0 else np.zeros_like(tp_k)
            mrec = np.concatenate(([0.0], recall, [1.0]))
            mpre = np.concatenate(([0.0], precision, [0.0]))
            mpre = np.maximum.accumulate(mpre[::-1])[::-1]
            ap = float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))
            metrics[f"AP_{name}"] = ap if num_gt > 0 else None
            pr_curves[name][c] = np.stack([recall, precision], axis=1).tolist()
        per_class[c] = metrics

    aggregate = {
        f"AP_{name}": _mean_defined(
            [m.get(f"AP_{name}") for m in per_class.values()]
        )
        for name in WIDER_SUBSETS
    }
    return EvalReport("wider", aggregate, per_class, gt_counts, pr_curves)


# ---------------------------------------------------------------------------
# detections IO: one {"image_id", "class", "x","y","w","h","score"} per line


def read_detections_jsonl(text: str) -> list[Detection]:
    detections = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(f"line {lineno}: not valid JSON: {exc}") from exc
        try:
            det = Detection(
                int(doc["image_id"]),
                int(doc["class"]),
                BBox(
                    float(doc["x"]), float(doc["y"]),
                    float(doc["w"]), float(doc["h"]),
                ),
                float(doc["score"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedLine(f"line {lineno}: {exc}") from exc
        if not np.isfinite(det.score):
            raise MalformedLine(f"line {lineno}: score not finite")
        detections.append(det)
    return detections


def write_detections_jsonl(detections: Sequence[Detection]) -> str:
    lines = []
    for det in detections:
        lines.append(
            json.dumps(
                {
                    "image_id": det.image_id,
                    "class": det.hybrid_class,
                    "x": det.bbox.x,
                    "y": det.bbox.y,
                    "w": det.bbox.w,
                    "h": det.bbox.h,
                    "score": det.score,
                }
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")
