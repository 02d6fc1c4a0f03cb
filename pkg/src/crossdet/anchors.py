"""FPN-style anchor generation, IoU matching, and box target encoding.

Anchors live on pyramid levels with stride 2**level; each grid location
carries one anchor per (ratio, scale) combination, with ratio meaning
height/width so a pedestrian ratio of 2.44 yields tall boxes. Anchors are
kept unclipped for assignment and only clipped at decode time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyConfig, ThresholdOrder

# Assignment states
NEGATIVE = 0
POSITIVE = 1
IGNORE = 2


@dataclass
class AnchorConfig:
    levels: list[int] = field(default_factory=lambda: [3, 4, 5, 6, 7])
    ratios: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    scales: list[float] = field(default_factory=lambda: [2.0, 3.0, 4.0])
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    def __post_init__(self):
        if not self.levels or not self.ratios or not self.scales:
            raise EmptyConfig("anchor config needs at least one level, ratio and scale")
        if any(l2 <= l1 for l1, l2 in zip(self.levels, self.levels[1:])):
            raise EmptyConfig("anchor levels must be strictly increasing")
        if any(r <= 0 for r in self.ratios) or any(s <= 0 for s in self.scales):
            raise EmptyConfig("anchor ratios and scales must be positive")
        if self.neg_iou > self.pos_iou:
            raise ThresholdOrder(
                f"neg_iou {self.neg_iou} must not exceed pos_iou {self.pos_iou}"
            )

    def to_dict(self) -> dict:
        return {
            "levels": list(self.levels),
            "ratios": list(self.ratios),
            "scales": list(self.scales),
            "pos_iou": self.pos_iou,
            "neg_iou": self.neg_iou,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AnchorConfig":
        return cls(
            levels=list(doc.get("levels", [3, 4, 5, 6, 7])),
            ratios=[float(r) for r in doc.get("ratios", [0.5, 1.0, 2.0])],
            scales=[float(s) for s in doc.get("scales", [2.0, 3.0, 4.0])],
            pos_iou=float(doc.get("pos_iou", 0.5)),
            neg_iou=float(doc.get("neg_iou", 0.4)),
        )


@dataclass
class AnchorSet:
    """All anchors of one image, in the deterministic generation order.

    boxes holds center form (cx, cy, w, h); levels the pyramid index per
    anchor. Order is level-major, then row-major over grid locations, then
    ratio-major, scale-major at each location.
    """

    boxes: np.ndarray
    levels: np.ndarray

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def as_xywh(self) -> np.ndarray:
        """Top-left (x, y, w, h) form used by BBox and the evaluators."""
        out = self.boxes.copy()
        out[:, 0] -= out[:, 2] / 2.0
        out[:, 1] -= out[:, 3] / 2.0
        return out


def generate_anchors(cfg: AnchorConfig, width: int, height: int) -> AnchorSet:
    """Tile anchors over every pyramid level of a width x height image.

    Each level with stride t gets a ceil(W/t) x ceil(H/t) grid of centers
    at ((i+0.5)t, (j+0.5)t); a (scale s, ratio a) anchor there has
    w = s*t/sqrt(a), h = s*t*sqrt(a), so its area is exactly (s*t)**2.
    """
    if width <= 0 or height <= 0:
        raise EmptyConfig(f"image extent must be positive, got {width}x{height}")
    ratios = np.asarray(cfg.ratios, dtype=np.float64)
    scales = np.asarray(cfg.scales, dtype=np.float64)
    # per (ratio, scale) pair, ratio-major then scale-major
    sqrt_a = np.sqrt(ratios)[:, None]
    unit_w = (scales[None, :] / sqrt_a).reshape(-1)
    unit_h = (scales[None, :] * sqrt_a).reshape(-1)

    chunks = []
    level_chunks = []
    for level in cfg.levels:
        stride = float(2**level)
        nx = int(np.ceil(width / stride))
        ny = int(np.ceil(height / stride))
        cx = (np.arange(nx, dtype=np.float64) + 0.5) * stride
        cy = (np.arange(ny, dtype=np.float64) + 0.5) * stride
        # row-major: y outer, x inner
        grid = np.stack(
            [np.tile(cx, ny), np.repeat(cy, nx)], axis=1
        )  # (ny*nx, 2)
        k = unit_w.shape[0]
        centers = np.repeat(grid, k, axis=0)
        wh = np.tile(
            np.stack([unit_w * stride, unit_h * stride], axis=1), (ny * nx, 1)
        )
        chunks.append(np.concatenate([centers, wh], axis=1))
        level_chunks.append(np.full(ny * nx * k, level, dtype=np.int64))
    return AnchorSet(np.concatenate(chunks, axis=0), np.concatenate(level_chunks))


def _as_xywh(box) -> tuple[float, float, float, float]:
    if hasattr(box, "x"):
        return float(box.x), float(box.y), float(box.w), float(box.h)
    x, y, w, h = box
    return float(x), float(y), float(w), float(h)


def iou(a, b) -> float:
    """IoU of two boxes in top-left (x, y, w, h) form.

    Accepts BBox-like objects (with .x/.y/.w/.h) or 4-sequences.
    """
    ax, ay, aw, ah = _as_xywh(a)
    bx, by, bw, bh = _as_xywh(b)
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (N, 4) / (M, 4) arrays in top-left xywh form."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = boxes_a[:, 0], boxes_a[:, 1]
    ax2, ay2 = ax1 + boxes_a[:, 2], ay1 + boxes_a[:, 3]
    bx1, by1 = boxes_b[:, 0], boxes_b[:, 1]
    bx2, by2 = bx1 + boxes_b[:, 2], by1 + boxes_b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (boxes_a[:, 2] * boxes_a[:, 3])[:, None]
    area_b = (boxes_b[:, 2] * boxes_b[:, 3])[None, :]
    return inter / (area_a + area_b - inter)


@dataclass
class Assignment:
    """Per-anchor assignment state against one image's ground truth.

    state holds NEGATIVE / POSITIVE / IGNORE; gt_index the matched ground
    truth for positives (-1 elsewhere); max_iou the best overlap seen.
    """

    state: np.ndarray
    gt_index: np.ndarray
    max_iou: np.ndarray

    @property
    def positive_indices(self) -> np.ndarray:
        return np.nonzero(self.state == POSITIVE)[0]


def assign(
    anchors: AnchorSet,
    gt_boxes: np.ndarray,
    pos_threshold: float = 0.5,
    neg_threshold: float = 0.4,
    ignore_boxes: np.ndarray | None = None,
) -> Assignment:
    """Assign anchors to ground truth by max IoU.

    An anchor is POSITIVE toward its argmax-IoU ground truth when that IoU
    reaches pos_threshold (ties broken by lowest gt index via argmax),
    NEGATIVE below neg_threshold, IGNORE in between. Ignore-flagged ground
    truth never produces positives but suppresses would-be negatives whose
    overlap with it reaches pos_threshold. No forced best-anchor-per-gt
    matching: an unmatched gt simply has no positives.
    """
    if neg_threshold > pos_threshold:
        raise ThresholdOrder(
            f"neg_threshold {neg_threshold} must not exceed pos_threshold {pos_threshold}"
        )
    n = len(anchors)
    anchor_xywh = anchors.as_xywh()
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)

    state = np.full(n, NEGATIVE, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    max_iou = np.zeros(n, dtype=np.float64)

    if gt_boxes.shape[0] > 0:
        overlaps = iou_matrix(anchor_xywh, gt_boxes)
        max_iou = overlaps.max(axis=1)
        best = overlaps.argmax(axis=1)
        pos = max_iou >= pos_threshold
        band = (~pos) & (max_iou >= neg_threshold)
        state[pos] = POSITIVE
        state[band] = IGNORE
        gt_index[pos] = best[pos]

    if ignore_boxes is not None:
        ignore_boxes = np.asarray(ignore_boxes, dtype=np.float64).reshape(-1, 4)
        if ignore_boxes.shape[0] > 0:
            ign_iou = iou_matrix(anchor_xywh, ignore_boxes).max(axis=1)
            suppress = (state != POSITIVE) & (ign_iou >= pos_threshold)
            state[suppress] = IGNORE

    return Assignment(state, gt_index, max_iou)


def regression_targets(anchor_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Encode gt boxes against anchors in center/extent form.

    Both inputs are (N, 4) center-form (cx, cy, w, h) arrays; rows pair up.
    Targets are tx = (gx-ax)/aw, ty = (gy-ay)/ah, tw = ln(gw/aw),
    th = ln(gh/ah).
    """
    anchor_boxes = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(gt_boxes)
    out[:, 0] = (gt_boxes[:, 0] - anchor_boxes[:, 0]) / anchor_boxes[:, 2]
    out[:, 1] = (gt_boxes[:, 1] - anchor_boxes[:, 1]) / anchor_boxes[:, 3]
    out[:, 2] = np.log(gt_boxes[:, 2] / anchor_boxes[:, 2])
    out[:, 3] = np.log(gt_boxes[:, 3] / anchor_boxes[:, 3])
    return out


def decode_deltas(
    anchor_boxes: np.ndarray,
    deltas: np.ndarray,
    clip_to: tuple[float, float] | None = None,
) -> np.ndarray:
    """Invert regression_targets, returning center-form boxes.

    With clip_to=(width, height) the decoded boxes are clipped to the
    image; extents are floored at a tiny epsilon so downstream IoU math
    never sees a degenerate box.
    """
    anchor_boxes = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    out = np.empty_like(deltas)
    out[:, 0] = anchor_boxes[:, 0] + deltas[:, 0] * anchor_boxes[:, 2]
    out[:, 1] = anchor_boxes[:, 1] + deltas[:, 1] * anchor_boxes[:, 3]
    out[:, 2] = anchor_boxes[:, 2] * np.exp(deltas[:, 2])
    out[:, 3] = anchor_boxes[:, 3] * np.exp(deltas[:, 3])
    if clip_to is not None:
        width, height = clip_to
        x1 = np.clip(out[:, 0] - out[:, 2] / 2, 0.0, width)
        y1 = np.clip(out[:, 1] - out[:, 3] / 2, 0.0, height)
        x2 = np.clip(out[:, 0] + out[:, 2] / 2, 0.0, width)
        y2 = np.clip(out[:, 1] + out[:, 3] / 2, 0.0, height)
        out[:, 0] = (x1 + x2) / 2
        out[:, 1] = (y1 + y2) / 2
        out[:, 2] = np.maximum(x2 - x1, 1e-6)
        out[:, 3] = np.maximum(y2 - y1, 1e-6)
    return out
