"""Linear detection head trained by SGD with hand-derived gradients.

The head is a pair of affine maps over per-anchor features: class logits
(K x F weights) and shared box deltas (4 x F). Gradients flow through the
dataset-aware focal loss and the smooth-L1 box loss analytically; there is
no autodiff anywhere, which is why the finite-difference gradcheck suite
exists.

Training modes:
  dataset-aware  masked loss built from the conflict relation
  naive-concat   every (anchor, class) entry active, no avoidance
  solo:<name>    dataset-aware loss restricted to one dataset's images
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .anchors import (
    AnchorConfig,
    AnchorSet,
    Assignment,
    assign,
    decode_deltas,
    generate_anchors,
    iou_matrix,
    regression_targets,
)
from .errors import (
    ConfigError,
    DimensionMismatch,
    DivergedLoss,
    EmptyConfig,
    NonFiniteLogit,
    UnknownDataset,
)
from .evaluation import Detection
from .ingest import BBox, HybridManifest
from .loss import (
    LossConfig,
    build_loss_mask,
    build_naive_mask,
    classification_loss,
    regression_loss,
    sigmoid,
)

_STREAM_INIT = 4
_STREAM_BATCH = 5

MODE_AWARE = "dataset-aware"
MODE_NAIVE = "naive-concat"
_SOLO_PREFIX = "solo:"


@dataclass
class DetectorHead:
    """Affine classification and box-regression maps over anchor features."""

    w_cls: np.ndarray  # (K, F)
    b_cls: np.ndarray  # (K,)
    w_reg: np.ndarray  # (4, F)
    b_reg: np.ndarray  # (4,)

    @classmethod
    def initialize(
        cls,
        num_classes: int,
        feature_dim: int,
        seed: int = 0,
        weight_scale: float = 0.01,
        prior: float = 0.01,
    ) -> "DetectorHead":
        """Small random weights; class bias set so sigmoid starts at prior.

        Starting every class probability near the prior keeps the first
        steps from being swamped by background terms.
        """
        rng = np.random.default_rng([seed, _STREAM_INIT])
        b0 = -float(np.log((1.0 - prior) / prior))
        return cls(
            w_cls=weight_scale * rng.normal(size=(num_classes, feature_dim)),
            b_cls=np.full(num_classes, b0, dtype=np.float64),
            w_reg=weight_scale * rng.normal(size=(4, feature_dim)),
            b_reg=np.zeros(4, dtype=np.float64),
        )

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w_cls.shape[1]

    def params(self) -> list:
        return [self.w_cls, self.b_cls, self.w_reg, self.b_reg]

    def copy(self) -> "DetectorHead":
        return DetectorHead(*(p.copy() for p in self.params()))


def forward(head: DetectorHead, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor logits and box deltas: exact affine maps."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != head.feature_dim:
        raise DimensionMismatch(
            f"features of shape {features.shape} do not match "
            f"feature_dim {head.feature_dim}"
        )
    logits = features @ head.w_cls.T + head.b_cls
    deltas = features @ head.w_reg.T + head.b_reg
    return logits, deltas


@dataclass
class TrainConfig:
    """Desk-scale SGD schedule; see reference_schedule for the full-scale one."""

    base_lr: float = 0.05
    decay_steps: tuple = (600, 850)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    warmup_steps: int = 50
    total_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be non-negative, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ConfigError("warmup_steps must be >= 0 and total_steps >= 1")
        if self.decay_factor <= 0:
            raise ConfigError(f"decay_factor must be positive, got {self.decay_factor}")
        self.decay_steps = tuple(int(s) for s in self.decay_steps)

    def learning_rate(self, step: int) -> float:
        """Linear warm-up from 0.1*base_lr, then stepwise decay."""
        lr = self.base_lr * self.decay_factor ** sum(
            1 for s in self.decay_steps if step >= s
        )
        if self.warmup_steps > 0 and step < self.warmup_steps:
            lr *= 0.1 + 0.9 * (step / self.warmup_steps)
        return lr

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr,
            "decay_steps": list(self.decay_steps),
            "decay_factor": self.decay_factor,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "warmup_steps": self.warmup_steps,
            "total_steps": self.total_steps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TrainConfig":
        kwargs = dict(doc)
        if "decay_steps" in kwargs:
            kwargs["decay_steps"] = tuple(kwargs["decay_steps"])
        return cls(**kwargs)


def reference_schedule(steps_per_epoch: int, seed: int = 0) -> TrainConfig:
    """Full-scale schedule kept for documentation fidelity: SGD momentum
    0.9, weight decay 1e-4, batch 32, lr 0.04 with x0.1 decays after epochs
    10 and 16 of 20, first two epochs as warm-up."""
    return TrainConfig(
        base_lr=0.04,
        decay_steps=(10 * steps_per_epoch, 16 * steps_per_epoch),
        decay_factor=0.1,
        momentum=0.9,
        weight_decay=1e-4,
        batch_size=32,
        warmup_steps=2 * steps_per_epoch,
        total_steps=20 * steps_per_epoch,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# training examples


@dataclass
class _Example:
    """Everything per-image that does not depend on head parameters."""

    features: np.ndarray      # (A, F)
    mask: np.ndarray          # (A, K)
    assignment: Assignment
    reg_targets: np.ndarray   # (A, 4), rows defined at positive anchors


def _gt_arrays(record) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    real = [a for a in record.annotations if not a.ignore]
    ignored = [a for a in record.annotations if a.ignore]
    boxes = np.array([a.bbox.as_tuple() for a in real], dtype=np.float64).reshape(-1, 4)
    classes = np.array([a.hybrid_class for a in real], dtype=np.int64)
    ign = np.array(
        [a.bbox.as_tuple() for a in ignored], dtype=np.float64
    ).reshape(-1, 4)
    return boxes, classes, ign


def _xywh_to_center(boxes: np.ndarray) -> np.ndarray:
    out = boxes.copy()
    out[:, 0] += out[:, 2] / 2.0
    out[:, 1] += out[:, 3] / 2.0
    return out


def build_example(
    record,
    features: np.ndarray,
    anchors: AnchorSet,
    manifest: HybridManifest,
    loss_cfg: LossConfig,
    anchor_cfg: AnchorConfig,
    naive: bool,
) -> _Example:
    gt_boxes, gt_classes, ignore_boxes = _gt_arrays(record)
    assignment = assign(
        anchors, gt_boxes, anchor_cfg.pos_iou, anchor_cfg.neg_iou, ignore_boxes
    )
    if naive:
        mask = build_naive_mask(assignment, gt_classes, len(manifest.label_space))
    else:
        mask = build_loss_mask(
            assignment,
            record.dataset,
            gt_classes,
            manifest.label_space,
            manifest.conflicts,
            loss_cfg.cross_positive_as_negative,
        )
    targets = np.zeros((len(anchors), 4), dtype=np.float64)
    pos = assignment.positive_indices
    if pos.size:
        gt_center = _xywh_to_center(gt_boxes)
        targets[pos] = regression_targets(
            anchors.boxes[pos], gt_center[assignment.gt_index[pos]]
        )
    return _Example(np.asarray(features, dtype=np.float64), mask, assignment, targets)


def _image_loss_and_grads(
    head: DetectorHead, example: _Example, loss_cfg: LossConfig
) -> tuple[float, list]:
    logits, deltas = forward(head, example.features)
    cls_loss, g_logits = classification_loss(logits, example.mask, loss_cfg.focal)
    reg_loss, g_deltas = regression_loss(
        deltas, example.reg_targets, example.assignment, loss_cfg.smooth_l1_beta
    )
    lam = loss_cfg.lambda_reg
    total = cls_loss + lam * reg_loss
    x = example.features
    grads = [
        g_logits.T @ x,
        g_logits.sum(axis=0),
        lam * (g_deltas.T @ x),
        lam * g_deltas.sum(axis=0),
    ]
    return total, grads


def parse_mode(mode: str, manifest: HybridManifest) -> tuple[bool, str | None]:
    """Returns (naive, solo_dataset)."""
    if mode == MODE_AWARE:
        return False, None
    if mode == MODE_NAIVE:
        return True, None
    if mode.startswith(_SOLO_PREFIX):
        name = mode[len(_SOLO_PREFIX):]
        if not manifest.label_space.has_dataset(name):
            raise UnknownDataset(f"solo mode names unknown dataset {name!r}")
        return False, name
    raise ConfigError(
        f"unknown training mode {mode!r}; expected {MODE_AWARE!r}, "
        f"{MODE_NAIVE!r}, or '{_SOLO_PREFIX}<dataset>'"
    )


def train(
    manifest: HybridManifest,
    features_of: Callable,
    anchor_cfg: AnchorConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    mode: str = MODE_AWARE,
    head: DetectorHead | None = None,
) -> tuple[DetectorHead, list]:
    """SGD over per-image losses; returns the head and per-step loss history.

    The batch loss is the mean of per-image totals; gradients accumulate in
    the drawn image order so runs are bit-reproducible given the seed.
    Raises DivergedLoss the moment a non-finite loss shows up.
    """
    naive, solo = parse_mode(mode, manifest)
    records = [
        rec for rec in manifest.images if solo is None or rec.dataset == solo
    ]
    if not records:
        raise EmptyConfig(f"no training images for mode {mode!r}")

    anchor_cache: dict = {}
    examples = []
    for rec in records:
        key = (rec.width, rec.height)
        if key not in anchor_cache:
            anchor_cache[key] = generate_anchors(anchor_cfg, rec.width, rec.height)
        anchors = anchor_cache[key]
        examples.append(
            build_example(
                rec, features_of(rec, anchors), anchors, manifest,
                loss_cfg, anchor_cfg, naive,
            )
        )

    feature_dim = examples[0].features.shape[1]
    num_classes = len(manifest.label_space)
    if head is None:
        head = DetectorHead.initialize(num_classes, feature_dim, train_cfg.seed)
    else:
        head = head.copy()
    velocity = [np.zeros_like(p) for p in head.params()]

    batch_rng = np.random.default_rng([train_cfg.seed, _STREAM_BATCH])
    queue: list = []
    history = []
    for step in range(train_cfg.total_steps):
        while len(queue) < train_cfg.batch_size:
            queue.extend(batch_rng.permutation(len(examples)).tolist())
        batch, queue = queue[: train_cfg.batch_size], queue[train_cfg.batch_size:]

        params = head.params()
        grads = [np.zeros_like(p) for p in params]
        loss_sum = 0.0
        for idx in batch:
            try:
                total, image_grads = _image_loss_and_grads(
                    head, examples[idx], loss_cfg
                )
            except NonFiniteLogit as exc:
                raise DivergedLoss(f"non-finite logits at step {step}") from exc
            loss_sum += total
            for g, gi in zip(grads, image_grads):
                g += gi
        batch_loss = loss_sum / train_cfg.batch_size
        if not np.isfinite(batch_loss):
            raise DivergedLoss(f"non-finite loss {batch_loss!r} at step {step}")

        lr = train_cfg.learning_rate(step)
        for p, v, g in zip(params, velocity, grads):
            g /= train_cfg.batch_size
            g += train_cfg.weight_decay * p
            v *= train_cfg.momentum
            v += g
            p -= lr * v
        history.append(float(batch_loss))
    return head, history


# ---------------------------------------------------------------------------
# inference


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy per-class suppression; overlap >= iou_threshold removes a box.

    Returns kept indices in descending-score order (stable on ties).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if order.size == 0:
        return order
    overlaps = iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(order.size, dtype=bool)
    keep = []
    for i in range(order.size):
        if suppressed[i]:
            continue
        keep.append(order[i])
        mark = overlaps[i] >= iou_threshold
        mark[i] = False  # a box never suppresses itself
        suppressed |= mark
    return np.asarray(keep, dtype=np.int64)


def infer(
    head: DetectorHead,
    features: np.ndarray,
    anchors: AnchorSet,
    image_id: int,
    canvas: tuple[float, float],
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    max_dets: int = 100,
    pre_nms_top: int = 1000,
) -> list[Detection]:
    """Decode one image's head outputs into scored, suppressed detections.

    Per class: sigmoid scores at or above the threshold survive, the shared
    deltas decode against their anchors with clipping to the canvas, then
    greedy NMS runs per class and the image keeps its top max_dets overall.
    """
    if not 0.0 < score_threshold < 1.0:
        raise ConfigError(
            f"score_threshold must be in (0, 1), got {score_threshold}"
        )
    logits, deltas = forward(head, features)
    probs = sigmoid(logits)
    decoded = decode_deltas(anchors.boxes, deltas, clip_to=canvas)
    decoded_xywh = decoded.copy()
    decoded_xywh[:, 0] -= decoded_xywh[:, 2] / 2.0
    decoded_xywh[:, 1] -= decoded_xywh[:, 3] / 2.0

    candidates = []  # (score, class, rank-within-class, box)
    for c in range(head.num_classes):
        sel = np.nonzero(probs[:, c] >= score_threshold)[0]
        if sel.size == 0:
            continue
        order = sel[np.argsort(-probs[sel, c], kind="stable")][:pre_nms_top]
        kept = nms(decoded_xywh[order], probs[order, c], nms_iou)
        for rank, local in enumerate(kept):
            a = order[local]
            candidates.append((float(probs[a, c]), c, rank, decoded_xywh[a]))
    candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [
        Detection(image_id, c, BBox(*(float(v) for v in box)), score)
        for score, c, _, box in candidates[:max_dets]
    ]


def run_inference(
    head: DetectorHead,
    manifest: HybridManifest,
    features_of: Callable,
    anchor_cfg: AnchorConfig,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    max_dets: int = 100,
) -> list[Detection]:
    """Inference over every manifest image, in manifest order."""
    anchor_cache: dict = {}
    detections = []
    for rec in manifest.images:
        key = (rec.width, rec.height)
        if key not in anchor_cache:
            anchor_cache[key] = generate_anchors(anchor_cfg, rec.width, rec.height)
        anchors = anchor_cache[key]
        detections.extend(
            infer(
                head,
                features_of(rec, anchors),
                anchors,
                rec.image_id,
                (float(rec.width), float(rec.height)),
                score_threshold,
                nms_iou,
                max_dets,
            )
        )
    return detections


# ---------------------------------------------------------------------------
# checkpoints and histories


def config_fingerprint(doc: Mapping) -> str:
    """sha256 over the canonical JSON encoding of a config document."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def checkpoint_to_dict(head: DetectorHead, fingerprint: str) -> dict:
    return {
        "version": 1,
        "fingerprint": fingerprint,
        "num_classes": head.num_classes,
        "feature_dim": head.feature_dim,
        "w_cls": head.w_cls.tolist(),
        "b_cls": head.b_cls.tolist(),
        "w_reg": head.w_reg.tolist(),
        "b_reg": head.b_reg.tolist(),
    }


def checkpoint_from_dict(doc: Mapping) -> tuple[DetectorHead, str]:
    head = DetectorHead(
        np.asarray(doc["w_cls"], dtype=np.float64),
        np.asarray(doc["b_cls"], dtype=np.float64),
        np.asarray(doc["w_reg"], dtype=np.float64),
        np.asarray(doc["b_reg"], dtype=np.float64),
    )
    if head.w_cls.shape != (doc["num_classes"], doc["feature_dim"]):
        raise DimensionMismatch("checkpoint arrays disagree with declared shape")
    return head, doc["fingerprint"]


def history_to_csv(history: Sequence[float]) -> str:
    lines = ["step,loss"]
    lines.extend(f"{i},{repr(float(v))}" for i, v in enumerate(history))
    return "\n".join(lines) + "\n"
