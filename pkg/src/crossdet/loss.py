"""Dataset-aware focal classification loss and shared box regression loss.

The classification loss is a focal loss whose per-(anchor, class) activation
state comes from a mask built against the dataset avoidance relation:
background negatives only supervise classes whose source datasets do not
conflict with the image's dataset, and masked entries contribute exactly
zero loss and zero gradient. Ground-truth patches of one dataset act as
negatives for all other classes (switchable). Gradients are hand-derived;
no autodiff anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import Assignment, IGNORE, NEGATIVE, POSITIVE
from .errors import NonFiniteLogit
from .label_space import ConflictMatrix, HybridLabelSpace, class_sources_active_for

# LossMask entry states
MASKED = 0
NEGATIVE_ACTIVE = 1
POSITIVE_TARGET = 2


@dataclass
class FocalParams:
    """Focal loss weights. alpha in (0,1); gamma >= 0.

    symmetric_alpha=False applies the usual (1-alpha) weight to negatives;
    True weighs positives and negatives by the same alpha. prob_clamp keeps
    probabilities in [clamp, 1-clamp] before any log.
    """

    alpha: float = 0.25
    gamma: float = 2.0
    symmetric_alpha: bool = False
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0,1), got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.prob_clamp < 0.5:
            raise ValueError(f"prob_clamp must lie in (0, 0.5), got {self.prob_clamp}")

    @property
    def negative_alpha(self) -> float:
        return self.alpha if self.symmetric_alpha else 1.0 - self.alpha


@dataclass
class LossConfig:
    """All loss knobs carried by the training config file."""

    focal: FocalParams = field(default_factory=FocalParams)
    lambda_reg: float = 1.0
    smooth_l1_beta: float = 1.0 / 9.0
    cross_positive_as_negative: bool = True

    @classmethod
    def from_dict(cls, doc: dict) -> "LossConfig":
        focal = FocalParams(
            alpha=float(doc.get("alpha", 0.25)),
            gamma=float(doc.get("gamma", 2.0)),
            symmetric_alpha=bool(doc.get("symmetric_alpha", False)),
            prob_clamp=float(doc.get("prob_clamp", 1e-7)),
        )
        return cls(
            focal=focal,
            lambda_reg=float(doc.get("lambda_reg", 1.0)),
            smooth_l1_beta=float(doc.get("smooth_l1_beta", 1.0 / 9.0)),
            cross_positive_as_negative=bool(doc.get("cross_positive_as_negative", True)),
        )

    def to_dict(self) -> dict:
        return {
            "alpha": self.focal.alpha,
            "gamma": self.focal.gamma,
            "symmetric_alpha": self.focal.symmetric_alpha,
            "prob_clamp": self.focal.prob_clamp,
            "lambda_reg": self.lambda_reg,
            "smooth_l1_beta": self.smooth_l1_beta,
            "cross_positive_as_negative": self.cross_positive_as_negative,
        }


@dataclass
class LossValue:
    classification: float
    regression: float
    normalizer: int

    def total(self, lambda_reg: float = 1.0) -> float:
        return self.classification + lambda_reg * self.regression


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def build_loss_mask(
    assignment: Assignment,
    image_dataset: str,
    gt_classes: np.ndarray,
    space: HybridLabelSpace,
    conflicts: ConflictMatrix,
    cross_positive_as_negative: bool = True,
) -> np.ndarray:
    """Per-(anchor, class) activation states for one image.

    Positive anchors target their gt class and, by default, act as active
    negatives for every other class regardless of dataset. Background
    (negative) anchors are active only for classes some source dataset of
    which is compatible with the image's dataset; the rest are masked.
    Ignore anchors are masked everywhere.
    """
    num_classes = len(space)
    active = np.array(
        [
            class_sources_active_for(space, conflicts, c, image_dataset)
            for c in range(num_classes)
        ],
        dtype=bool,
    )
    background_row = np.where(active, NEGATIVE_ACTIVE, MASKED).astype(np.int8)

    mask = np.zeros((len(assignment.state), num_classes), dtype=np.int8)
    mask[assignment.state == NEGATIVE] = background_row

    pos_idx = assignment.positive_indices
    if pos_idx.size:
        gt_classes = np.asarray(gt_classes, dtype=np.int64)
        if cross_positive_as_negative:
            mask[pos_idx] = NEGATIVE_ACTIVE
        else:
            mask[pos_idx] = background_row
        mask[pos_idx, gt_classes[assignment.gt_index[pos_idx]]] = POSITIVE_TARGET
    return mask


def build_naive_mask(
    assignment: Assignment, gt_classes: np.ndarray, num_classes: int
) -> np.ndarray:
    """Mask for plain label concatenation: every entry active, no avoidance.

    Matches build_loss_mask under an all-compatible conflict relation;
    ignore anchors stay masked since the IoU band has nothing to do with
    dataset provenance.
    """
    mask = np.full((len(assignment.state), num_classes), NEGATIVE_ACTIVE, dtype=np.int8)
    mask[assignment.state == IGNORE] = MASKED
    pos_idx = assignment.positive_indices
    if pos_idx.size:
        gt_classes = np.asarray(gt_classes, dtype=np.int64)
        mask[pos_idx, gt_classes[assignment.gt_index[pos_idx]]] = POSITIVE_TARGET
    return mask


def _clamp(p: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(p, eps, 1.0 - eps)


def focal_term(p: float, state: int, params: FocalParams) -> float:
    """Focal loss of a single (anchor, class) entry at probability p.

    PositiveTarget: -alpha * (1-p)**gamma * ln(p). NegativeActive: the
    mirrored term at 1-p with the negative alpha weight. Masked entries are
    exactly zero, matching a target probability forced to one.
    """
    if state == MASKED:
        return 0.0
    p = float(_clamp(np.float64(p), params.prob_clamp))
    if state == POSITIVE_TARGET:
        return -params.alpha * (1.0 - p) ** params.gamma * np.log(p)
    return -params.negative_alpha * p**params.gamma * np.log1p(-p)


def focal_gradient(p: float, state: int, params: FocalParams) -> float:
    """d(focal_term)/d(logit) at p = sigmoid(logit).

    Exactly zero for masked entries and wherever the probability clamp is
    active (the clamped term is constant in the logit there).
    """
    if state == MASKED:
        return 0.0
    p = float(p)
    eps = params.prob_clamp
    if p <= eps or p >= 1.0 - eps:
        return 0.0
    a, g = params.alpha, params.gamma
    q = 1.0 - p
    if state == POSITIVE_TARGET:
        return a * g * p * q**g * np.log(p) - a * q ** (g + 1.0)
    an = params.negative_alpha
    return -an * g * p**g * q * np.log1p(-p) + an * p ** (g + 1.0)


def classification_loss(
    logits: np.ndarray, mask: np.ndarray, params: FocalParams
) -> tuple[float, np.ndarray]:
    """Total dataset-aware focal loss and its gradient wrt the logits.

    Sums focal terms over all non-masked entries and divides by
    max(1, number of positive entries). Masked entries are never touched,
    so their loss contribution and gradient are zero bit-exactly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise NonFiniteLogit("classification loss received non-finite logits")
    mask = np.asarray(mask)
    eps = params.prob_clamp
    grad = np.zeros_like(logits)
    normalizer = max(1, int((mask == POSITIVE_TARGET).sum()))

    total = 0.0
    for state in (POSITIVE_TARGET, NEGATIVE_ACTIVE):
        sel = mask == state
        if not sel.any():
            continue
        p_raw = sigmoid(logits[sel])
        p = _clamp(p_raw, eps)
        q = 1.0 - p
        live = (p_raw > eps) & (p_raw < 1.0 - eps)
        a, g = params.alpha, params.gamma
        if state == POSITIVE_TARGET:
            total += float(np.sum(-a * q**g * np.log(p)))
            gsel = a * g * p * q**g * np.log(p) - a * q ** (g + 1.0)
        else:
            an = params.negative_alpha
            total += float(np.sum(-an * p**g * np.log1p(-p)))
            gsel = -an * g * p**g * q * np.log1p(-p) + an * p ** (g + 1.0)
        grad[sel] = np.where(live, gsel, 0.0)

    return total / normalizer, grad / normalizer


def smooth_l1(x: np.ndarray, beta: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def smooth_l1_grad(x: np.ndarray, beta: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def regression_loss(
    pred_deltas: np.ndarray,
    target_deltas: np.ndarray,
    assignment: Assignment,
    beta: float = 1.0 / 9.0,
) -> tuple[float, np.ndarray]:
    """Smooth-L1 box loss over positive anchors, shared across classes.

    Sums smoothL1(pred - target) over the positive anchors' four delta
    components and divides by max(1, positives). The gradient is zero at
    every non-positive anchor.
    """
    pred_deltas = np.asarray(pred_deltas, dtype=np.float64)
    grad = np.zeros_like(pred_deltas)
    pos = assignment.positive_indices
    normalizer = max(1, pos.size)
    if pos.size == 0:
        return 0.0, grad
    residual = pred_deltas[pos] - np.asarray(target_deltas, dtype=np.float64)[pos]
    loss = float(np.sum(smooth_l1(residual, beta))) / normalizer
    grad[pos] = smooth_l1_grad(residual, beta) / normalizer
    return loss, grad
