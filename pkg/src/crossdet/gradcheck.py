"""Central finite-difference verification of every analytic gradient.

The package has no autodiff, so each hand-derived gradient family (focal
term, smooth-L1 term, end-to-end head parameters) is checked against
central differences. Relative error uses a small denominator floor so that
near-zero gradients compare on an absolute scale.
"""

from __future__ import annotations

import numpy as np

from .anchors import Assignment, NEGATIVE, POSITIVE, IGNORE
from .loss import (
    FocalParams,
    LossConfig,
    MASKED,
    NEGATIVE_ACTIVE,
    POSITIVE_TARGET,
    focal_gradient,
    focal_term,
    sigmoid,
    smooth_l1,
    smooth_l1_grad,
)
from .trainer import DetectorHead, _Example, _image_loss_and_grads

_REL_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), _REL_FLOOR)


def check_focal(seed: int = 0, samples: int = 500, step: float = 1e-5) -> tuple[float, int]:
    """Focal term gradient wrt the logit, over random params and states."""
    rng = np.random.default_rng([seed, 11])
    gammas = (0.0, 0.5, 1.0, 2.0, 3.0)
    worst = 0.0
    for i in range(samples):
        params = FocalParams(
            alpha=float(rng.uniform(0.05, 0.9)),
            gamma=gammas[int(rng.integers(len(gammas)))],
            symmetric_alpha=bool(rng.integers(2)),
        )
        state = POSITIVE_TARGET if i % 2 == 0 else NEGATIVE_ACTIVE
        logit = float(rng.uniform(-7.0, 7.0))
        analytic = focal_gradient(float(sigmoid(logit)), state, params)
        hi = focal_term(float(sigmoid(logit + step)), state, params)
        lo = focal_term(float(sigmoid(logit - step)), state, params)
        worst = max(worst, relative_error(analytic, (hi - lo) / (2.0 * step)))
    return worst, samples


def check_smooth_l1(
    seed: int = 0, samples: int = 300, step: float = 1e-6
) -> tuple[float, int]:
    rng = np.random.default_rng([seed, 12])
    betas = (1.0 / 9.0, 0.5, 1.0)
    worst = 0.0
    count = 0
    while count < samples:
        beta = betas[int(rng.integers(len(betas)))]
        x = float(rng.uniform(-1.5, 1.5))
        if abs(abs(x) - beta) < 1e-4:
            continue  # central difference straddles the kink there
        analytic = float(smooth_l1_grad(np.float64(x), beta))
        numeric = float(
            (smooth_l1(np.float64(x + step), beta) - smooth_l1(np.float64(x - step), beta))
            / (2.0 * step)
        )
        worst = max(worst, relative_error(analytic, numeric))
        count += 1
    return worst, count


def _random_example(rng, num_anchors: int, num_classes: int, feature_dim: int) -> _Example:
    features = rng.normal(size=(num_anchors, feature_dim))
    mask = rng.choice(
        [MASKED, NEGATIVE_ACTIVE, POSITIVE_TARGET],
        size=(num_anchors, num_classes),
        p=[0.3, 0.6, 0.1],
    ).astype(np.int8)

    state = rng.choice(
        [NEGATIVE, POSITIVE, IGNORE], size=num_anchors, p=[0.7, 0.15, 0.15]
    ).astype(np.int8)
    gt_index = np.where(state == POSITIVE, rng.integers(0, 3, size=num_anchors), -1)
    assignment = Assignment(state, gt_index, np.zeros(num_anchors))
    targets = np.zeros((num_anchors, 4))
    pos = assignment.positive_indices
    if pos.size:
        targets[pos] = rng.normal(scale=0.5, size=(pos.size, 4))
    return _Example(features, mask, assignment, targets)


def _nudge_targets(example: _Example, head: DetectorHead, beta: float) -> None:
    """Push residuals away from the smooth-L1 kink so FD stays one-sided."""
    pos = example.assignment.positive_indices
    if pos.size == 0:
        return
    deltas = example.features @ head.w_reg.T + head.b_reg
    residual = deltas[pos] - example.reg_targets[pos]
    near = np.abs(np.abs(residual) - beta) < 1e-3
    example.reg_targets[pos] += np.where(near, 5e-3 * np.sign(residual + 1e-12), 0.0)


def check_head(
    seed: int = 0,
    instances: int = 5,
    step: float = 1e-5,
) -> tuple[float, int]:
    """End-to-end parameter gradients of the mean batch loss."""
    rng = np.random.default_rng([seed, 13])
    loss_cfg = LossConfig()
    worst = 0.0
    points = 0
    for _ in range(instances):
        num_anchors, num_classes, feature_dim = 40, 3, 6
        head = DetectorHead.initialize(
            num_classes, feature_dim, seed=int(rng.integers(2**31))
        )
        head.w_cls += rng.normal(scale=0.3, size=head.w_cls.shape)
        head.w_reg += rng.normal(scale=0.3, size=head.w_reg.shape)
        batch = [
            _random_example(rng, num_anchors, num_classes, feature_dim)
            for _ in range(2)
        ]
        for ex in batch:
            _nudge_targets(ex, head, loss_cfg.smooth_l1_beta)

        def batch_loss(h: DetectorHead) -> float:
            return float(
                np.mean([_image_loss_and_grads(h, ex, loss_cfg)[0] for ex in batch])
            )

        grads = [np.zeros_like(p) for p in head.params()]
        for ex in batch:
            _, image_grads = _image_loss_and_grads(head, ex, loss_cfg)
            for g, gi in zip(grads, image_grads):
                g += gi / len(batch)

        for p, g in zip(head.params(), grads):
            flat_p = p.reshape(-1)
            flat_g = g.reshape(-1)
            for j in range(flat_p.size):
                keep = flat_p[j]
                flat_p[j] = keep + step
                hi = batch_loss(head)
                flat_p[j] = keep - step
                lo = batch_loss(head)
                flat_p[j] = keep
                numeric = (hi - lo) / (2.0 * step)
                worst = max(worst, relative_error(float(flat_g[j]), numeric))
                points += 1
    return worst, points


def run_gradcheck(seed: int = 0, tolerance: float = 1e-4) -> dict:
    """Run every gradient family; at least 1000 points total."""
    report: dict = {"tolerance": tolerance, "families": {}}
    total_points = 0
    overall = 0.0
    for name, checker in (
        ("focal", check_focal),
        ("smooth_l1", check_smooth_l1),
        ("head", check_head),
    ):
        worst, points = checker(seed)
        report["families"][name] = {"max_rel_error": worst, "points": points}
        total_points += points
        overall = max(overall, worst)
    report["points"] = total_points
    report["max_rel_error"] = overall
    report["passed"] = bool(overall <= tolerance)
    return report
