"""Dataset-aware focal loss, masks, and smooth-L1 regression."""

import math

import numpy as np
import pytest

from crossdet.anchors import Assignment, IGNORE, NEGATIVE, POSITIVE
from crossdet.errors import NonFiniteLogit
from crossdet.label_space import (
    ALL_COMPATIBLE,
    ConflictMatrix,
    MergeGroup,
    build_label_space,
)
from crossdet.loss import (
    MASKED,
    NEGATIVE_ACTIVE,
    POSITIVE_TARGET,
    FocalParams,
    LossConfig,
    LossValue,
    build_loss_mask,
    build_naive_mask,
    classification_loss,
    focal_gradient,
    focal_term,
    regression_loss,
    sigmoid,
    smooth_l1,
    smooth_l1_grad,
)


def plain_focal(p, target, alpha, gamma):
    """Textbook binary focal loss, written independently from scratch."""
    if target == 1:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p**gamma * math.log(1.0 - p)


def make_assignment(states, gt_index=None):
    states = np.asarray(states, dtype=np.int8)
    if gt_index is None:
        gt_index = np.full(len(states), -1, dtype=np.int64)
    return Assignment(
        state=states,
        gt_index=np.asarray(gt_index, dtype=np.int64),
        max_iou=np.zeros(len(states)),
    )


def two_dataset_space(policy=None):
    space = build_label_space({"dsa": ["person"], "dsb": ["car"]})
    if policy is None:
        conflicts = ConflictMatrix(["dsa", "dsb"])
    else:
        conflicts = ConflictMatrix(["dsa", "dsb"], default_policy=policy)
    return space, conflicts


class TestFocalTerm:
    def test_positive_hand_value_confident(self):
        """p=0.9 positive at alpha 0.25, gamma 2: 2.634e-4."""
        got = focal_term(0.9, POSITIVE_TARGET, FocalParams())
        np.testing.assert_allclose(got, 2.634e-4, rtol=1e-4)
        np.testing.assert_allclose(
            got, -0.25 * (1.0 - 0.9) ** 2 * math.log(0.9), rtol=1e-12
        )

    def test_positive_hand_value_half(self):
        """p=0.5 positive: 0.25 * 0.25 * ln 2."""
        got = focal_term(0.5, POSITIVE_TARGET, FocalParams())
        assert abs(got - 0.25 * 0.25 * math.log(2.0)) < 1e-15

    def test_negative_mirrors_positive(self):
        """Negative at p equals positive at 1-p up to the alpha swap."""
        params = FocalParams()
        rng = np.random.default_rng(3)
        for p in rng.uniform(0.01, 0.99, 50):
            neg = focal_term(p, NEGATIVE_ACTIVE, params)
            pos = focal_term(1.0 - p, POSITIVE_TARGET, params)
            np.testing.assert_allclose(neg, pos * (0.75 / 0.25), rtol=1e-12)

    def test_matches_plain_focal_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            p = float(rng.uniform(0.001, 0.999))
            alpha = float(rng.uniform(0.05, 0.95))
            gamma = float(rng.uniform(0.0, 4.0))
            params = FocalParams(alpha=alpha, gamma=gamma)
            np.testing.assert_allclose(
                focal_term(p, POSITIVE_TARGET, params),
                plain_focal(p, 1, alpha, gamma),
                rtol=1e-12,
            )
            np.testing.assert_allclose(
                focal_term(p, NEGATIVE_ACTIVE, params),
                plain_focal(p, 0, alpha, gamma),
                rtol=1e-12,
            )

    def test_masked_is_exact_zero(self):
        assert focal_term(0.3, MASKED, FocalParams()) == 0.0

    def test_symmetric_alpha(self):
        params = FocalParams(symmetric_alpha=True)
        np.testing.assert_allclose(
            focal_term(0.4, NEGATIVE_ACTIVE, params),
            -0.25 * 0.4**2 * math.log(0.6),
            rtol=1e-12,
        )

    def test_clamp_bounds_extreme_probabilities(self):
        """p=0 would blow up the log; the clamp keeps it finite."""
        v = focal_term(0.0, POSITIVE_TARGET, FocalParams())
        assert math.isfinite(v)
        np.testing.assert_allclose(
            v, -0.25 * (1 - 1e-7) ** 2 * math.log(1e-7), rtol=1e-9
        )

    def test_param_validation(self):
        with pytest.raises(ValueError):
            FocalParams(alpha=0.0)
        with pytest.raises(ValueError):
            FocalParams(gamma=-1.0)
        with pytest.raises(ValueError):
            FocalParams(prob_clamp=0.7)


class TestFocalGradient:
    def test_finite_difference_sweep(self):
        """Analytic d/dlogit agrees with central differences at 1e-5
        relative over 1000 random (logit, state, alpha, gamma) tuples."""
        rng = np.random.default_rng(11)
        h = 1e-6
        for _ in range(1000):
            logit = float(rng.uniform(-6.0, 6.0))
            state = POSITIVE_TARGET if rng.random() < 0.5 else NEGATIVE_ACTIVE
            params = FocalParams(
                alpha=float(rng.uniform(0.1, 0.9)),
                gamma=float(rng.uniform(0.0, 4.0)),
            )
            p = float(sigmoid(logit))
            got = focal_gradient(p, state, params)
            hi = focal_term(float(sigmoid(logit + h)), state, params)
            lo = focal_term(float(sigmoid(logit - h)), state, params)
            fd = (hi - lo) / (2.0 * h)
            scale = max(abs(fd), 1e-8)
            assert abs(got - fd) / scale <= 1e-5

    def test_masked_gradient_zero(self):
        assert focal_gradient(0.7, MASKED, FocalParams()) == 0.0

    def test_clamped_region_gradient_zero(self):
        params = FocalParams()
        assert focal_gradient(1e-9, POSITIVE_TARGET, params) == 0.0
        assert focal_gradient(1.0 - 1e-9, NEGATIVE_ACTIVE, params) == 0.0

    def test_gradient_signs(self):
        """A positive target pulls the logit up, a negative pushes down."""
        params = FocalParams()
        assert focal_gradient(0.3, POSITIVE_TARGET, params) < 0
        assert focal_gradient(0.7, NEGATIVE_ACTIVE, params) > 0


class TestBuildLossMask:
    def test_negative_anchor_conflicting_dataset(self):
        """Background in a dsa image supervises person but not car."""
        space, conflicts = two_dataset_space()
        a = make_assignment([NEGATIVE])
        mask = build_loss_mask(a, "dsa", np.zeros(0, dtype=int), space, conflicts)
        assert mask[0, 0] == NEGATIVE_ACTIVE
        assert mask[0, 1] == MASKED

    def test_negative_anchor_compatible_dataset(self):
        space, conflicts = two_dataset_space(ALL_COMPATIBLE)
        a = make_assignment([NEGATIVE])
        mask = build_loss_mask(a, "dsa", np.zeros(0, dtype=int), space, conflicts)
        assert (mask[0] == NEGATIVE_ACTIVE).all()

    def test_positive_anchor_targets_gt_class(self):
        space, conflicts = two_dataset_space()
        a = make_assignment([POSITIVE], gt_index=[0])
        mask = build_loss_mask(a, "dsa", np.array([0]), space, conflicts)
        assert mask[0, 0] == POSITIVE_TARGET
        # labeled patches act as negatives even for foreign classes
        assert mask[0, 1] == NEGATIVE_ACTIVE

    def test_positive_anchor_cross_flag_off(self):
        space, conflicts = two_dataset_space()
        a = make_assignment([POSITIVE], gt_index=[0])
        mask = build_loss_mask(
            a, "dsa", np.array([0]), space, conflicts,
            cross_positive_as_negative=False,
        )
        assert mask[0, 0] == POSITIVE_TARGET
        assert mask[0, 1] == MASKED

    def test_ignore_anchor_fully_masked(self):
        space, conflicts = two_dataset_space()
        a = make_assignment([IGNORE])
        mask = build_loss_mask(a, "dsa", np.zeros(0, dtype=int), space, conflicts)
        assert (mask[0] == MASKED).all()

    def test_merged_class_active_for_both_sources(self):
        space = build_label_space(
            {"dsa": ["person"], "dsb": ["pedestrian"]},
            [MergeGroup((("dsa", "person"), ("dsb", "pedestrian")))],
        )
        conflicts = ConflictMatrix(["dsa", "dsb"])
        a = make_assignment([NEGATIVE])
        for ds in ("dsa", "dsb"):
            mask = build_loss_mask(a, ds, np.zeros(0, dtype=int), space, conflicts)
            assert mask[0, 0] == NEGATIVE_ACTIVE

    def test_mask_shape_and_mixed_states(self):
        space, conflicts = two_dataset_space()
        a = make_assignment(
            [NEGATIVE, POSITIVE, IGNORE, NEGATIVE], gt_index=[-1, 1, -1, -1]
        )
        gt_classes = np.array([0, 1])
        mask = build_loss_mask(a, "dsb", gt_classes, space, conflicts)
        assert mask.shape == (4, 2)
        assert mask[1, 1] == POSITIVE_TARGET
        assert (mask[2] == MASKED).all()
        # dsb background supervises car only
        assert mask[0, 0] == MASKED and mask[0, 1] == NEGATIVE_ACTIVE


class TestBuildNaiveMask:
    def test_everything_active(self):
        a = make_assignment([NEGATIVE, NEGATIVE])
        mask = build_naive_mask(a, np.zeros(0, dtype=int), 3)
        assert (mask == NEGATIVE_ACTIVE).all()

    def test_ignore_still_masked(self):
        a = make_assignment([IGNORE])
        mask = build_naive_mask(a, np.zeros(0, dtype=int), 2)
        assert (mask == MASKED).all()

    def test_positive_target_placed(self):
        a = make_assignment([POSITIVE], gt_index=[0])
        mask = build_naive_mask(a, np.array([2]), 4)
        assert mask[0, 2] == POSITIVE_TARGET
        assert mask[0, 0] == NEGATIVE_ACTIVE

    def test_agrees_with_all_compatible_mask(self):
        """Naive concatenation equals the aware mask when nothing
        conflicts, except ignore handling which is identical anyway."""
        space, conflicts = two_dataset_space(ALL_COMPATIBLE)
        rng = np.random.default_rng(13)
        for _ in range(20):
            states = rng.choice([NEGATIVE, POSITIVE, IGNORE], size=12)
            gt_classes = rng.integers(0, 2, size=4)
            gt_index = np.where(
                states == POSITIVE, rng.integers(0, 4, size=12), -1
            )
            a = make_assignment(states, gt_index)
            aware = build_loss_mask(a, "dsa", gt_classes, space, conflicts)
            naive = build_naive_mask(a, gt_classes, 2)
            assert (aware == naive).all()


class TestClassificationLoss:
    def test_masked_entries_bit_exact_zero_gradient(self):
        rng = np.random.default_rng(17)
        logits = rng.normal(0, 3, size=(40, 5))
        mask = rng.choice(
            [MASKED, NEGATIVE_ACTIVE, POSITIVE_TARGET], size=(40, 5),
            p=[0.5, 0.4, 0.1],
        )
        _, grad = classification_loss(logits, mask, FocalParams())
        assert (grad[mask == MASKED] == 0.0).all()

    def test_masked_perturbation_invariance(self):
        """Rewriting logits under masked entries changes nothing, bit for
        bit, in either the loss or the gradient."""
        rng = np.random.default_rng(19)
        for _ in range(30):
            logits = rng.normal(0, 3, size=(25, 4))
            mask = rng.choice(
                [MASKED, NEGATIVE_ACTIVE, POSITIVE_TARGET], size=(25, 4),
                p=[0.4, 0.5, 0.1],
            )
            loss_a, grad_a = classification_loss(logits, mask, FocalParams())
            perturbed = logits.copy()
            perturbed[mask == MASKED] = rng.normal(0, 50, size=int((mask == MASKED).sum()))
            loss_b, grad_b = classification_loss(perturbed, mask, FocalParams())
            assert loss_a == loss_b
            assert (grad_a == grad_b).all()

    def test_matches_scalar_sum(self):
        """Vectorized loss equals the sum of per-entry focal terms over
        the positive-count normalizer."""
        rng = np.random.default_rng(23)
        logits = rng.normal(0, 2, size=(10, 3))
        mask = rng.choice(
            [MASKED, NEGATIVE_ACTIVE, POSITIVE_TARGET], size=(10, 3)
        )
        params = FocalParams()
        total = 0.0
        for i in range(10):
            for j in range(3):
                total += focal_term(
                    float(sigmoid(logits[i, j])), int(mask[i, j]), params
                )
        norm = max(1, int((mask == POSITIVE_TARGET).sum()))
        loss, _ = classification_loss(logits, mask, params)
        np.testing.assert_allclose(loss, total / norm, rtol=1e-12)

    def test_normalizer_floor_without_positives(self):
        logits = np.zeros((4, 2))
        mask = np.full((4, 2), NEGATIVE_ACTIVE)
        loss, _ = classification_loss(logits, mask, FocalParams())
        # divide by 1, not 0: 8 entries * 0.75 * 0.25 * ln 2
        np.testing.assert_allclose(
            loss, 8 * 0.75 * 0.25 * math.log(2.0), rtol=1e-12
        )

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(29)
        logits = rng.normal(0, 2, size=(6, 3))
        mask = rng.choice([MASKED, NEGATIVE_ACTIVE, POSITIVE_TARGET], size=(6, 3))
        params = FocalParams()
        _, grad = classification_loss(logits, mask, params)
        h = 1e-6
        for i in range(6):
            for j in range(3):
                up = logits.copy()
                up[i, j] += h
                down = logits.copy()
                down[i, j] -= h
                lu, _ = classification_loss(up, mask, params)
                ld, _ = classification_loss(down, mask, params)
                fd = (lu - ld) / (2 * h)
                np.testing.assert_allclose(grad[i, j], fd, atol=1e-7)

    def test_non_finite_logits_rejected(self):
        mask = np.full((2, 2), NEGATIVE_ACTIVE)
        with pytest.raises(NonFiniteLogit):
            classification_loss(np.array([[np.inf, 0.0], [0.0, 0.0]]), mask, FocalParams())
        with pytest.raises(NonFiniteLogit):
            classification_loss(np.array([[np.nan, 0.0], [0.0, 0.0]]), mask, FocalParams())

    def test_monotone_masking(self):
        """Unmasking an entry can only add loss: any mask refinement that
        turns active entries off never increases the total."""
        rng = np.random.default_rng(31)
        logits = rng.normal(0, 2, size=(15, 4))
        mask = rng.choice([NEGATIVE_ACTIVE, POSITIVE_TARGET], size=(15, 4), p=[0.9, 0.1])
        params = FocalParams()
        loss_full, _ = classification_loss(logits, mask, params)
        refined = mask.copy()
        # mask off some negatives; positives stay so the normalizer holds
        neg = np.argwhere(refined == NEGATIVE_ACTIVE)
        drop = neg[rng.choice(len(neg), size=len(neg) // 2, replace=False)]
        refined[drop[:, 0], drop[:, 1]] = MASKED
        loss_refined, _ = classification_loss(logits, refined, params)
        assert loss_refined <= loss_full


class TestSmoothL1:
    def test_linear_zone_hand_value(self):
        """|r|=1 with beta 1/9: 1 - 1/18."""
        beta = 1.0 / 9.0
        np.testing.assert_allclose(
            smooth_l1(np.array([1.0]), beta), [1.0 - 1.0 / 18.0], rtol=1e-15
        )

    def test_quadratic_zone(self):
        beta = 1.0 / 9.0
        x = 0.05  # below beta
        np.testing.assert_allclose(
            smooth_l1(np.array([x]), beta), [0.5 * x * x / beta], rtol=1e-15
        )

    def test_continuity_at_beta(self):
        for beta in (1.0 / 9.0, 0.5, 2.0):
            below = smooth_l1(np.array([beta - 1e-12]), beta)[0]
            above = smooth_l1(np.array([beta + 1e-12]), beta)[0]
            assert abs(below - above) < 1e-9
            assert abs(below - beta / 2.0) < 1e-9

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(37)
        beta = 1.0 / 9.0
        x = rng.uniform(-3, 3, 200)
        x = x[np.abs(np.abs(x) - beta) > 1e-4]  # keep away from the kink
        got = smooth_l1_grad(x, beta)
        h = 1e-7
        fd = (smooth_l1(x + h, beta) - smooth_l1(x - h, beta)) / (2 * h)
        np.testing.assert_allclose(got, fd, atol=1e-6)

    def test_even_function(self):
        x = np.linspace(-4, 4, 81)
        np.testing.assert_allclose(smooth_l1(x, 0.3), smooth_l1(-x, 0.3))


class TestRegressionLoss:
    def test_positives_only(self):
        """Non-positive anchors contribute nothing and get zero gradient."""
        a = make_assignment([POSITIVE, NEGATIVE, IGNORE], gt_index=[0, -1, -1])
        pred = np.array([[1.0, 0, 0, 0], [5.0, 5, 5, 5], [9.0, 9, 9, 9]])
        target = np.zeros((3, 4))
        loss, grad = regression_loss(pred, target, a, beta=1.0 / 9.0)
        np.testing.assert_allclose(loss, 1.0 - 1.0 / 18.0, rtol=1e-12)
        assert (grad[1] == 0.0).all() and (grad[2] == 0.0).all()
        assert grad[0, 0] == 1.0  # linear zone sign

    def test_normalizer_counts_positives(self):
        a = make_assignment([POSITIVE, POSITIVE], gt_index=[0, 0])
        pred = np.ones((2, 4))
        target = np.zeros((2, 4))
        loss, _ = regression_loss(pred, target, a, beta=1.0 / 9.0)
        # 8 components each 1 - 1/18, over 2 positives
        np.testing.assert_allclose(loss, 8 * (1 - 1.0 / 18.0) / 2, rtol=1e-12)

    def test_no_positives_zero(self):
        a = make_assignment([NEGATIVE, IGNORE])
        loss, grad = regression_loss(np.ones((2, 4)), np.zeros((2, 4)), a)
        assert loss == 0.0
        assert (grad == 0.0).all()

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(41)
        a = make_assignment([POSITIVE, NEGATIVE, POSITIVE], gt_index=[0, -1, 1])
        pred = rng.normal(0, 1, (3, 4))
        target = rng.normal(0, 1, (3, 4))
        _, grad = regression_loss(pred, target, a)
        h = 1e-7
        for i in (0, 2):
            for j in range(4):
                up = pred.copy()
                up[i, j] += h
                down = pred.copy()
                down[i, j] -= h
                lu, _ = regression_loss(up, target, a)
                ld, _ = regression_loss(down, target, a)
                np.testing.assert_allclose(grad[i, j], (lu - ld) / (2 * h), atol=1e-6)


class TestLossConfig:
    def test_round_trip(self):
        cfg = LossConfig(
            focal=FocalParams(alpha=0.3, gamma=1.5, symmetric_alpha=True),
            lambda_reg=0.7,
            smooth_l1_beta=0.2,
            cross_positive_as_negative=False,
        )
        again = LossConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.focal.alpha == 0.25
        assert cfg.focal.gamma == 2.0
        assert cfg.cross_positive_as_negative is True

    def test_loss_value_total(self):
        v = LossValue(classification=1.5, regression=0.5, normalizer=3)
        assert v.total() == 2.0
        assert v.total(lambda_reg=2.0) == 2.5
