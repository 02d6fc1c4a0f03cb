"""Desk-scale experiments behind the qualitative cross-dataset claims.

Two worlds, two questions:

  parity     Two datasets label disjoint classes and conflict with each
             other. Does masked joint training match the per-dataset solo
             baselines, and does plain label concatenation fall behind?
             (The concat run punishes one dataset's objects as the other
             dataset's background.)

  merge      Two datasets label the same underlying class under different
             names. Does merging the names beat leaving them split? (Split
             names fight through cross-class negatives on each other's
             positives.)

AP50 throughout, evaluated per dataset on held-out test images in that
dataset's own namespace.
"""

from __future__ import annotations

import numpy as np

from .anchors import AnchorConfig
from .evaluation import coco_report
from .label_space import MergeConfig, MergeGroup
from .loss import LossConfig
from .synth import DatasetSpec, SynthWorld, SynthWorldConfig, generate_world
from .trainer import (
    MODE_AWARE,
    MODE_NAIVE,
    TrainConfig,
    run_inference,
    train,
)


def default_anchor_config() -> AnchorConfig:
    """Single-level anchors sized for the default synthetic canvas."""
    return AnchorConfig(
        levels=(3,),
        ratios=(1.0,),
        scales=(1.5, 2.0, 2.9, 4.0),
    )


def parity_world(seed: int) -> SynthWorld:
    """Two-class world with crossed partial labels and conflicting datasets.

    Every image contains objects of both classes but each dataset labels
    only one, so concatenated training punishes half of all true objects
    as background. Dense objects and decoys keep the ranking sensitive to
    that corruption without touching what the masked runs see.
    """
    cfg = SynthWorldConfig(
        num_classes=2,
        seed=seed,
        objects_per_image=(2, 4),
        decoy_rate=2.5,
        decoy_strength=(0.3, 0.8),
    )
    specs = [
        DatasetSpec("dsa", 100, 100, {0: "alpha"}),
        DatasetSpec("dsb", 100, 100, {1: "beta"}),
    ]
    return generate_world(cfg, specs)


def merge_world(seed: int, merged: bool) -> SynthWorld:
    """One underlying class named differently by two datasets.

    With merged=False the two names stay separate hybrid classes and
    their positives act as each other's negatives; with merged=True they
    collapse into one class. Geometry and signatures are identical either
    way, so the merge flag is the only difference. Train sets are tiny and
    noisy on purpose: the merged class fits one detector from both label
    pools, while each split name must make do with half the evidence.
    """
    cfg = SynthWorldConfig(num_classes=1, seed=seed, background_noise=0.15)
    specs = [
        DatasetSpec("dsa", 6, 100, {0: "person"}),
        DatasetSpec("dsb", 6, 100, {0: "pedestrian"}),
    ]
    merges = None
    if merged:
        merges = MergeConfig(
            [MergeGroup((("dsa", "person"), ("dsb", "pedestrian")))]
        )
    return generate_world(cfg, specs, merges=merges)


def _ap50(world: SynthWorld, head, anchor_cfg: AnchorConfig, dataset: str,
          class_index: int) -> float:
    test = world.manifest("test", datasets=[dataset])
    detections = run_inference(head, test, world.features_of, anchor_cfg)
    report = coco_report(detections, test)
    metrics = report.per_class.get(class_index)
    return 0.0 if metrics is None else float(metrics["AP50"])


def run_parity_experiment(
    seed: int,
    train_cfg: TrainConfig | None = None,
    anchor_cfg: AnchorConfig | None = None,
    loss_cfg: LossConfig | None = None,
) -> dict:
    """Train aware / naive / per-dataset solo heads and score each class.

    Returns AP50 keyed by mode, then by class name, each measured on the
    test images of the dataset that labels the class.
    """
    world = parity_world(seed)
    anchor_cfg = anchor_cfg or default_anchor_config()
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or TrainConfig(seed=seed)
    manifest = world.manifest("train")

    heads = {}
    for mode in (MODE_AWARE, MODE_NAIVE, "solo:dsa", "solo:dsb"):
        heads[mode], _ = train(
            manifest, world.features_of, anchor_cfg, loss_cfg, train_cfg, mode
        )

    targets = {
        "alpha": ("dsa", world.label_space.map_label("dsa", "alpha"), "solo:dsa"),
        "beta": ("dsb", world.label_space.map_label("dsb", "beta"), "solo:dsb"),
    }
    out: dict = {"seed": seed, "per_class": {}}
    for name, (dataset, idx, solo_mode) in targets.items():
        out["per_class"][name] = {
            "aware": _ap50(world, heads[MODE_AWARE], anchor_cfg, dataset, idx),
            "naive": _ap50(world, heads[MODE_NAIVE], anchor_cfg, dataset, idx),
            "solo": _ap50(world, heads[solo_mode], anchor_cfg, dataset, idx),
        }
    return out


def run_merge_experiment(
    seed: int,
    train_cfg: TrainConfig | None = None,
    anchor_cfg: AnchorConfig | None = None,
    loss_cfg: LossConfig | None = None,
) -> dict:
    """Same world trained with and without the name merge; mean AP50 each."""
    anchor_cfg = anchor_cfg or default_anchor_config()
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or TrainConfig(seed=seed)

    scores = {}
    for label, merged in (("merged", True), ("unmerged", False)):
        world = merge_world(seed, merged)
        manifest = world.manifest("train")
        head, _ = train(
            manifest, world.features_of, anchor_cfg, loss_cfg, train_cfg, MODE_AWARE
        )
        per_dataset = []
        for spec, name in (("dsa", "person"), ("dsb", "pedestrian")):
            idx = world.label_space.map_label(spec, name)
            per_dataset.append(_ap50(world, head, anchor_cfg, spec, idx))
        scores[label] = float(np.mean(per_dataset))
    return {"seed": seed, **scores}


def average_over_seeds(runner, seeds) -> list[dict]:
    return [runner(seed) for seed in seeds]
