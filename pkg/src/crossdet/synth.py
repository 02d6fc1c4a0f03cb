"""Deterministic synthetic detection world.

Images are not pixel arrays: an image is a set of placed objects, each
carrying a class signature vector, and the observable input to a detector
is the per-anchor feature f = sum_objects IoU(anchor, object) * signature
plus background noise. That keeps the label-space / loss machinery under
test while staying free of tensor frameworks.

Partial labeling is realized by construction: every image may contain
objects of every class, but a dataset's manifest only annotates the classes
that dataset labels. Decoy objects (weak, down-scaled signatures) are never
annotated anywhere and exist to give a sloppy classifier something to
false-alarm on.

All randomness flows from one seed through named substreams keyed by
(dataset index, split, image index), so generation order never matters and
regeneration is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .anchors import AnchorSet, iou_matrix
from .errors import DuplicateDataset, EmptyConfig, InvalidPolicy
from .evaluation import derive_difficulty
from .ingest import (
    BBox,
    HybridManifest,
    RawAnnotation,
    RawImage,
    build_manifest,
)
from .label_space import (
    ALL_CONFLICTING,
    ConflictMatrix,
    HybridLabelSpace,
    MergeConfig,
    build_label_space,
)

_STREAM_SIGNATURES = 1
_STREAM_IMAGE = 2
_STREAM_FEATURES = 3

_SPLITS = ("train", "test")


@dataclass
class SynthWorldConfig:
    """Geometry, signatures, and noise levels of a synthetic world."""

    width: int = 64
    height: int = 64
    num_classes: int = 2
    feature_dim: int = 16
    objects_per_image: tuple = (1, 3)
    size_range: tuple = (12.0, 30.0)
    aspect_range: tuple = (0.9, 1.2)
    # object corners snap to this lattice so every object is coverable by
    # some anchor; decoys are placed off-lattice on purpose
    position_grid: float = 4.0
    signature_noise: float = 0.03
    background_noise: float = 0.08
    decoy_rate: float = 1.5
    decoy_size_range: tuple = (6.0, 10.0)
    decoy_strength: tuple = (0.3, 0.7)
    seed: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise EmptyConfig("canvas extents must be positive")
        if self.num_classes < 1 or self.feature_dim < 1:
            raise EmptyConfig("need at least one class and one feature dim")
        if self.signature_noise < 0 or self.background_noise < 0:
            raise EmptyConfig("noise levels must be non-negative")
        lo, hi = self.objects_per_image
        if not (0 <= lo <= hi):
            raise EmptyConfig(f"bad objects_per_image range {self.objects_per_image}")
        if not (0 < self.size_range[0] <= self.size_range[1] <= min(self.width, self.height)):
            raise EmptyConfig(f"bad size_range {self.size_range}")
        if self.decoy_rate < 0:
            raise EmptyConfig("decoy_rate must be non-negative")

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "objects_per_image": list(self.objects_per_image),
            "size_range": list(self.size_range),
            "aspect_range": list(self.aspect_range),
            "position_grid": self.position_grid,
            "signature_noise": self.signature_noise,
            "background_noise": self.background_noise,
            "decoy_rate": self.decoy_rate,
            "decoy_size_range": list(self.decoy_size_range),
            "decoy_strength": list(self.decoy_strength),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SynthWorldConfig":
        kwargs = dict(doc)
        for key in ("objects_per_image", "size_range", "aspect_range",
                    "decoy_size_range", "decoy_strength"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class DatasetSpec:
    """One synthetic dataset: image counts plus its labeling policy.

    labeled maps a true class index to the name this dataset uses for it;
    classes absent from the mapping exist in the images but are never
    annotated by this dataset.
    """

    name: str
    train_images: int
    test_images: int
    labeled: dict

    def __post_init__(self):
        if not self.labeled:
            raise InvalidPolicy(f"dataset {self.name!r} labels no classes")
        if self.train_images < 0 or self.test_images < 0:
            raise EmptyConfig("image counts must be non-negative")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "train_images": self.train_images,
            "test_images": self.test_images,
            "labeled": {str(k): v for k, v in sorted(self.labeled.items())},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DatasetSpec":
        return cls(
            doc["name"],
            int(doc["train_images"]),
            int(doc["test_images"]),
            {int(k): v for k, v in doc["labeled"].items()},
        )


@dataclass
class SynthObject:
    true_class: int
    x: float
    y: float
    w: float
    h: float
    signature: np.ndarray
    decoy: bool = False

    def box(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class SynthImage:
    dataset: str
    split: str
    index: int
    objects: list = field(default_factory=list)

    @property
    def uri(self) -> str:
        return f"synth://{self.dataset}/{self.split}/{self.index}"


def _snap(value: float, grid: float, upper: float) -> float:
    if grid <= 0:
        return value
    return float(min(max(round(value / grid) * grid, 0.0), upper))


def _generate_image(
    cfg: SynthWorldConfig, signatures: np.ndarray, ds_idx: int, split_idx: int,
    index: int,
) -> list:
    rng = np.random.default_rng(
        [cfg.seed, _STREAM_IMAGE, ds_idx, split_idx, index]
    )
    objects = []
    lo, hi = cfg.objects_per_image
    for _ in range(int(rng.integers(lo, hi + 1))):
        k = int(rng.integers(cfg.num_classes))
        s = rng.uniform(*cfg.size_range)
        a = rng.uniform(*cfg.aspect_range)  # aspect = h / w
        w = s / np.sqrt(a)
        h = s * np.sqrt(a)
        x = _snap(rng.uniform(0.0, cfg.width - w), cfg.position_grid, cfg.width - w)
        y = _snap(rng.uniform(0.0, cfg.height - h), cfg.position_grid, cfg.height - h)
        sig = signatures[k] + cfg.signature_noise * rng.normal(size=cfg.feature_dim)
        objects.append(SynthObject(k, float(x), float(y), float(w), float(h), sig))
    for _ in range(int(rng.poisson(cfg.decoy_rate))):
        k = int(rng.integers(cfg.num_classes))
        s = rng.uniform(*cfg.decoy_size_range)
        a = rng.uniform(*cfg.aspect_range)
        w = s / np.sqrt(a)
        h = s * np.sqrt(a)
        x = rng.uniform(0.0, cfg.width - w)
        y = rng.uniform(0.0, cfg.height - h)
        delta = rng.uniform(*cfg.decoy_strength)
        sig = delta * (
            signatures[k] + cfg.signature_noise * rng.normal(size=cfg.feature_dim)
        )
        objects.append(
            SynthObject(k, float(x), float(y), float(w), float(h), sig, decoy=True)
        )
    return objects


class SynthWorld:
    """Generated world: label space, per-image objects, feature generator."""

    def __init__(
        self,
        config: SynthWorldConfig,
        specs: Sequence[DatasetSpec],
        signatures: np.ndarray,
        label_space: HybridLabelSpace,
        conflicts: ConflictMatrix,
        images: Sequence[SynthImage],
    ):
        self.config = config
        self.specs = list(specs)
        self.signatures = np.asarray(signatures, dtype=np.float64)
        self.label_space = label_space
        self.conflicts = conflicts
        self.images = list(images)
        self._ds_index = {spec.name: i for i, spec in enumerate(self.specs)}
        self._by_key = {
            (img.dataset, img.split, img.index): img for img in self.images
        }

    # -- manifests ---------------------------------------------------------

    def manifest(self, split: str, datasets: Sequence[str] | None = None) -> HybridManifest:
        """Policy-filtered manifest over one split.

        Annotations cover exactly the classes each dataset labels; decoys
        are never annotated. Difficulty tags are derived from gt height so
        the WIDER-style evaluator works out of the box.
        """
        if split not in _SPLITS:
            raise EmptyConfig(f"unknown split {split!r}")
        wanted = set(datasets) if datasets is not None else None
        raws = []
        for spec in self.specs:
            if wanted is not None and spec.name not in wanted:
                continue
            count = spec.train_images if split == "train" else spec.test_images
            for i in range(count):
                img = self._by_key[(spec.name, split, i)]
                annotations = []
                for obj in img.objects:
                    if obj.decoy or obj.true_class not in spec.labeled:
                        continue
                    annotations.append(
                        RawAnnotation(
                            spec.labeled[obj.true_class],
                            BBox(obj.x, obj.y, obj.w, obj.h),
                            difficulty=derive_difficulty(obj.h, self.config.height),
                        )
                    )
                raws.append(
                    RawImage(
                        spec.name, i, self.config.width, self.config.height,
                        img.uri, annotations,
                    )
                )
        return build_manifest(raws, self.label_space, self.conflicts)

    # -- features ----------------------------------------------------------

    def features(self, uri: str, anchors: AnchorSet) -> np.ndarray:
        """Per-anchor features of one image: overlap-pooled signatures."""
        img = self._by_key[self._parse_uri(uri)]
        ds_idx = self._ds_index[img.dataset]
        split_idx = _SPLITS.index(img.split)
        rng = np.random.default_rng(
            [self.config.seed, _STREAM_FEATURES, ds_idx, split_idx, img.index]
        )
        noise = self.config.background_noise * rng.normal(
            size=(len(anchors), self.config.feature_dim)
        )
        if not img.objects:
            return noise
        boxes = np.array([obj.box() for obj in img.objects], dtype=np.float64)
        sigs = np.array([obj.signature for obj in img.objects], dtype=np.float64)
        overlap = iou_matrix(anchors.as_xywh(), boxes)
        return overlap @ sigs + noise

    def features_of(self, record, anchors: AnchorSet) -> np.ndarray:
        """Adapter matching the trainer's (image record, anchors) callback."""
        return self.features(record.uri, anchors)

    def _parse_uri(self, uri: str) -> tuple:
        try:
            scheme, rest = uri.split("://", 1)
            dataset, split, index = rest.rsplit("/", 2)
            key = (dataset, split, int(index))
        except ValueError as exc:
            raise KeyError(f"not a synthetic image uri: {uri!r}") from exc
        if scheme != "synth" or key not in self._by_key:
            raise KeyError(f"unknown synthetic image {uri!r}")
        return key

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "config": self.config.to_dict(),
            "specs": [spec.to_dict() for spec in self.specs],
            "signatures": self.signatures.tolist(),
            "label_space": self.label_space.to_dict(),
            "conflicts": self.conflicts.to_dict(),
            "images": [
                {
                    "dataset": img.dataset,
                    "split": img.split,
                    "index": img.index,
                    "objects": [
                        {
                            "class": obj.true_class,
                            "x": obj.x,
                            "y": obj.y,
                            "w": obj.w,
                            "h": obj.h,
                            "decoy": obj.decoy,
                            "signature": obj.signature.tolist(),
                        }
                        for obj in img.objects
                    ],
                }
                for img in self.images
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SynthWorld":
        config = SynthWorldConfig.from_dict(doc["config"])
        specs = [DatasetSpec.from_dict(d) for d in doc["specs"]]
        images = [
            SynthImage(
                img["dataset"],
                img["split"],
                int(img["index"]),
                [
                    SynthObject(
                        int(o["class"]), o["x"], o["y"], o["w"], o["h"],
                        np.asarray(o["signature"], dtype=np.float64),
                        decoy=bool(o["decoy"]),
                    )
                    for o in img["objects"]
                ],
            )
            for img in doc["images"]
        ]
        return cls(
            config,
            specs,
            np.asarray(doc["signatures"], dtype=np.float64),
            HybridLabelSpace.from_dict(doc["label_space"]),
            ConflictMatrix.from_dict(doc["conflicts"]),
            images,
        )

    @classmethod
    def from_json(cls, text: str) -> "SynthWorld":
        return cls.from_dict(json.loads(text))


def generate_world(
    cfg: SynthWorldConfig,
    specs: Sequence[DatasetSpec],
    merges: MergeConfig | None = None,
    conflict_pairs: Sequence[tuple] | None = None,
    default_policy: str = ALL_CONFLICTING,
) -> SynthWorld:
    """Generate a multi-dataset synthetic world from one seed.

    Every image contains objects of any class; each dataset's manifest
    annotates only its labeled classes. A class labeled by no dataset at
    all has no supervision anywhere and is rejected.
    """
    names = [spec.name for spec in specs]
    if len(set(names)) != len(names):
        raise DuplicateDataset(f"duplicate dataset names in {names}")
    covered = set()
    for spec in specs:
        for k in spec.labeled:
            if not 0 <= k < cfg.num_classes:
                raise InvalidPolicy(
                    f"dataset {spec.name!r} labels unknown class {k}"
                )
            covered.add(k)
    missing = sorted(set(range(cfg.num_classes)) - covered)
    if missing:
        raise InvalidPolicy(f"classes labeled by no dataset: {missing}")

    rng = np.random.default_rng([cfg.seed, _STREAM_SIGNATURES])
    signatures = rng.normal(size=(cfg.num_classes, cfg.feature_dim))
    signatures /= np.linalg.norm(signatures, axis=1, keepdims=True)

    source_lists = {
        spec.name: [spec.labeled[k] for k in sorted(spec.labeled)]
        for spec in specs
    }
    space = build_label_space(source_lists, merges.merges if merges else ())
    conflicts = ConflictMatrix(names, conflict_pairs or (), default_policy)

    images = []
    for ds_idx, spec in enumerate(specs):
        for split_idx, split in enumerate(_SPLITS):
            count = spec.train_images if split == "train" else spec.test_images
            for i in range(count):
                objects = _generate_image(cfg, signatures, ds_idx, split_idx, i)
                images.append(SynthImage(spec.name, split, i, objects))
    return SynthWorld(cfg, specs, signatures, space, conflicts, images)
