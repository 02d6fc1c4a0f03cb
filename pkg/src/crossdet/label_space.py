"""Merged hybrid label space over multiple source datasets.

Builds a duplicate-free class list from per-dataset label lists plus
explicit merge groups (semantically identical classes supplied by hand),
and holds the avoidance relation that says which dataset pairs must not
share negative samples. Both structures are immutable after construction
and safe for concurrent reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import (
    DuplicateDataset,
    OverlappingMergeGroups,
    UnknownClass,
    UnknownDataset,
    UnknownSourceClass,
)

ALL_CONFLICTING = "all-conflicting"
ALL_COMPATIBLE = "all-compatible"


def _check_dataset_id(dataset_id: str) -> str:
    if not dataset_id or any(c.isspace() for c in dataset_id):
        raise UnknownDataset(f"invalid dataset id: {dataset_id!r}")
    return dataset_id


@dataclass(frozen=True, order=True)
class SourceClass:
    """One class as declared by its source dataset."""

    dataset: str
    name: str
    original_index: int


@dataclass(frozen=True)
class HybridClass:
    """One class of the merged space; merged classes carry >= 2 sources."""

    index: int
    canonical_name: str
    sources: tuple[SourceClass, ...]


class HybridLabelSpace:
    """Immutable mapping from (dataset, name) source classes to hybrid indices."""

    def __init__(self, classes: Sequence[HybridClass], datasets: Sequence[str]):
        self.classes = tuple(classes)
        self.datasets = tuple(datasets)
        self._dataset_set = frozenset(datasets)
        self._by_source: dict[tuple[str, str], int] = {}
        for cls in self.classes:
            for src in cls.sources:
                key = (src.dataset, src.name)
                if key in self._by_source:
                    raise UnknownSourceClass(
                        f"source class {key} appears in more than one hybrid class"
                    )
                self._by_source[key] = cls.index

    def __len__(self) -> int:
        return len(self.classes)

    def has_dataset(self, dataset: str) -> bool:
        return dataset in self._dataset_set

    def map_label(self, dataset: str, name: str) -> int:
        """Hybrid index for a source (dataset, name) pair."""
        try:
            return self._by_source[(dataset, name)]
        except KeyError:
            raise UnknownSourceClass(
                f"no source class ({dataset!r}, {name!r}) in the label space"
            ) from None

    def class_at(self, index: int) -> HybridClass:
        if not 0 <= index < len(self.classes):
            raise UnknownClass(f"hybrid class index {index} out of range")
        return self.classes[index]

    def sources_of(self, index: int) -> frozenset[str]:
        """Datasets contributing sources to hybrid class `index`."""
        return frozenset(s.dataset for s in self.class_at(index).sources)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "datasets": list(self.datasets),
            "classes": [
                {
                    "index": cls.index,
                    "canonical_name": cls.canonical_name,
                    "sources": [
                        {
                            "dataset": s.dataset,
                            "name": s.name,
                            "original_index": s.original_index,
                        }
                        for s in cls.sources
                    ],
                }
                for cls in self.classes
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "HybridLabelSpace":
        classes = []
        for entry in doc["classes"]:
            sources = tuple(
                SourceClass(s["dataset"], s["name"], int(s["original_index"]))
                for s in entry["sources"]
            )
            classes.append(
                HybridClass(int(entry["index"]), entry["canonical_name"], sources)
            )
        return cls(classes, doc["datasets"])

    @classmethod
    def from_json(cls, text: str) -> "HybridLabelSpace":
        return cls.from_dict(json.loads(text))


class ConflictMatrix:
    """Symmetric, irreflexive avoidance relation between datasets.

    Undeclared pairs fall back to `default_policy`; the conservative
    default treats every cross-dataset pair as conflicting so negatives
    are never shared unless the config says they may be.
    """

    def __init__(
        self,
        datasets: Iterable[str],
        pairs: Iterable[tuple[str, str]] = (),
        default_policy: str = ALL_CONFLICTING,
    ):
        if default_policy not in (ALL_CONFLICTING, ALL_COMPATIBLE):
            raise UnknownDataset(f"unknown default_policy: {default_policy!r}")
        self.datasets = frozenset(_check_dataset_id(d) for d in datasets)
        self.default_policy = default_policy
        declared = set()
        for a, b in pairs:
            self._require(a)
            self._require(b)
            if a == b:
                raise UnknownDataset(f"dataset {a!r} cannot conflict with itself")
            declared.add(frozenset((a, b)))
        self.pairs = frozenset(declared)

    def _require(self, dataset: str) -> None:
        if dataset not in self.datasets:
            raise UnknownDataset(f"undeclared dataset: {dataset!r}")

    def is_conflicting(self, a: str, b: str) -> bool:
        self._require(a)
        self._require(b)
        if a == b:
            return False
        if frozenset((a, b)) in self.pairs:
            return True
        return self.default_policy == ALL_CONFLICTING

    def to_dict(self) -> dict:
        return {
            "datasets": sorted(self.datasets),
            "pairs": sorted(sorted(p) for p in self.pairs),
            "default_policy": self.default_policy,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ConflictMatrix":
        return cls(
            doc["datasets"],
            [tuple(p) for p in doc.get("pairs", [])],
            doc.get("default_policy", ALL_CONFLICTING),
        )


@dataclass
class MergeGroup:
    """A set of source classes to collapse into one hybrid class."""

    members: tuple[tuple[str, str], ...]
    canonical_name: str | None = None


@dataclass
class MergeConfig:
    """Parsed merge/conflict config file."""

    merges: list[MergeGroup] = field(default_factory=list)
    conflicts: list[tuple[str, str]] = field(default_factory=list)
    default_policy: str = ALL_CONFLICTING


def parse_merge_config(doc: Mapping) -> MergeConfig:
    """Parse the JSON merge/conflict config document.

    Each merge group is either a plain list of {"dataset", "name"} members
    or an object {"members": [...], "canonical_name": "..."} when the
    lexicographic canonical-name default needs overriding.
    """
    merges = []
    for group in doc.get("merges", []):
        canonical = None
        if isinstance(group, Mapping):
            members_raw = group["members"]
            canonical = group.get("canonical_name")
        else:
            members_raw = group
        members = tuple((m["dataset"], m["name"]) for m in members_raw)
        merges.append(MergeGroup(members, canonical))
    conflicts = [tuple(p) for p in doc.get("conflicts", [])]
    policy = doc.get("default_policy", ALL_CONFLICTING)
    return MergeConfig(merges, conflicts, policy)


def load_merge_config(path) -> MergeConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_merge_config(json.load(fh))


def build_label_space(
    source_lists: Mapping[str, Sequence[str]],
    merges: Sequence[MergeGroup] = (),
) -> HybridLabelSpace:
    """Build the hybrid label space from per-dataset class lists.

    Non-merged classes map 1:1 in declaration order (datasets in the order
    given, classes in source order); each merge group collapses to a single
    hybrid class positioned at its first member occurrence. The canonical
    name of a merged class is the lexicographically first member name
    unless the group overrides it.
    """
    seen_datasets = set()
    sources: dict[tuple[str, str], SourceClass] = {}
    order: list[SourceClass] = []
    for dataset, names in source_lists.items():
        _check_dataset_id(dataset)
        if dataset in seen_datasets:
            raise DuplicateDataset(f"dataset declared twice: {dataset!r}")
        seen_datasets.add(dataset)
        for idx, name in enumerate(names):
            key = (dataset, name)
            if key in sources:
                raise DuplicateDataset(
                    f"class {name!r} declared twice in dataset {dataset!r}"
                )
            src = SourceClass(dataset, name, idx)
            sources[key] = src
            order.append(src)

    group_of: dict[tuple[str, str], int] = {}
    for gi, group in enumerate(merges):
        group_datasets = set()
        for member in group.members:
            if member not in sources:
                raise UnknownSourceClass(
                    f"merge group references unknown source class {member}"
                )
            if member in group_of:
                raise OverlappingMergeGroups(
                    f"source class {member} appears in more than one merge group"
                )
            dataset = member[0]
            if dataset in group_datasets:
                raise OverlappingMergeGroups(
                    f"merge group {gi} merges two classes of dataset {dataset!r}; "
                    "within-dataset labels are assumed disjoint"
                )
            group_datasets.add(dataset)
            group_of[member] = gi

    classes: list[HybridClass] = []
    group_index: dict[int, int] = {}
    for src in order:
        key = (src.dataset, src.name)
        gi = group_of.get(key)
        if gi is None:
            classes.append(HybridClass(len(classes), src.name, (src,)))
        elif gi not in group_index:
            group = merges[gi]
            members = tuple(sorted(sources[m] for m in group.members))
            canonical = group.canonical_name or min(m[1] for m in group.members)
            group_index[gi] = len(classes)
            classes.append(HybridClass(len(classes), canonical, members))

    return HybridLabelSpace(classes, list(source_lists.keys()))


def class_sources_active_for(
    space: HybridLabelSpace, conflicts: ConflictMatrix, class_index: int, dataset: str
) -> bool:
    """Whether background negatives from `dataset` may supervise a class.

    True iff the dataset contributed a source to the class, or at least one
    source dataset of the class is not in conflict with it.
    """
    if not space.has_dataset(dataset):
        raise UnknownDataset(f"undeclared dataset: {dataset!r}")
    source_datasets = space.sources_of(class_index)
    if dataset in source_datasets:
        return True
    return any(not conflicts.is_conflicting(dataset, s) for s in source_datasets)
