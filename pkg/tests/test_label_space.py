"""Merged label space: construction, mapping, conflicts, activation."""

import numpy as np
import pytest

from crossdet.errors import (
    DuplicateDataset,
    OverlappingMergeGroups,
    UnknownClass,
    UnknownDataset,
    UnknownSourceClass,
)
from crossdet.label_space import (
    ALL_COMPATIBLE,
    ALL_CONFLICTING,
    ConflictMatrix,
    HybridLabelSpace,
    MergeGroup,
    build_label_space,
    class_sources_active_for,
    parse_merge_config,
)


class TestBuildLabelSpace:
    def test_identity_single_dataset(self):
        """One dataset and no merges maps classes 1:1 in source order."""
        space = build_label_space({"coco": ["person", "car", "dog"]})
        assert len(space) == 3
        assert [c.canonical_name for c in space.classes] == ["person", "car", "dog"]
        assert [space.map_label("coco", n) for n in ("person", "car", "dog")] == [0, 1, 2]

    def test_two_datasets_concatenate_in_declaration_order(self):
        space = build_label_space({"a": ["x", "y"], "b": ["z"]})
        assert len(space) == 3
        assert space.map_label("a", "x") == 0
        assert space.map_label("a", "y") == 1
        assert space.map_label("b", "z") == 2

    def test_merge_collapses_to_seven_classes(self):
        """Five plus three source labels with one merge leave seven classes."""
        space = build_label_space(
            {"d1": ["l1", "l2", "l3", "l4", "l5"], "d2": ["m1", "m2", "m3"]},
            [MergeGroup((("d1", "l1"), ("d2", "m3")))],
        )
        assert len(space) == 7
        # all eight source labels map onto exactly seven distinct indices
        indices = {
            space.map_label(d, n)
            for d, names in (("d1", ["l1", "l2", "l3", "l4", "l5"]),
                             ("d2", ["m1", "m2", "m3"]))
            for n in names
        }
        assert indices == set(range(7))
        assert space.map_label("d1", "l1") == space.map_label("d2", "m3")

    def test_merged_class_sits_at_first_member_occurrence(self):
        space = build_label_space(
            {"a": ["p", "q"], "b": ["r", "s"]},
            [MergeGroup((("a", "q"), ("b", "r")))],
        )
        # order: p, merged(q,r), s
        assert space.map_label("a", "p") == 0
        assert space.map_label("a", "q") == 1
        assert space.map_label("b", "r") == 1
        assert space.map_label("b", "s") == 2

    def test_canonical_name_lexicographic_default(self):
        space = build_label_space(
            {"coco": ["person"], "ped": ["pedestrian"]},
            [MergeGroup((("coco", "person"), ("ped", "pedestrian")))],
        )
        assert space.classes[0].canonical_name == "pedestrian"

    def test_canonical_name_override(self):
        space = build_label_space(
            {"coco": ["person"], "ped": ["pedestrian"]},
            [MergeGroup((("coco", "person"), ("ped", "pedestrian")), "human")],
        )
        assert space.classes[0].canonical_name == "human"

    def test_merge_group_may_span_three_datasets(self):
        space = build_label_space(
            {"a": ["dog"], "b": ["hound"], "c": ["canine", "cat"]},
            [MergeGroup((("a", "dog"), ("b", "hound"), ("c", "canine")))],
        )
        assert len(space) == 2
        assert len(space.classes[0].sources) == 3

    def test_count_identity_over_random_merges(self):
        """Class count equals total sources minus merged-away duplicates."""
        rng = np.random.default_rng(11)
        for _ in range(50):
            n_datasets = int(rng.integers(2, 5))
            lists = {
                f"d{i}": [f"c{i}_{j}" for j in range(int(rng.integers(1, 6)))]
                for i in range(n_datasets)
            }
            # pick disjoint merge groups, one member per dataset at most
            merges = []
            used = set()
            for _ in range(int(rng.integers(0, 3))):
                members = []
                for d, names in lists.items():
                    if rng.random() < 0.5:
                        pick = names[int(rng.integers(0, len(names)))]
                        if (d, pick) not in used:
                            members.append((d, pick))
                            used.add((d, pick))
                if len(members) >= 2:
                    merges.append(MergeGroup(tuple(members)))
            space = build_label_space(lists, merges)
            total = sum(len(v) for v in lists.values())
            expected = total - sum(len(g.members) - 1 for g in merges)
            assert len(space) == expected
            # partition property: every source appears exactly once
            seen = [
                (s.dataset, s.name) for c in space.classes for s in c.sources
            ]
            assert len(seen) == len(set(seen)) == total

    def test_duplicate_dataset_rejected(self):
        with pytest.raises(DuplicateDataset):
            build_label_space({"a": ["x", "x"]})

    def test_unknown_merge_member_rejected(self):
        with pytest.raises(UnknownSourceClass):
            build_label_space({"a": ["x"]}, [MergeGroup((("a", "x"), ("b", "y")))])

    def test_overlapping_merge_groups_rejected(self):
        lists = {"a": ["x"], "b": ["y"], "c": ["z"]}
        with pytest.raises(OverlappingMergeGroups):
            build_label_space(
                lists,
                [
                    MergeGroup((("a", "x"), ("b", "y"))),
                    MergeGroup((("b", "y"), ("c", "z"))),
                ],
            )

    def test_within_dataset_merge_rejected(self):
        with pytest.raises(OverlappingMergeGroups):
            build_label_space(
                {"a": ["x", "y"]}, [MergeGroup((("a", "x"), ("a", "y")))]
            )

    def test_map_label_unknown_source(self):
        space = build_label_space({"a": ["x"]})
        with pytest.raises(UnknownSourceClass):
            space.map_label("a", "nope")

    def test_class_at_out_of_range(self):
        space = build_label_space({"a": ["x"]})
        with pytest.raises(UnknownClass):
            space.class_at(1)

    def test_json_round_trip(self):
        space = build_label_space(
            {"coco": ["person", "car"], "ped": ["pedestrian"]},
            [MergeGroup((("coco", "person"), ("ped", "pedestrian")))],
        )
        again = HybridLabelSpace.from_json(space.to_json())
        assert again.to_json() == space.to_json()
        assert again.map_label("ped", "pedestrian") == 0


class TestConflictMatrix:
    def test_default_all_conflicting(self):
        m = ConflictMatrix(["face", "ped"])
        assert m.is_conflicting("face", "ped")
        assert m.is_conflicting("ped", "face")

    def test_all_compatible_policy(self):
        m = ConflictMatrix(["face", "ped"], default_policy=ALL_COMPATIBLE)
        assert not m.is_conflicting("face", "ped")

    def test_declared_pair_overrides_compatible_default(self):
        m = ConflictMatrix(
            ["a", "b", "c"], [("a", "b")], default_policy=ALL_COMPATIBLE
        )
        assert m.is_conflicting("a", "b")
        assert not m.is_conflicting("a", "c")

    def test_irreflexive(self):
        m = ConflictMatrix(["a", "b"])
        assert not m.is_conflicting("a", "a")

    def test_symmetry_over_random_relations(self):
        rng = np.random.default_rng(3)
        names = [f"d{i}" for i in range(6)]
        for _ in range(20):
            pairs = []
            for i in range(6):
                for j in range(i + 1, 6):
                    if rng.random() < 0.3:
                        pairs.append((names[i], names[j]))
            policy = ALL_COMPATIBLE if rng.random() < 0.5 else ALL_CONFLICTING
            m = ConflictMatrix(names, pairs, policy)
            for a in names:
                for b in names:
                    assert m.is_conflicting(a, b) == m.is_conflicting(b, a)

    def test_self_pair_rejected(self):
        with pytest.raises(UnknownDataset):
            ConflictMatrix(["a", "b"], [("a", "a")])

    def test_undeclared_dataset_rejected(self):
        m = ConflictMatrix(["a", "b"])
        with pytest.raises(UnknownDataset):
            m.is_conflicting("a", "zzz")
        with pytest.raises(UnknownDataset):
            ConflictMatrix(["a"], [("a", "b")])

    def test_dict_round_trip(self):
        m = ConflictMatrix(["a", "b", "c"], [("b", "a")], ALL_COMPATIBLE)
        again = ConflictMatrix.from_dict(m.to_dict())
        assert again.is_conflicting("a", "b")
        assert not again.is_conflicting("a", "c")
        assert again.default_policy == ALL_COMPATIBLE


class TestClassSourcesActiveFor:
    def _space(self):
        return build_label_space({"face": ["face"], "ped": ["pedestrian"]})

    def test_own_dataset_always_active(self):
        space = self._space()
        m = ConflictMatrix(["face", "ped"])
        face_idx = space.map_label("face", "face")
        assert class_sources_active_for(space, m, face_idx, "face")

    def test_conflicting_foreign_dataset_inactive(self):
        space = self._space()
        m = ConflictMatrix(["face", "ped"])
        ped_idx = space.map_label("ped", "pedestrian")
        assert not class_sources_active_for(space, m, ped_idx, "face")

    def test_compatible_foreign_dataset_active(self):
        space = self._space()
        m = ConflictMatrix(["face", "ped"], default_policy=ALL_COMPATIBLE)
        ped_idx = space.map_label("ped", "pedestrian")
        assert class_sources_active_for(space, m, ped_idx, "face")

    def test_merged_class_active_for_both_sources(self):
        """A class with sources in two datasets takes negatives from both
        even when every dataset pair conflicts."""
        space = build_label_space(
            {"coco": ["person"], "ped": ["pedestrian"], "face": ["face"]},
            [MergeGroup((("coco", "person"), ("ped", "pedestrian")))],
        )
        m = ConflictMatrix(["coco", "ped", "face"])
        merged = space.map_label("coco", "person")
        assert class_sources_active_for(space, m, merged, "coco")
        assert class_sources_active_for(space, m, merged, "ped")
        assert not class_sources_active_for(space, m, merged, "face")

    def test_unknown_dataset_raises(self):
        space = self._space()
        m = ConflictMatrix(["face", "ped"])
        with pytest.raises(UnknownDataset):
            class_sources_active_for(space, m, 0, "coco")


class TestParseMergeConfig:
    def test_plain_list_groups(self):
        cfg = parse_merge_config(
            {
                "merges": [
                    [
                        {"dataset": "coco", "name": "person"},
                        {"dataset": "ped", "name": "pedestrian"},
                    ]
                ],
                "conflicts": [["coco", "ped"]],
            }
        )
        assert cfg.merges[0].members == (("coco", "person"), ("ped", "pedestrian"))
        assert cfg.merges[0].canonical_name is None
        assert cfg.conflicts == [("coco", "ped")]
        assert cfg.default_policy == ALL_CONFLICTING

    def test_object_group_with_canonical_name(self):
        cfg = parse_merge_config(
            {
                "merges": [
                    {
                        "members": [
                            {"dataset": "a", "name": "x"},
                            {"dataset": "b", "name": "y"},
                        ],
                        "canonical_name": "xy",
                    }
                ],
                "default_policy": "all-compatible",
            }
        )
        assert cfg.merges[0].canonical_name == "xy"
        assert cfg.default_policy == ALL_COMPATIBLE

    def test_empty_document(self):
        cfg = parse_merge_config({})
        assert cfg.merges == [] and cfg.conflicts == []
        assert cfg.default_policy == ALL_CONFLICTING
