import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from roadscan import data as D, imaging


def make_groups(n_normal, n_pothole):
    samples = [
        D.LabeledSample(f"n{i:03d}", "normal", f"n{i:03d}.png") for i in range(n_normal)
    ] + [
        D.LabeledSample(f"p{i:03d}", "pothole", f"p{i:03d}.png")
        for i in range(n_pothole)
    ]
    return D.group_by_class(samples)


class TestIngestion:
    def test_scan_sorted_and_labeled(self, tiny_dataset):
        samples, errors = D.load_dataset_directory(tiny_dataset)
        assert errors == []
        assert len(samples) == 20
        labels = [s.label for s in samples]
        assert labels == ["normal"] * 10 + ["pothole"] * 10
        ids = [s.id for s in samples]
        assert ids == sorted(ids[:10]) + sorted(ids[10:])

    def test_undecodable_file_reported_not_fatal(self, tmp_path):
        for d in ("normal", "potholes"):
            (tmp_path / d).mkdir()
        good = imaging.ImageBuffer(4, 4, 1, np.full((4, 4, 1), 0.5))
        (tmp_path / "normal" / "ok.pgm").write_bytes(imaging.encode_pnm(good))
        (tmp_path / "normal" / "bad.png").write_bytes(b"not an image")
        (tmp_path / "potholes" / "ok.pgm").write_bytes(imaging.encode_pnm(good))
        samples, errors = D.load_dataset_directory(tmp_path)
        assert [s.id for s in samples] == ["normal/ok.pgm", "potholes/ok.pgm"]
        assert len(errors) == 1 and "bad.png" in errors[0]

    def test_missing_class_dir(self, tmp_path):
        (tmp_path / "normal").mkdir()
        with pytest.raises(D.LayoutError, match="potholes"):
            D.load_dataset_directory(tmp_path)

    def test_non_image_suffixes_skipped(self, tmp_path):
        for d in ("normal", "potholes"):
            (tmp_path / d).mkdir()
        (tmp_path / "normal" / "notes.txt").write_text("hi")
        (tmp_path / "potholes" / "cache.db").write_bytes(b"\x00")
        samples, errors = D.load_dataset_directory(tmp_path)
        assert samples == [] and errors == []


class TestSplit:
    def samples(self, n=20):
        return [
            D.LabeledSample(f"{l}{i:02d}", l, "")
            for l in ("normal", "pothole")
            for i in range(n)
        ]

    def test_counts(self):
        split = D.split_dataset(
            self.samples(), 10, {"normal": 5, "pothole": 4}, 0.2, seed=0
        )
        assert len(split.train) == 16  # (10 - 2 val) per class
        assert len(split.validation) == 4
        assert len(split.test) == 9

    def test_partitions_disjoint(self):
        split = D.split_dataset(self.samples(), 12, {"normal": 6, "pothole": 6}, 0.25, 1)
        ids = [s.id for part in (split.train, split.validation, split.test) for s in part]
        assert len(ids) == len(set(ids))

    def test_seed_reproducible(self):
        a = D.split_dataset(self.samples(), 10, {"normal": 5, "pothole": 5}, 0.2, 7)
        b = D.split_dataset(self.samples(), 10, {"normal": 5, "pothole": 5}, 0.2, 7)
        assert [s.id for s in a.train] == [s.id for s in b.train]
        assert [s.id for s in a.test] == [s.id for s in b.test]

    def test_different_seeds_differ(self):
        a = D.split_dataset(self.samples(), 10, {"normal": 5, "pothole": 5}, 0.2, 1)
        b = D.split_dataset(self.samples(), 10, {"normal": 5, "pothole": 5}, 0.2, 2)
        assert [s.id for s in a.train] != [s.id for s in b.train]

    def test_shortfall_error_names_class_and_count(self):
        with pytest.raises(D.StructureError, match=r"short by 10"):
            D.split_dataset(self.samples(5), 10, {"normal": 5}, 0.0, 0)


class TestPairs:
    def test_full_genuine_enumeration_matches_bruteforce(self):
        groups = make_groups(5, 4)
        got = D.gen_same_pairs(groups, 5 * 4 // 2 + 4 * 3 // 2, seed=0)
        expected = set()
        for members in (
            [f"n{i:03d}" for i in range(5)],
            [f"p{i:03d}" for i in range(4)],
        ):
            for a, b in itertools.combinations(members, 2):
                expected.add((min(a, b), max(a, b), 1))
        assert {(p.a, p.b, p.label) for p in got} == expected

    def test_full_imposter_enumeration_matches_bruteforce(self):
        groups = make_groups(3, 4)
        got = D.gen_diff_pairs(groups, 12, seed=0)
        expected = {
            (min(a, b), max(a, b), 0)
            for a in (f"n{i:03d}" for i in range(3))
            for b in (f"p{i:03d}" for i in range(4))
        }
        assert {(p.a, p.b, p.label) for p in got} == expected

    def test_canonical_order_and_no_duplicates(self):
        groups = make_groups(6, 6)
        pairs = D.gen_same_pairs(groups, 20, 3) + D.gen_diff_pairs(groups, 20, 3)
        seen = set()
        for p in pairs:
            assert p.a < p.b
            assert (p.a, p.b) not in seen
            seen.add((p.a, p.b))

    def test_seed_determinism(self):
        groups = make_groups(8, 8)
        assert D.gen_same_pairs(groups, 10, 5) == D.gen_same_pairs(groups, 10, 5)
        assert D.gen_diff_pairs(groups, 10, 5) == D.gen_diff_pairs(groups, 10, 5)

    def test_over_budget_raises(self):
        groups = make_groups(3, 3)
        with pytest.raises(D.BudgetError, match="genuine"):
            D.gen_same_pairs(groups, 7, 0)
        with pytest.raises(D.BudgetError, match="imposter"):
            D.gen_diff_pairs(groups, 10, 0)

    @given(n=st.integers(2, 12), m=st.integers(1, 12), seed=st.integers(0, 50))
    @settings(max_examples=30, deadline=None)
    def test_subsample_is_subset_of_enumeration(self, n, m, seed):
        groups = make_groups(n, m)
        budget = D.pair_budget({"normal": n, "pothole": m})
        count = budget.genuine_possible // 2
        if count == 0:
            return
        sub = D.gen_same_pairs(groups, count, seed)
        full = {
            (p.a, p.b) for p in D.gen_same_pairs(groups, budget.genuine_possible, 0)
        }
        assert all((p.a, p.b) in full for p in sub)
        assert len(sub) == count


class TestTriplets:
    def test_structure_of_samples(self):
        groups = make_groups(5, 5)
        trips = D.sample_triplets(groups, 40, seed=2)
        assert len(trips) == len(set(trips)) == 40
        by_id = {s.id: s.label for g in groups.values() for s in g}
        for t in trips:
            assert t.anchor != t.positive
            assert by_id[t.anchor] == by_id[t.positive]
            assert by_id[t.anchor] != by_id[t.negative]

    def test_max_distinct_formula(self):
        # 3 normals, 2 potholes: 3*2*2 + 2*1*3 = 18
        groups = make_groups(3, 2)
        assert D.max_distinct_triplets(groups) == 18

    def test_exhaustive_request_enumerates_all(self):
        groups = make_groups(3, 2)
        trips = D.sample_triplets(groups, 18, seed=0)
        assert len(set(trips)) == 18

    def test_near_saturation_succeeds(self):
        groups = make_groups(3, 3)
        total = D.max_distinct_triplets(groups)
        trips = D.sample_triplets(groups, total - 1, seed=1)
        assert len(set(trips)) == total - 1

    def test_impossible_count_raises(self):
        groups = make_groups(3, 2)
        with pytest.raises(D.StructureError, match="19"):
            D.sample_triplets(groups, 19, 0)

    def test_single_class_raises(self):
        groups = make_groups(5, 0)
        groups.pop("pothole", None)
        with pytest.raises(D.StructureError):
            D.sample_triplets(groups, 1, 0)

    def test_seed_determinism(self):
        groups = make_groups(6, 6)
        assert D.sample_triplets(groups, 30, 9) == D.sample_triplets(groups, 30, 9)


class TestBudget:
    def test_hand_counts_small(self):
        b = D.pair_budget({"normal": 4, "pothole": 3})
        assert b.genuine_possible == 6 + 3
        assert b.imposter_possible == 12

    def test_reference_counts_280_per_class(self):
        b = D.pair_budget({"normal": 280, "pothole": 280})
        assert b.genuine_possible == 2 * math.comb(280, 2) == 78120
        assert b.imposter_possible == 280 * 280 == 78400

    def test_uvp_accounting(self):
        b = D.pair_budget({"normal": 3, "pothole": 3}, uvp_inputs=(2, 3, 2))
        assert b.uvp_genuine == 12
        assert b.uvp_imposter == 132

    def test_requests_over_budget(self):
        with pytest.raises(D.BudgetError):
            D.pair_budget({"normal": 3, "pothole": 3}, genuine_requested=7)
        with pytest.raises(D.BudgetError):
            D.pair_budget({"normal": 3, "pothole": 3}, imposter_requested=10)

    @given(n=st.integers(0, 30), m=st.integers(0, 30))
    @settings(max_examples=40, deadline=None)
    def test_budget_matches_enumeration(self, n, m):
        groups = make_groups(n, m)
        b = D.pair_budget({"normal": n, "pothole": m})
        assert b.genuine_possible == len(D._all_same_pairs(groups))
        assert b.imposter_possible == len(D._all_diff_pairs(groups))


def test_export_pairs_csv(tmp_path):
    pairs = [D.LabeledPair("a", "b", 1), D.LabeledPair("a", "c", 0)]
    path = tmp_path / "pairs.csv"
    D.export_pairs_csv(pairs, path)
    assert path.read_text() == "a,b,label\na,b,1\na,c,0\n"


class TestSynthetic:
    def test_layout_and_count(self, tmp_path):
        files = D.gen_synthetic_dataset(3, 32, seed=0, out_root=tmp_path)
        assert len(files) == 6
        samples, errors = D.load_dataset_directory(tmp_path)
        assert errors == []
        assert sum(s.label == "pothole" for s in samples) == 3

    def test_byte_identical_across_runs(self, tmp_path):
        a = D.gen_synthetic_dataset(2, 32, seed=9, out_root=tmp_path / "a")
        b = D.gen_synthetic_dataset(2, 32, seed=9, out_root=tmp_path / "b")
        for fa, fb in zip(a, b):
            assert fa.read_bytes() == fb.read_bytes()

    def test_seed_changes_content(self, tmp_path):
        a = D.gen_synthetic_dataset(1, 32, seed=1, out_root=tmp_path / "a")
        b = D.gen_synthetic_dataset(1, 32, seed=2, out_root=tmp_path / "b")
        assert a[0].read_bytes() != b[0].read_bytes()

    def test_potholes_are_darker_on_average(self):
        # the defect darkens an elliptical region, so mean intensity drops
        normals, holes = [], []
        for i in range(10):
            rng = np.random.default_rng((0, 0, i))
            img, _ = D.synth_image(rng, 48, pothole=False)
            normals.append(img.pixels.mean())
            rng = np.random.default_rng((0, 1, i))
            img, mask = D.synth_image(rng, 48, pothole=True)
            holes.append(img.pixels.mean())
            assert mask is not None and mask.any()
        assert np.mean(holes) < np.mean(normals)

    def test_pixels_in_unit_interval(self):
        rng = np.random.default_rng(5)
        img, _ = D.synth_image(rng, 32, pothole=True)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    def test_side_too_small_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="side"):
            D.gen_synthetic_dataset(1, 8, 0, tmp_path)
