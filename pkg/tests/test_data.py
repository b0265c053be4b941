from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import mannwhitneyu

from conftest import brute_cos
from facornet.data import (
    KinPair, SyntheticConfig, TriSubject, gen_synthetic, load_pair_list, load_quality_table, load_triplet_list,
    make_folds, pair_quality, quality_filter, sample_training_batch, save_pair_list, save_quality_table,
    save_triplet_list,
)
from facornet.errors import ConfigurationError, DataError, ParseError, ProtocolError
from facornet.model import FaCoRConfig

HEADER = "img_a,img_b,kin_type,label,family_a,family_b\n"


def positives(n_families: int, per_family: int = 2) -> list:
    return [KinPair(f"f{f}_p{k}", f"f{f}_c{k}", "FS", True, f"f{f}", f"f{f}")
            for f in range(n_families) for k in range(per_family)]


class TestPairFiles:
    def test_header_only(self, tmp_path):
        (tmp_path / "p.csv").write_text(HEADER)
        assert load_pair_list(tmp_path / "p.csv") == []

    def test_out_of_scope_type(self, tmp_path):
        (tmp_path / "p.csv").write_text(HEADER + "a,b,GFGD,kin,F1,F1\n")
        with pytest.raises(DataError, match="GFGD"):
            load_pair_list(tmp_path / "p.csv")

    def test_four_row_fixture(self, tmp_path):
        (tmp_path / "p.csv").write_text(
            HEADER
            + "F0001/MID1/P1.jpg,F0001/MID3/P9.jpg,FS,kin,F0001,F0001\n"
            + "F0002/MID2/P4.jpg,F0007/MID4/P2.jpg,MD,non-kin,F0002,F0007\n"
            + "F0003/MID3/P1.jpg,F0003/MID4/P5.jpg,SIBS,1,F0003,F0003\n"
            + "F0004/MID1/P8.jpg,F0009/MID2/P3.jpg,BB,0,F0004,F0009\n"
        )
        assert load_pair_list(tmp_path / "p.csv") == [
            KinPair("F0001/MID1/P1.jpg", "F0001/MID3/P9.jpg", "FS", True, "F0001", "F0001"),
            KinPair("F0002/MID2/P4.jpg", "F0007/MID4/P2.jpg", "MD", False, "F0002", "F0007"),
            KinPair("F0003/MID3/P1.jpg", "F0003/MID4/P5.jpg", "SIBS", True, "F0003", "F0003"),
            KinPair("F0004/MID1/P8.jpg", "F0009/MID2/P3.jpg", "BB", False, "F0004", "F0009"),
        ]

    def test_malformed_row_line_number(self, tmp_path):
        (tmp_path / "p.csv").write_text(HEADER + "a,b,FS,kin,F1,F1\nc,d,FS,maybe,F1,F1\n")
        with pytest.raises(ParseError) as info:
            load_pair_list(tmp_path / "p.csv")
        assert info.value.lineno == 3
        (tmp_path / "q.csv").write_text(HEADER + "a,b,FS,kin,F1\n")
        with pytest.raises(ParseError) as info:
            load_pair_list(tmp_path / "q.csv")
        assert info.value.lineno == 2

    def test_duplicate_rejected(self, tmp_path):
        (tmp_path / "p.csv").write_text(HEADER + "a,b,FS,kin,F1,F1\na,b,FS,kin,F1,F1\n")
        with pytest.raises(ParseError):
            load_pair_list(tmp_path / "p.csv")

    def test_kin_across_families_rejected(self, tmp_path):
        (tmp_path / "p.csv").write_text(HEADER + "a,b,FS,kin,F1,F2\n")
        with pytest.raises(ParseError):
            load_pair_list(tmp_path / "p.csv")

    def test_round_trip_with_folds(self, tmp_path):
        pairs = [KinPair("a", "b", "FD", True, "F1", "F1", 0), KinPair("c", "d", "MS", False, "F2", "F3", 4)]
        save_pair_list(tmp_path / "p.csv", pairs)
        assert load_pair_list(tmp_path / "p.csv") == pairs

    def test_triplet_round_trip(self, tmp_path):
        rows = [TriSubject("f", "m", "c", "FMD", True, "F1", "F1"), TriSubject("g", "n", "c", "FMD", False, "F2", "F1")]
        save_triplet_list(tmp_path / "t.csv", rows)
        assert load_triplet_list(tmp_path / "t.csv") == rows
        (tmp_path / "u.csv").write_text("img_father,img_mother,img_child,type,label\nf,m,c,FMX,kin\n")
        with pytest.raises(ParseError):
            load_triplet_list(tmp_path / "u.csv")

    def test_quality_table(self, tmp_path):
        save_quality_table(tmp_path / "q.csv", {"a": 0.25, "b": 1.0})
        assert load_quality_table(tmp_path / "q.csv") == {"a": 0.25, "b": 1.0}
        (tmp_path / "r.csv").write_text("img,score\na,1.5\n")
        with pytest.raises(ParseError):
            load_quality_table(tmp_path / "r.csv")


class TestSampling:
    def test_pigeonhole(self):
        pairs = positives(6, per_family=3)
        batch = sample_training_batch(pairs, 6, np.random.default_rng(0))
        assert sorted(p.family_a for p in batch) == [f"f{f}" for f in range(6)]

    def test_same_seed_same_batch(self):
        pairs = positives(10)
        a = sample_training_batch(pairs, 5, np.random.default_rng(42))
        b = sample_training_batch(pairs, 5, np.random.default_rng(42))
        assert a == b

    def test_no_family_collisions(self):
        pairs = positives(12, per_family=4) + [KinPair("x", "y", "FS", False, "f0", "f1")]
        rng = np.random.default_rng(7)
        for _ in range(1000):
            batch = sample_training_batch(pairs, 8, rng)
            assert len({p.family_a for p in batch}) == 8
            assert all(p.label for p in batch)

    def test_too_few_families(self):
        with pytest.raises(ProtocolError):
            sample_training_batch(positives(3), 4, np.random.default_rng(0))
        with pytest.raises(ProtocolError):
            sample_training_batch(positives(3), 1, np.random.default_rng(0))


QUALITY = {
    "a1": 0.95, "a2": 0.80, "b1": 0.90, "b2": 0.40, "c1": 0.55, "c2": 0.51, "d1": 0.50, "d2": 0.99,
    "e1": 0.10, "e2": 0.20, "f1": 0.70, "f2": 0.65, "g1": 0.30, "g2": 0.93, "h1": 0.62, "h2": 0.58,
    "i1": 0.505, "i2": 0.88, "j1": 1.00, "j2": 0.75,
}
TEN_PAIRS = [KinPair(f"{c}1", f"{c}2", "FD", True, c, c) for c in "abcdefghij"]


class TestQuality:
    def test_lower_of_pair(self):
        qt = {"x": 0.9, "y": 0.4}
        pair = KinPair("x", "y", "MS", True, "F", "F")
        assert pair_quality(pair, qt) == 0.4
        assert quality_filter([pair], qt, 0.5) == []

    def test_threshold_zero_keeps_all(self):
        assert quality_filter(TEN_PAIRS, QUALITY, 0.0) == TEN_PAIRS

    def test_hand_fixture(self):
        # lower scores: a .80 b .40 c .51 d .50 e .10 f .65 g .30 h .58 i .505 j .75
        kept = quality_filter(TEN_PAIRS, QUALITY, 0.5)
        assert [p.family_a for p in kept] == ["a", "c", "f", "h", "i", "j"]

    def test_missing_score_names_id(self):
        with pytest.raises(DataError, match="ghost"):
            pair_quality(KinPair("a1", "ghost", "FD", True, "a", "a"), QUALITY)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_antitone_in_threshold(self, t1, t2):
        lo, hi = min(t1, t2), max(t1, t2)
        kept_hi = set(quality_filter(TEN_PAIRS, QUALITY, hi))
        assert kept_hi <= set(quality_filter(TEN_PAIRS, QUALITY, lo))


class TestFolds:
    def test_predefined_passthrough(self):
        pairs = [KinPair(f"a{i}", f"b{i}", "FS", True, f"F{i}", f"F{i}", i % 3) for i in range(9)]
        spec = make_folds(pairs, 5)
        assert spec.k == 3
        assert spec.folds == {0: [0, 3, 6], 1: [1, 4, 7], 2: [2, 5, 8]}

    def test_partition_of_50_families(self):
        pairs = positives(50)
        spec = make_folds(pairs, 5, seed=3)
        seen = Counter(i for idx in spec.folds.values() for i in idx)
        assert sorted(seen) == list(range(len(pairs))) and set(seen.values()) == {1}
        fold_of = {}
        for f, idx in spec.folds.items():
            for i in idx:
                assert fold_of.setdefault(pairs[i].family_a, f) == f
        assert len(fold_of) == 50
        assert all(len(idx) == 20 for idx in spec.folds.values())

    def test_linked_families_stay_together(self):
        pairs = positives(10) + [KinPair("f0_p0", "f1_c0", "FS", False, "f0", "f1")]
        spec = make_folds(pairs, 5)
        fold_of = {pairs[i].family_a: f for f, idx in spec.folds.items() for i in idx}
        assert fold_of["f0"] == fold_of["f1"]
        assert set(spec.train_indices(0)).isdisjoint(spec.test_indices(0))

    def test_deterministic(self):
        assert make_folds(positives(20), 5, seed=1).folds == make_folds(positives(20), 5, seed=1).folds

    def test_too_few_families(self):
        with pytest.raises(ProtocolError):
            make_folds(positives(4), 5)


def pair_sims(ds, pairs, kind="r"):
    t = ds.tensors
    return [brute_cos(np.ravel(t[(p.img_a, kind)]).tolist(), np.ravel(t[(p.img_b, kind)]).tolist()) for p in pairs]


class TestSynthetic:
    def test_noise_zero_identical_within_family(self):
        ds = gen_synthetic(SyntheticConfig(noise=0.0), seed=1)
        kin = [p for p in ds.all_pairs() if p.label]
        for kind in ("X", "r"):
            assert np.allclose(pair_sims(ds, kin, kind), 1.0, atol=1e-12)

    def test_orthogonal_latents(self):
        ds = gen_synthetic(SyntheticConfig(families=2, members=3, noise=0.0, orthogonal_latents=True,
                                           split=(1.0, 0.0, 0.0)), seed=2)
        t = ds.tensors
        for kind in ("X", "r"):
            u = np.ravel(t[("F000_father", kind)]).tolist()
            v = np.ravel(t[("F001_father", kind)]).tolist()
            assert abs(brute_cos(u, v)) < 1e-12

    def test_positive_dominates_negative(self):
        ds = gen_synthetic(SyntheticConfig(families=20, members=4, noise=0.1), seed=0)
        pairs = ds.all_pairs()
        pos = pair_sims(ds, [p for p in pairs if p.label])
        neg = pair_sims(ds, [p for p in pairs if not p.label])
        assert mannwhitneyu(pos, neg, alternative="greater").pvalue < 1e-10
        assert min(pos) > max(neg)

    def test_layout(self):
        ds = gen_synthetic(SyntheticConfig(), seed=0)
        assert {k: len(v) for k, v in ds.split_families.items()} == {"train": 12, "val": 4, "test": 4}
        for split, fams in ds.split_families.items():
            for p in ds.pairs[split]:
                assert p.family_a in fams and p.family_b in fams
        for split in ("train", "val", "test"):
            labels = Counter(p.label for p in ds.pairs[split])
            assert labels[True] > 0 and labels[False] > 0
        assert len(ds.probes) == 4 and len(ds.gallery) == 12
        assert all(0.05 <= q <= 1.0 for q in ds.quality.values())
        assert len(ds.quality) == 80

    def test_deterministic(self):
        a, b = gen_synthetic(SyntheticConfig(), seed=5), gen_synthetic(SyntheticConfig(), seed=5)
        assert a.all_pairs() == b.all_pairs()
        assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    def test_images_mode(self):
        ds = gen_synthetic(SyntheticConfig(mode="images", families=6, image_size=8), seed=0, model_config=FaCoRConfig.toy())
        assert {k for _, k in ds.tensors} == {"image"}
        assert next(iter(ds.tensors.values())).shape == (8, 8, 3)

    def test_config_checks(self):
        with pytest.raises(ConfigurationError):
            SyntheticConfig(members=2)
        with pytest.raises(ConfigurationError):
            SyntheticConfig(mode="video")

    def test_folds_on_synthetic_pairs(self):
        ds = gen_synthetic(SyntheticConfig(), seed=0)
        spec = make_folds(ds.all_pairs(), 5)
        assert sum(len(v) for v in spec.folds.values()) == len(ds.all_pairs())
