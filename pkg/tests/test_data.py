from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fairmedl import data as D
from fairmedl.errors import ConfigurationError, ContractError, IngestionError

ADULT_CSV = Path(__file__).resolve().parents[1] / "data" / "adult.csv"


def _schema(**kw):
    base = dict(target="y", cluster="site", sensitive=["sex"], numeric=["age", "bmi"],
                categorical=["sex", "smoker"])
    base.update(kw)
    return D.DatasetSchema(**base)


CSV = """age,bmi,sex,smoker,site,y
40,22.5,F,no,a,1
51,30.1,M,yes,b,0
33,,F,no,a,0
62,27.0,M,no,c,1
"""


@pytest.fixture
def small_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text(CSV)
    return p


class TestSchema:
    def test_missing_required_key(self):
        with pytest.raises(ConfigurationError):
            D.DatasetSchema.from_dict({"target": "y", "cluster": "c"})

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            D.DatasetSchema.from_dict({"target": "y", "cluster": "c", "sensitive": ["s"],
                                       "colour": "red"})

    def test_target_cannot_be_feature(self):
        with pytest.raises(ConfigurationError):
            _schema(numeric=["age", "y"])

    def test_toml_and_json_agree(self, tmp_path):
        (tmp_path / "s.toml").write_text('target = "y"\ncluster = "site"\nsensitive = ["sex"]\n')
        (tmp_path / "s.json").write_text('{"target": "y", "cluster": "site", "sensitive": ["sex"]}')
        assert D.load_schema(tmp_path / "s.toml") == D.load_schema(tmp_path / "s.json")


class TestLoadCSV:
    def test_drops_rows_with_missing_values(self, small_csv):
        raw = D.load_csv(small_csv, _schema())
        assert len(raw) == 3 and raw.n_dropped == 1
        assert raw.y.tolist() == [1.0, 0.0, 1.0]

    def test_column_order_irrelevant(self, small_csv, tmp_path):
        df = pd.read_csv(small_csv, dtype=str, keep_default_na=False)
        shuffled = tmp_path / "shuffled.csv"
        df[["site", "y", "smoker", "bmi", "age", "sex"]].to_csv(shuffled, index=False)
        a, b = D.load_csv(small_csv, _schema()), D.load_csv(shuffled, _schema())
        assert a.fingerprint() == b.fingerprint()

    def test_unparseable_number_reports_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text(CSV.replace("62,27.0", "62,twenty"))
        with pytest.raises(IngestionError, match=r"'twenty'.*line 5"):
            D.load_csv(p, _schema())

    def test_missing_column(self, small_csv):
        with pytest.raises(IngestionError, match="height"):
            D.load_csv(small_csv, _schema(numeric=["age", "height"]))

    def test_nonbinary_target_without_positive_label(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text(CSV.replace(",a,1\n", ",a,2\n", 1))
        with pytest.raises(IngestionError):
            D.load_csv(p, _schema())

    def test_positive_label(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text(CSV.replace(",1\n", ",yes\n").replace(",0\n", ",no\n"))
        raw = D.load_csv(p, _schema(positive_label="yes"))
        assert raw.y.tolist() == [1.0, 0.0, 1.0]

    def test_exclusion_rule(self, small_csv):
        raw = D.load_csv(small_csv, _schema(exclude={"smoker": ["yes"]}))
        assert len(raw) == 2 and raw.provenance["excluded"] == 1

    def test_recode_keeps_token_as_category(self, tmp_path):
        p = tmp_path / "q.csv"
        p.write_text(CSV.replace("yes", "?"))
        raw = D.load_csv(p, _schema(recode={"?": "Unknown"}))
        assert "Unknown" in set(raw.frame["smoker"])

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(IngestionError):
            D.load_csv(tmp_path / "nope.csv", _schema())


class TestEncoding:
    def test_standardization_uses_fit_rows_only(self, small_csv):
        raw = D.load_csv(small_csv, _schema())
        b = D.encode_and_standardize(raw, [0, 1])
        ages = np.array([40.0, 51.0])
        j = b.feature_names.index("age")
        np.testing.assert_allclose(b.X[:2, j], (ages - ages.mean()) / ages.std())
        assert b.X[2, j] == pytest.approx((62 - ages.mean()) / ages.std())

    def test_unseen_category_encodes_as_zeros(self, small_csv):
        raw = D.load_csv(small_csv, _schema())
        b = D.encode_and_standardize(raw, [0, 2])  # both rows are non-smokers
        cols = b.encoder.blocks["smoker"]
        assert b.X[1, cols].tolist() == [0.0]
        assert b.X[0, cols].tolist() == [1.0]

    def test_constant_numeric_dropped(self, small_csv):
        raw = D.load_csv(small_csv, _schema())
        raw.frame["bmi"] = 5.0
        b = D.encode_and_standardize(raw, [0, 1, 2])
        assert "bmi" not in b.feature_names and b.encoder.dropped_numeric == ["bmi"]

    def test_clusters_outside_seen_get_minus_one(self, small_csv):
        raw = D.load_csv(small_csv, _schema())
        b = D.encode_and_standardize(raw, [0, 1], seen_clusters=["a", "b"])
        assert b.z.tolist() == [0, 1, -1]

    def test_empty_fit_rows(self, small_csv):
        with pytest.raises(ContractError):
            D.encode_and_standardize(D.load_csv(small_csv, _schema()), [])

    def test_encoder_meta_round_trip(self, small_csv):
        meta = D.encode_and_standardize(D.load_csv(small_csv, _schema()), [0, 1, 2]).encoder
        assert D.EncoderMeta.from_dict(meta.to_dict()) == meta


class TestPartitionAndFolds:
    def test_top_k_by_frequency(self):
        raw = D.synth_clustered(D.SynthConfig(n=400, n_clusters=5, seed=1))
        part = D.partition_seen_unseen(raw, 2)
        order = D.cluster_order(raw.cluster)
        assert part.seen_clusters == [order[0][0], order[1][0]]
        assert part.seen_rows.size == order[0][1] + order[1][1]
        assert part.seen_fraction == pytest.approx(part.seen_rows.size / 400)

    def test_top_k_out_of_range(self):
        raw = D.synth_clustered(D.SynthConfig(n=100, n_clusters=3))
        with pytest.raises(ConfigurationError):
            D.partition_seen_unseen(raw, 4)

    @given(st.integers(30, 300), st.integers(3, 10), st.integers(0, 100))
    def test_folds_partition_rows(self, n, k, seed):
        rows = np.arange(n) * 2 + 7
        labels = np.random.default_rng(seed).integers(0, 2, n)
        folds = D.kfold_split(rows, labels, k, seed)
        tests = np.concatenate([f.test for f in folds])
        assert np.array_equal(np.sort(tests), rows)
        for f in folds:
            assert np.intersect1d(f.train, f.val).size == 0
            assert np.intersect1d(f.train, f.test).size == 0
            assert np.intersect1d(f.val, f.test).size == 0
            assert f.train.size + f.val.size + f.test.size == n

    def test_folds_stratified(self):
        labels = np.array([1] * 30 + [0] * 70)
        folds = D.kfold_split(np.arange(100), labels, 10, 0)
        assert all(labels[f.test].sum() == 3 for f in folds)

    def test_k_too_small(self):
        with pytest.raises(ConfigurationError):
            D.kfold_split(np.arange(10), k=2)

    def test_resample_keeps_test_and_sizes(self):
        labels = np.random.default_rng(0).integers(0, 2, 200)
        fold = D.kfold_split(np.arange(200), labels, 5, 0)[0]
        new = D.resample_train_val(fold, labels, seed=9)
        assert np.array_equal(new.test, fold.test)
        assert new.val.size == fold.val.size and new.train.size == fold.train.size
        assert not np.array_equal(new.val, fold.val)


class TestProbes:
    def test_probe_correlates_with_label(self):
        raw = D.synth_clustered(D.SynthConfig(n=3000, seed=2))
        probed = D.inject_probes(raw, D.ProbeSpec(count=2, cluster_coeff=0.0, seed=1))
        r = np.corrcoef(probed.frame["probe_1"], raw.y)[0, 1]
        assert r == pytest.approx(0.5 / np.sqrt(0.5 ** 2 + 0.5 ** 2), abs=0.05)
        assert probed.schema.probes == ["probe_1", "probe_2"]
        assert "probe_1" in probed.schema.numeric

    def test_deterministic(self):
        raw = D.synth_clustered(D.SynthConfig(n=200))
        a = D.inject_probes(raw, D.ProbeSpec(seed=4)).frame
        b = D.inject_probes(raw, D.ProbeSpec(seed=4)).frame
        pd.testing.assert_frame_equal(a, b)

    def test_zero_count_is_noop(self):
        raw = D.synth_clustered(D.SynthConfig(n=50))
        assert D.inject_probes(raw, D.ProbeSpec(count=0)) is raw

    def test_probe_names_tracked_in_encoder(self):
        raw = D.inject_probes(D.synth_clustered(D.SynthConfig(n=100)), D.ProbeSpec(count=1))
        b = D.encode_and_standardize(raw, np.arange(100))
        assert b.encoder.probes == ["probe_1"] and "probe_1" in b.feature_names


class TestSynthetic:
    def test_shape_and_schema(self):
        cfg = D.SynthConfig(n=500, d=4, n_clusters=3, seed=5)
        raw = D.synth_clustered(cfg)
        assert len(raw) == 500 and set(raw.frame["s"]) == {"s0", "s1"}
        assert set(raw.cluster) <= {"c0", "c1", "c2"}
        assert set(np.unique(raw.y)) == {0.0, 1.0}

    def test_bias_raises_positive_rate_of_s1(self):
        raw = D.synth_clustered(D.SynthConfig(n=20_000, bias_strength=2.0, seed=0))
        s1 = raw.frame["s"].to_numpy() == "s1"
        assert raw.y[s1].mean() - raw.y[~s1].mean() > 0.2

    def test_regression_target(self):
        raw = D.synth_clustered(D.SynthConfig(n=100, task="regression"))
        assert raw.schema.task == "regression" and len(np.unique(raw.y)) == 100

    def test_invalid_rate(self):
        with pytest.raises(ConfigurationError):
            D.SynthConfig(sensitive_rate=1.0)


class TestCache:
    def _build(self, d, seed=0):
        raw = D.synth_clustered(D.SynthConfig(n=300, seed=seed))
        part = D.partition_seen_unseen(raw, 5)
        folds = D.kfold_split(part.seen_rows, raw.y[part.seen_rows], 5, 0)
        return raw, part, folds, D.save_cache(d, raw, part, folds)

    def test_round_trip(self, tmp_path):
        raw, part, folds, _ = self._build(tmp_path / "c")
        raw2, part2, folds2, meta = D.load_cache(tmp_path / "c")
        assert raw2.fingerprint() == raw.fingerprint()
        assert np.array_equal(part2.unseen_rows, part.unseen_rows)
        for a, b in zip(folds, folds2):
            assert np.array_equal(np.sort(a.train), b.train)
            assert np.array_equal(np.sort(a.test), b.test)

    def test_hash_deterministic(self, tmp_path):
        assert self._build(tmp_path / "a")[3] == self._build(tmp_path / "b")[3]
        assert self._build(tmp_path / "a")[3] != self._build(tmp_path / "c", seed=1)[3]

    def test_missing_cache(self, tmp_path):
        with pytest.raises(ContractError):
            D.load_cache(tmp_path)


@pytest.mark.skipif(not ADULT_CSV.exists(), reason="Adult CSV not present")
class TestAdult:
    def test_counts_and_positive_rate(self):
        raw = D.load_csv(ADULT_CSV, D.adult_schema())
        assert len(raw) == 32_538
        assert D.positive_rate(raw) == pytest.approx(0.2407, abs=0.005)
        assert set(raw.frame["marital-status"]) == {
            "Divorced", "Married-civ-spouse", "Married-spouse-absent", "Never-married",
            "Separated", "Widowed"}

    def test_top_six_occupations(self):
        raw = D.load_csv(ADULT_CSV, D.adult_schema())
        part = D.partition_seen_unseen(raw, 6)
        assert 0.66 <= part.seen_fraction <= 0.76
        assert part.seen_rows.size == 23_002

    def test_age_groups(self):
        assert D.adult_age_group(np.array([30, 31, 45, 46])).tolist() == [
            "<=30", "31-45", "31-45", ">45"]
