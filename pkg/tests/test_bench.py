import csv
import io
import math
import xml.etree.ElementTree as ET
from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, strategies as st

from radtex.bench import UndefinedMetricError, auc, aucpr, macro_f1, mean_ci
from radtex.bench.harness import CSV_HEADER, ExperimentSpec, run_experiment
from radtex.bench.metrics import MetricRecord
from radtex.synthdata import FINDINGS
from radtex.train import ConfigError

T975_DF1 = 12.706204736174707  # two-sided 95% Student-t quantile, 1 dof (table value)


def auc_oracle(s, y):
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p, n in product(pos, neg))
    return float(wins / (len(pos) * len(neg)))


def aucpr_oracle(s, y):
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    total, hits = Fraction(0), 0
    for rank, i in enumerate(order, 1):
        if y[i]:
            hits += 1
            total += Fraction(hits, rank)
    return float(total / sum(y))


def _pairs(values):
    return st.integers(2, 20).flatmap(lambda n: st.tuples(
        st.lists(values, min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n)).filter(lambda t: 0 < sum(t[1]) < n))


# coarse grid: many ties, and monotone transforms stay strict in float64
scores_labels = _pairs(st.integers(-40, 40).map(lambda k: k / 8))
float_scores_labels = _pairs(st.floats(-1e6, 1e6, allow_nan=False) | st.sampled_from([0.0, 0.5, 1.0]))


class TestAUC:
    @given(scores_labels)
    def test_matches_oracle_exactly(self, sl):
        s, y = sl
        assert auc(s, y) == auc_oracle(s, y)
        assert aucpr(s, y) == aucpr_oracle(s, y)

    @given(float_scores_labels)
    def test_matches_oracle_exactly_on_floats(self, sl):
        s, y = sl
        assert auc(s, y) == auc_oracle(s, y)
        assert aucpr(s, y) == aucpr_oracle(s, y)

    def test_worked_examples(self):
        assert auc([0.9, 0.4, 0.3, 0.5], [1, 1, 0, 0]) == 0.75
        assert aucpr([0.9, 0.8, 0.7], [1, 0, 1]) == 5 / 6
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.5
        assert aucpr([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0
        assert aucpr([5, 4, 3, 2, 1], [0, 0, 0, 0, 1]) == pytest.approx(1 / 5)

    @given(scores_labels)
    def test_symmetry_and_monotone_invariance(self, sl):
        s, y = sl
        s = np.asarray(s)
        assert auc(-s, y) == pytest.approx(1 - auc(s, y), abs=1e-15)
        assert auc(np.exp(s / 2) * 3 + 1, y) == auc(s, y)
        assert 0 <= aucpr(s, y) <= 1

    @pytest.mark.parametrize("y", [[1, 1, 1], [0, 0, 0]])
    def test_single_class(self, y):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2, 0.3], y)
        if not any(y):
            with pytest.raises(UndefinedMetricError):
                aucpr([0.1, 0.2, 0.3], y)


class TestMacroF1:
    def test_hand_traces(self):
        assert macro_f1([0, 0, 1, 1], [0, 1, 0, 1], 2) == 0.5
        labels = [0, 1, 2, 3] * 5
        assert macro_f1([0] * 20, labels, 4) == pytest.approx(0.1)
        assert macro_f1(labels, labels, 4) == 1.0

    def test_absent_class_scores_zero(self):
        assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)


class TestMeanCI:
    def test_two_point_oracle(self):
        m, hw = mean_ci([0.0, 1.0])
        assert m == 0.5
        # sample standard deviation sqrt(1/2), standard error 1/2
        assert hw == pytest.approx(T975_DF1 * 0.5, rel=1e-9)

    def test_constant(self):
        assert mean_ci([0.7] * 4) == (pytest.approx(0.7), 0.0)

    def test_level_monotone(self, rng):
        v = rng.random(6)
        assert mean_ci(v, 0.99)[1] > mean_ci(v, 0.95)[1] > mean_ci(v, 0.5)[1]

    def test_needs_two(self):
        with pytest.raises(ValueError):
            mean_ci([1.0])

    def test_inverse_sqrt_scaling(self):
        from scipy import stats
        rng = np.random.default_rng(0)
        avg = {n: np.mean([mean_ci(rng.standard_normal(n))[1] for _ in range(400)]) for n in (5, 20, 80)}
        for a, b in ((5, 20), (20, 80)):
            t_ratio = stats.t.ppf(0.975, a - 1) / stats.t.ppf(0.975, b - 1)
            assert avg[a] / avg[b] == pytest.approx(2 * t_ratio, rel=0.1)


def test_metric_record_bounds():
    with pytest.raises(ValueError):
        MetricRecord("pathology9", "frozen", 1.0, 10, 0, auc=1.2, aucpr=0.5)


SMALL = {"backbone": {"widths": [4, 8, 8, 8], "blocks": [1, 1, 1, 1]},
         "textual": {"width": 16, "layers": 1, "heads": 2, "ffn": 32, "dropout": 0.0}}


def tiny_spec(**kw):
    base = dict(modes=["frozen"], n_train=[10, 20], fractions=[1.0], trials=2, seed=3,
                synth={"canvas": 32}, n_pretrain=24, n_downstream=40, n_test=40, model=SMALL,
                pretrain={"epochs": 1, "batch_size": 8, "vocab_size": 120},
                transfer={"frozen": {"epochs": 2, "batch_size": 8}, "scratch": {"epochs": 1, "batch_size": 8}})
    base.update(kw)
    return ExperimentSpec.from_dict(base)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    recs = run_experiment(tiny_spec(), out)
    return out, recs


class TestHarness:
    def test_counting_contract(self, tiny_run):
        out, recs = tiny_run
        assert len(recs) == 4
        rows = list(csv.DictReader(io.StringIO((out / "results.csv").read_text())))
        assert len(rows) == 4
        assert list(rows[0])[:len(CSV_HEADER)] == CSV_HEADER
        assert sorted(p.name for p in out.glob("*.svg")) == ["pathology9.svg"]

    def test_average_matches_per_finding_columns(self, tiny_run):
        out, _ = tiny_run
        for row in csv.DictReader(io.StringIO((out / "results.csv").read_text())):
            cols = [float(row[f"auc_{f}"]) for f in FINDINGS if row[f"auc_{f}"]]
            assert len(cols) == 9
            assert abs(float(row["auc"]) - sum(cols) / len(cols)) <= 1e-12

    def test_rerun_identical_bytes(self, tiny_run, tmp_path):
        out, _ = tiny_run
        run_experiment(tiny_spec(), tmp_path)
        for name in ("results.csv", "aggregate.csv", "pathology9.svg"):
            assert (tmp_path / name).read_bytes() == (out / name).read_bytes()

    def test_svg_parses(self, tiny_run):
        out, _ = tiny_run
        root = ET.fromstring((out / "pathology9.svg").read_text())
        assert root.tag.endswith("svg")
        assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) >= 2

    def test_aggregate_columns(self, tiny_run):
        out, _ = tiny_run
        rows = list(csv.DictReader(io.StringIO((out / "aggregate.csv").read_text())))
        assert len(rows) == 2 and {"auc_mean", "auc_ci95"} <= set(rows[0])
        assert all(float(r["auc_ci95"]) >= 0 for r in rows)

    def test_scratch_row_count_across_fractions(self, tmp_path):
        spec = tiny_spec(modes=["scratch"], n_train=[10], fractions=[0.5, 1.0], trials=2)
        recs = run_experiment(spec, tmp_path)
        assert len(recs) == 1 * 1 * 2 * 2
        assert {r.pretrain_fraction for r in recs} == {0.5, 1.0}

    def test_oversized_n_train(self):
        with pytest.raises(ConfigError, match="frozen/n_train=1000"):
            run_experiment(tiny_spec(n_train=[10, 1000]))

    @pytest.mark.parametrize("kw", [{"modes": []}, {"modes": ["pretrain"]}, {"fractions": [0.0]},
                                    {"n_train": [0]}, {"trials": 0}, {"bogus": 1}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigError):
            tiny_spec(**kw)
