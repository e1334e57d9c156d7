import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pdt_hfr.errors import ValidationError
from pdt_hfr.metrics import (
    FAR_TARGETS,
    REPORT_KEYS,
    IdentificationSet,
    MetricsReport,
    ScoreSet,
    aggregate_folds,
    auc,
    eer,
    evaluate,
    read_report,
    rank1,
    rank1_from_scores,
    roc,
    score,
    score_matrix,
    vr_at_far,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.fixture(scope="module")
def score_sets():
    rng = np.random.default_rng(2024)
    return [oracles.random_score_set(rng) for _ in range(100)]


class TestAgainstOracles:
    def test_eer(self, score_sets):
        for g, i in score_sets:
            assert eer(ScoreSet(g, i)) == oracles.eer(g, i)

    def test_auc(self, score_sets):
        for g, i in score_sets:
            assert auc(ScoreSet(g, i)) == oracles.auc(g, i)

    @pytest.mark.parametrize("target", FAR_TARGETS)
    def test_vr_at_far(self, score_sets, target):
        for g, i in score_sets:
            assert vr_at_far(ScoreSet(g, i), target) == oracles.vr_at_far(g, i, target)

    @pytest.mark.parametrize("seed", range(5))
    def test_rank1(self, seed):
        rng = np.random.default_rng(seed)
        n_ids = int(rng.integers(2, 12))
        gallery_ids = [f"id{k % n_ids}" for k in range(n_ids * int(rng.integers(1, 4)))]
        rng.shuffle(gallery_ids)
        probe_ids = [gallery_ids[k] for k in rng.integers(0, len(gallery_ids), 50)]
        probes = unit(rng.standard_normal((50, 6)))
        gallery = unit(rng.standard_normal((len(gallery_ids), 6)))
        s = score_matrix(probes, gallery)
        if seed % 2:
            s = np.round(s, 1)  # plenty of ties
        assert rank1_from_scores(s, probe_ids, gallery_ids) == oracles.rank1(s.tolist(), probe_ids, gallery_ids)


class TestExamples:
    def test_separable(self):
        s = ScoreSet([0.9, 0.8], [0.1, 0.2])
        assert eer(s) == 0.0 and auc(s) == 1.0
        for t in FAR_TARGETS:
            assert vr_at_far(s, t)[0] == 1.0

    def test_interleaved(self):
        assert eer(ScoreSet([0.6, 0.4], [0.5, 0.3])) == 0.5 == oracles.eer([0.6, 0.4], [0.5, 0.3])

    def test_identical_lists(self):
        vals = [0.1, 0.4, 0.4, 0.9]
        assert auc(ScoreSet(vals, vals)) == 0.5

    def test_roc_endpoints(self):
        pts = roc(ScoreSet([0.3, 0.7], [0.1, 0.5, 0.6]))
        assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)

    def test_far_one_in_thousand(self):
        rng = np.random.default_rng(0)
        imp = rng.standard_normal(1000)
        vr, thr = vr_at_far(ScoreSet([0.0], imp), 1e-3)
        assert np.sum(imp >= thr) == 1
        assert thr == np.sort(imp)[-1]

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            ScoreSet([], [0.1])

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            ScoreSet([np.nan], [0.1])

    @pytest.mark.parametrize("target", [0.0, 1.0, -0.1])
    def test_bad_far_target(self, target):
        with pytest.raises(ValidationError):
            vr_at_far(ScoreSet([1.0], [0.0]), target)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.lists(st.floats(-5, 5), min_size=1, max_size=30))
def test_rank_statistics_invariant_under_monotone_map(g, i):
    base = ScoreSet(g, i)
    # exp(x/4) is strictly increasing and keeps distinct doubles distinct on this range
    moved = ScoreSet(np.exp(np.asarray(g) / 4), np.exp(np.asarray(i) / 4))
    if len(set(moved.genuine) | set(moved.impostor)) != len(set(g) | set(i)):
        return
    assert eer(base) == eer(moved)
    assert auc(base) == auc(moved)
    for t in FAR_TARGETS:
        assert vr_at_far(base, t)[0] == vr_at_far(moved, t)[0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.lists(st.floats(-5, 5), min_size=1, max_size=40))
def test_vr_monotone_in_far_and_rates_bounded(g, i):
    s = ScoreSet(g, i)
    vrs = [vr_at_far(s, t)[0] for t in FAR_TARGETS]
    assert all(a >= b for a, b in zip(vrs, vrs[1:]))
    assert 0 <= eer(s) <= 1 and 0 <= auc(s) <= 1


class TestScore:
    def test_self_and_orthogonal(self):
        e = unit([1.0, 2.0, 2.0])
        assert score(e, e) == pytest.approx(1.0, abs=1e-15)
        assert score([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = unit(rng.standard_normal(16)), unit(rng.standard_normal(16))
        assert score(a, b) == score(b, a)

    def test_non_unit_rejected(self):
        with pytest.raises(ValidationError):
            score([1.0, 1.0], [1.0, 0.0])

    def test_tolerance(self):
        assert score([1.0 + 5e-7, 0.0], [1.0, 0.0]) == pytest.approx(1.0, abs=1e-6)


class TestRank1:
    def test_probes_equal_gallery(self):
        g = unit(np.random.default_rng(2).standard_normal((5, 4)))
        ids = list("abcde")
        assert rank1(IdentificationSet(g, ids, g, ids)) == 1.0

    def test_correct_identity_second(self):
        gallery = unit([[1.0, 0.0], [0.8, 0.6]])
        probe = unit([[1.0, 0.1]])
        assert rank1(IdentificationSet(gallery, ["x", "y"], probe, ["y"])) == 0.0

    def test_max_over_entries_of_one_identity(self):
        scores = np.array([[0.2, 0.5, 0.9]])
        assert rank1_from_scores(scores, ["a"], ["a", "b", "a"]) == 1.0

    def test_tie_goes_to_first_identity(self):
        scores = np.array([[0.5, 0.5]])
        assert rank1_from_scores(scores, ["a"], ["a", "b"]) == 1.0
        assert rank1_from_scores(scores, ["b"], ["a", "b"]) == 0.0

    def test_empty_gallery(self):
        with pytest.raises(ValidationError):
            IdentificationSet(np.zeros((0, 3)), [], np.zeros((1, 3)), ["a"])

    def test_open_set_probe_rejected(self):
        with pytest.raises(ValidationError):
            IdentificationSet(unit(np.eye(2)), ["a", "b"], unit(np.eye(2)[:1]), ["c"])


def report_with(value):
    return MetricsReport(auc=value, eer=value, rank1=value, vr_at_far={t: value for t in FAR_TARGETS})


class TestAggregation:
    def test_single_fold_zero_std(self):
        agg = aggregate_folds([report_with(0.7)])
        assert all(std == 0.0 for _, std in agg.values())

    def test_two_folds(self):
        agg = aggregate_folds([report_with(90.0), report_with(100.0)])
        assert agg["rank1"] == (95.0, 5.0)

    def test_order_invariant(self):
        reports = [report_with(v) for v in (0.1, 0.35, 0.8, 0.55)]
        assert aggregate_folds(reports) == aggregate_folds(reports[::-1])

    def test_empty(self):
        with pytest.raises(ValidationError):
            aggregate_folds([])


class TestReportFiles:
    def test_keys_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        g = unit(rng.standard_normal((6, 8)))
        p = unit(g + 0.3 * rng.standard_normal((6, 8)))
        ids = [f"{k:03d}" for k in range(6)]
        report, sset = evaluate(IdentificationSet(g, ids, p, ids))
        report.write(tmp_path, roc(sset))
        values = read_report(tmp_path / "metrics.txt")
        assert tuple(values) == REPORT_KEYS
        assert values == report.as_dict()
        lines = (tmp_path / "roc.csv").read_text().splitlines()
        assert lines[0] == "FAR,TAR" and lines[1] == "0.000000,0.000000" and lines[-1] == "1.000000,1.000000"

    def test_counts(self):
        ids = ["a", "a", "b"]
        g = unit(np.eye(3))
        report, _ = evaluate(IdentificationSet(g, ids, g, ids))
        assert report.n_genuine == 5 and report.n_impostor == 4 and report.rank1 == 1.0
