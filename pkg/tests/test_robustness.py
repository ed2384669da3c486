import numpy as np
import pytest

from audioshield.attacks import AttackReport
from audioshield.robustness import (
    EvalReport,
    assign_folds,
    average_rank,
    fooling_rate,
    lid_batch,
    lid_detectability,
    lid_score,
    tradeoff_distance,
    write_tradeoff_svg,
)


class TestLidScore:
    def test_direct_formula(self):
        ref = np.array([[1.0], [2.0]])
        score = lid_score(np.array([0.0]), ref, k=2)
        assert score == pytest.approx(-2.0 / (np.log(0.5) + np.log(1.0)))
        assert score == pytest.approx(1.0 / (0.5 * np.log(2)), rel=1e-12)

    def test_equal_distances_diverge(self):
        ref = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
        assert lid_score(np.zeros(2), ref, k=3) == float("inf")

    def test_duplicates_dropped(self):
        ref = np.array([[0.0], [0.0], [1.0], [2.0]])
        a = lid_score(np.array([0.0]), ref, k=2)
        b = lid_score(np.array([0.0]), np.array([[1.0], [2.0]]), k=2)
        assert a == pytest.approx(b)

    def test_too_few_neighbors(self):
        with pytest.raises(ValueError):
            lid_score(np.array([0.0]), np.array([[0.0], [1.0]]), k=2)
        with pytest.raises(ValueError):
            lid_score(np.array([0.0]), np.array([[1.0], [2.0]]), k=1)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        ref = rng.normal(size=(100, 3))
        q = rng.normal(size=3)
        a = lid_score(q, ref, k=10)
        b = lid_score(q * 7.3, ref * 7.3, k=10)
        assert a == pytest.approx(b, rel=1e-9)

    def test_line_segment_dimension(self):
        rng = np.random.default_rng(1)
        pts = np.zeros((2000, 3))
        pts[:, 0] = rng.uniform(0, 1, 2000)
        queries = rng.choice(2000, 50, replace=False)
        scores = []
        for qi in queries:
            mask = np.ones(2000, dtype=bool)
            mask[qi] = False
            scores.append(lid_score(pts[qi], pts[mask], k=20))
        assert 0.8 <= float(np.mean(scores)) <= 1.2


class TestLidDetectability:
    def test_identical_sets_indistinguishable(self):
        # noise at data scale so noisy points are not near-duplicates
        rng = np.random.default_rng(2)
        normal = rng.normal(size=(120, 8))
        noisy = normal + rng.normal(0, 1.0, size=normal.shape)
        res = lid_detectability(normal, noisy, noisy.copy(), k_values=[10], seed=3)
        assert abs(res[10].mean_difference) < 0.6
        assert abs(res[10].balanced_accuracy - 50.0) < 20.0

    def test_higher_dimensional_positives_detected(self):
        rng = np.random.default_rng(4)
        n = 240
        # negatives live on a 2-D sheet, positives fill 8 dimensions
        normal = np.zeros((n, 8))
        normal[:, :2] = rng.uniform(-1, 1, (n, 2))
        noisy = normal + rng.normal(0, 0.01, normal.shape) * np.array([1, 1, 0, 0, 0, 0, 0, 0])
        adv = rng.uniform(-1, 1, (n, 8))
        res = lid_detectability(normal, noisy, adv, k_values=[20], seed=5)
        assert res[20].mean_difference > 0.5
        assert res[20].balanced_accuracy > 80.0

    def test_k_larger_than_batch_grows_reference(self):
        rng = np.random.default_rng(6)
        normal = rng.normal(size=(150, 4))
        res = lid_detectability(normal, normal + 0.01, rng.normal(size=(150, 4)),
                                k_values=[120], batch_size=100, seed=7)
        assert 120 in res


class TestFoolingRate:
    class _Const:
        def __init__(self, label):
            self.label = label

        def predict(self, x):
            return self.label

    def _reports(self, advs, labels):
        return [
            AttackReport(a, a, int(l), int(l), False, 0.0, 0.0, 0)
            for a, l in zip(advs, labels)
        ]

    def test_all_fooled(self):
        reports = self._reports(np.zeros((4, 2)), [1, 1, 1, 1])
        assert fooling_rate(reports, self._Const(0)) == 100.0

    def test_none_fooled(self):
        reports = self._reports(np.zeros((4, 2)), [0, 0, 0, 0])
        assert fooling_rate(reports, self._Const(0)) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fooling_rate([], self._Const(0))


class TestTradeoffDistance:
    def test_values(self):
        assert tradeoff_distance(0, 0) == 0.0
        assert tradeoff_distance(3, 4) == 5.0

    def test_monotone(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            e, f = rng.uniform(0, 99, 2)
            de, df = rng.uniform(0, 100 - max(e, f), 2)
            assert tradeoff_distance(e + de, f) >= tradeoff_distance(e, f)
            assert tradeoff_distance(e, f + df) >= tradeoff_distance(e, f)

    def test_domain(self):
        with pytest.raises(ValueError):
            tradeoff_distance(-1, 0)
        with pytest.raises(ValueError):
            tradeoff_distance(0, 101)


class TestAverageRank:
    def test_best_everywhere(self):
        table = np.array([[99.0, 98.0], [50.0, 60.0], [10.0, 20.0]])
        r = average_rank(table, higher_is_better=True)
        assert r[0] == 1.0 and r[2] == 3.0

    def test_midrank_ties(self):
        table = np.array([[5.0, 1.0], [5.0, 2.0]])
        r = average_rank(table, higher_is_better=False)
        assert r[0] == pytest.approx((1.5 + 1) / 2)
        assert r[1] == pytest.approx((1.5 + 2) / 2)

    def test_rank_conservation(self):
        rng = np.random.default_rng(9)
        table = rng.normal(size=(5, 7))
        table[2, 3] = table[4, 3]  # force one tie
        for better in (True, False):
            ranks = np.stack(
                [average_rank(table[:, j : j + 1], better) for j in range(7)], axis=1
            )
            n = table.shape[0]
            assert np.allclose(ranks.sum(axis=0), n * (n + 1) / 2)


class TestFolds:
    def test_partition_and_balance(self):
        sources = [f"s{i}" for i in range(100)]
        labels = [i % 4 for i in range(100)]
        assign = assign_folds(sources, labels, n_folds=5, seed=0)
        counts = np.bincount(list(assign.values()), minlength=5)
        assert counts.sum() == 100
        assert np.all(counts == 20)

    def test_deterministic(self):
        sources = [f"s{i}" for i in range(30)]
        labels = [i % 3 for i in range(30)]
        a = assign_folds(sources, labels, 5, seed=1)
        b = assign_folds(sources, labels, 5, seed=1)
        assert a == b

    def test_augmented_variants_follow_source(self):
        sources = ["a", "a", "b", "b", "c", "c", "d", "d"]
        labels = [0, 0, 1, 1, 0, 0, 1, 1]
        assign = assign_folds(sources, labels, 2, seed=2)
        assert set(assign) == {"a", "b", "c", "d"}

    def test_conflicting_labels_rejected(self):
        with pytest.raises(ValueError):
            assign_folds(["a", "a"], [0, 1], 2, seed=0)

    def test_impossible_stratification(self):
        # one class has a single source: it must vanish from one training fold
        with pytest.raises(ValueError):
            assign_folds(["a", "b", "c"], [0, 0, 1], 2, seed=0)


class TestReportArtifacts:
    def _report(self):
        report = EvalReport(
            model_names=["cnn", "proposed"],
            accuracy={"cnn": 95.0, "proposed": 90.0},
            fooling={"cnn": {"fgsm": 90.0, "evasion": 30.0}, "proposed": {"fgsm": 20.0, "evasion": 40.0}},
        )
        return report.finalize()

    def test_finalize_tradeoff(self):
        report = self._report()
        err, fool, dist = report.tradeoff["cnn"]
        assert err == 5.0 and fool == 60.0
        assert dist == pytest.approx(tradeoff_distance(5.0, 60.0))

    def test_svg_deterministic_and_annotated(self, tmp_path):
        report = self._report()
        p1, p2 = tmp_path / "a.svg", tmp_path / "b.svg"
        write_tradeoff_svg(report, p1)
        write_tradeoff_svg(report, p2)
        assert p1.read_bytes() == p2.read_bytes()
        text = p1.read_text()
        assert "<svg" in text
        for name in report.model_names:
            assert f"{name} (d = {report.tradeoff[name][2]:.2f})" in text
