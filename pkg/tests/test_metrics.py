import numpy as np
import pytest

from app.exceptions import DegenerateClustering, EmptyInput, MetricError, SingleClass
from app.metrics import cluster_metrics, multitask_roc_auc, rmse, roc_auc, write_report
from app.schemas import MetricsReport, SeedResult, TaskType


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_force_dbi(X, keys):
    groups = sorted(set(keys))
    members = [X[[k == g for k in keys]] for g in groups]
    centroids = [m.mean(axis=0) for m in members]
    scatter = [np.mean(np.linalg.norm(m - c, axis=1)) for m, c in zip(members, centroids)]
    worst = []
    for i in range(len(groups)):
        ratios = [
            (scatter[i] + scatter[j]) / np.linalg.norm(centroids[i] - centroids[j])
            for j in range(len(groups))
            if j != i
        ]
        worst.append(max(ratios))
    return float(np.mean(worst))


def brute_force_silhouette(X, keys):
    keys = np.asarray(keys)
    values = []
    for i in range(len(X)):
        dist = np.linalg.norm(X - X[i], axis=1)
        same = keys == keys[i]
        a = dist[same].sum() / (same.sum() - 1)
        b = min(dist[keys == g].mean() for g in set(keys.tolist()) if g != keys[i])
        values.append((b - a) / max(a, b))
    return float(np.mean(values))


def two_clouds(rng, n, offset):
    X = np.vstack([rng.normal(size=(n, 2)), rng.normal(size=(n, 2)) + offset])
    return X, ["a"] * n + ["b"] * n


class TestRocAuc:
    def test_perfect(self):
        assert roc_auc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_scores_equal(self):
        assert roc_auc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == 0.5

    def test_hand_case(self):
        assert roc_auc([0.8, 0.6, 0.4], [1, 0, 1]) == pytest.approx(0.5)

    def test_matches_pair_counting(self):
        """Agrees with brute-force pair counting on random sets with ties."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(4, 30))
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            scores = np.round(rng.random(n), 1)
            assert roc_auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels))

    def test_single_class(self):
        with pytest.raises(SingleClass):
            roc_auc([0.1, 0.2], [1, 1])

    def test_empty(self):
        with pytest.raises(EmptyInput):
            roc_auc([], [])

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            roc_auc([0.1, 0.2], [1])

    def test_multitask_skips_single_class_task(self):
        scores = np.array([[0.9, 0.5], [0.1, 0.4], [0.8, 0.3]])
        labels = np.array([[1, 1], [0, 1], [1, np.nan]])
        mean, skipped = multitask_roc_auc(scores, labels)
        assert mean == 1.0
        assert skipped == [1]


class TestRmse:
    def test_identical(self):
        assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_case(self):
        assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))

    def test_single_element(self):
        assert rmse([2.5], [-1.0]) == pytest.approx(3.5)

    def test_missing_labels_ignored(self):
        assert rmse([1.0, 9.0], [2.0, np.nan]) == pytest.approx(1.0)

    def test_all_missing(self):
        with pytest.raises(EmptyInput):
            rmse([1.0], [np.nan])


class TestClusterMetrics:
    """Davies-Bouldin index and silhouette on synthetic point clouds."""

    def test_well_separated(self):
        X, keys = two_clouds(np.random.default_rng(1), 50, 20.0)
        dbi, silhouette = cluster_metrics(X, keys)
        assert silhouette > 0.9
        assert dbi < 0.5

    def test_overlapping_clouds(self):
        X, keys = two_clouds(np.random.default_rng(2), 100, 0.0)
        dbi, silhouette = cluster_metrics(X, keys)
        assert dbi > 3.0
        assert abs(silhouette) < 0.1

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        X = np.vstack([rng.normal(size=(15, 3)) + shift for shift in (0.0, 2.0, 4.0)])
        keys = ["x"] * 15 + ["y"] * 15 + ["z"] * 15
        dbi, silhouette = cluster_metrics(X, keys)
        assert dbi == pytest.approx(brute_force_dbi(X, keys), abs=1e-9)
        assert silhouette == pytest.approx(brute_force_silhouette(X, keys), abs=1e-9)

    def test_single_point_clusters(self):
        with pytest.raises(DegenerateClustering):
            cluster_metrics(np.eye(3), ["a", "b", "c"])

    def test_single_group(self):
        with pytest.raises(DegenerateClustering):
            cluster_metrics(np.ones((4, 2)), ["a"] * 4)


class TestReport:
    def test_key_value_lines(self, tmp_path):
        report = MetricsReport(
            task=TaskType.CLASSIFY,
            metric="roc_auc",
            init="pretrained",
            per_seed=[
                SeedResult(seed=0, metric=0.75, valid_metric=0.8, best_epoch=3),
                SeedResult(seed=1, metric=0.85, valid_metric=0.7, best_epoch=5, skipped_tasks=[2]),
            ],
            mean=0.8,
            std=0.05,
        )
        lines = write_report(report, tmp_path / "out" / "report.txt").read_text().splitlines()
        assert lines[:3] == ["task=classify", "metric=roc_auc", "init=pretrained"]
        assert "mean=0.800000" in lines
        assert "n_seeds=2" in lines
        assert "seed.1.skipped_tasks=2" in lines
        assert "seed.0.best_epoch=3" in lines
