"""Evaluation metrics and the key=value metrics report."""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import davies_bouldin_score, roc_auc_score, silhouette_score

from app.exceptions import DegenerateClustering, EmptyInput, MetricError, SingleClass
from app.schemas import MetricsReport

logger = logging.getLogger(__name__)


def roc_auc(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Area under the ROC curve for one task; ties count one half."""
    y_score = np.asarray(scores, dtype=np.float64).ravel()
    y_true = np.asarray(labels, dtype=np.float64).ravel()
    if y_score.shape != y_true.shape:
        raise MetricError(f"{y_score.size} scores for {y_true.size} labels")
    if y_true.size == 0:
        raise EmptyInput("roc_auc needs at least one labelled example")
    classes = np.unique(y_true)
    if classes.size < 2:
        raise SingleClass(f"only class {classes[0]:g} present")
    return float(roc_auc_score(y_true, y_score))


def multitask_roc_auc(
    scores: np.ndarray, labels: np.ndarray
) -> Tuple[float, List[int]]:
    """Mean ROC-AUC over tasks that have both classes.

    ``labels`` may contain NaN for missing entries; those are ignored per
    task. Returns the mean and the indices of skipped tasks.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} vs labels {labels.shape}")
    values, skipped = [], []
    for task in range(labels.shape[1]):
        present = ~np.isnan(labels[:, task])
        try:
            values.append(roc_auc(scores[present, task], labels[present, task]))
        except (SingleClass, EmptyInput) as exc:
            logger.warning("task %d skipped in ROC-AUC: %s", task, exc)
            skipped.append(task)
    if not values:
        raise SingleClass("no task has both classes")
    return float(np.mean(values)), skipped


def rmse(preds: Sequence[float], labels: Sequence[float]) -> float:
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise MetricError(f"{p.size} predictions for {y.size} labels")
    keep = ~np.isnan(y)
    if not keep.any():
        raise EmptyInput("rmse of an empty vector")
    return float(np.sqrt(np.mean((p[keep] - y[keep]) ** 2)))


def cluster_metrics(embeddings: np.ndarray, keys: Sequence[str]) -> Tuple[float, float]:
    """Davies-Bouldin index and mean silhouette, Euclidean distance."""
    X = np.asarray(embeddings, dtype=np.float64)
    keys = np.asarray(keys)
    if X.ndim != 2 or X.shape[0] != keys.size:
        raise MetricError(f"{keys.size} keys for embeddings of shape {X.shape}")
    groups, counts = np.unique(keys, return_counts=True)
    if groups.size < 2:
        raise DegenerateClustering(f"need at least 2 groups, got {groups.size}")
    if counts.min() < 2:
        small = groups[counts < 2].tolist()
        raise DegenerateClustering(f"groups with fewer than 2 members: {small}")
    dbi = davies_bouldin_score(X, keys)
    silhouette = silhouette_score(X, keys, metric="euclidean")
    return float(dbi), float(silhouette)


def write_report(report: MetricsReport, path: Union[str, Path]) -> Path:
    """Write ``report`` as ``key=value`` lines."""
    lines = [
        f"task={report.task.value}",
        f"metric={report.metric}",
        f"init={report.init}",
        f"mean={report.mean:.6f}",
        f"std={report.std:.6f}",
        f"n_seeds={len(report.per_seed)}",
    ]
    for result in report.per_seed:
        prefix = f"seed.{result.seed}"
        lines.append(f"{prefix}.test={result.metric:.6f}")
        lines.append(f"{prefix}.valid={result.valid_metric:.6f}")
        lines.append(f"{prefix}.best_epoch={result.best_epoch}")
        if result.skipped_tasks:
            skipped = ",".join(str(t) for t in result.skipped_tasks)
            lines.append(f"{prefix}.skipped_tasks={skipped}")
    for key in sorted(report.extra):
        lines.append(f"extra.{key}={report.extra[key]:.6f}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("wrote metrics report %s", path)
    return path
