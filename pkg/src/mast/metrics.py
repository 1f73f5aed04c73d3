"""Ranking, accuracy and clustering metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InputError


@dataclass
class EvalBatch:
    scores: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.scores.ndim != 2:
            raise InputError("scores must be samples x classes")
        if self.targets.shape[0] != self.scores.shape[0]:
            raise InputError("scores and targets have different sample counts")
        if self.targets.ndim == 2:
            if self.targets.shape != self.scores.shape:
                raise InputError("multi-label targets must match the score matrix")
            if not np.isin(self.targets, (0, 1)).all():
                raise InputError("multi-label targets must be 0/1")


def average_precision(scores, targets) -> float:
    """Mean over positives of precision at that positive's rank.

    Scores are ranked descending; ties keep the original index order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 1:
        raise InputError("scores and targets must be equal-length vectors")
    n_pos = int(targets.sum())
    if n_pos == 0:
        raise InputError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = targets[order].astype(np.float64)
    ranks = np.arange(1, hits.size + 1)
    precision = np.cumsum(hits) / ranks
    return float((precision * hits).sum() / n_pos)


def mean_average_precision(scores, targets) -> float:
    """AP averaged over the classes (columns) that have at least one positive."""
    batch = EvalBatch(scores, targets)
    if batch.targets.ndim != 2:
        raise InputError("mAP needs a binary target matrix")
    aps = [
        average_precision(batch.scores[:, c], batch.targets[:, c])
        for c in range(batch.scores.shape[1])
        if batch.targets[:, c].any()
    ]
    if not aps:
        raise InputError("no class has a positive target")
    return float(np.mean(aps))


def topk_accuracy(scores, labels, k: int = 1) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise InputError("expected samples x classes scores and one label per sample")
    n_classes = scores.shape[1]
    if not 1 <= k <= n_classes:
        raise InputError(f"k={k} must lie in [1, {n_classes}]")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError("label index out of range")
    # rank of the true class: number of classes scoring strictly higher, ties broken by index
    true = scores[np.arange(len(labels)), labels][:, None]
    idx = np.arange(n_classes)[None, :]
    better = (scores > true) | ((scores == true) & (idx < labels[:, None]))
    return float((better.sum(axis=1) < k).mean())


# ---------------------------------------------------------------------------
# clustering


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            i = rng.integers(n)
        else:
            i = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            i = min(i, n - 1)
        centers.append(x[i])
        closest = np.minimum(closest, _sq_dists(x, x[i][None])[:, 0])
    return np.array(centers)


def kmeans_inertia(x, labels) -> float:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        pts = x[labels == c]
        total += float(((pts - pts.mean(0)) ** 2).sum())
    return total


def kmeans(x, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> np.ndarray:
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia restart wins."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise InputError(f"k-means needs 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(max(1, restarts)):
        centers = _kmeans_pp(x, k, rng)
        labels = None
        for _ in range(max_iter):
            new = _sq_dists(x, centers).argmin(axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for c in range(k):
                members = x[labels == c]
                if len(members):
                    centers[c] = members.mean(axis=0)
        inertia = kmeans_inertia(x, labels)
        if inertia < best_inertia - 1e-12:
            best, best_inertia = labels.copy(), inertia
    return best


def silhouette(x, labels) -> float:
    """Mean silhouette with Euclidean distances; members of singleton clusters score 0."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.shape[0] != labels.shape[0]:
        raise InputError("embeddings and labels differ in length")
    ids = np.unique(labels)
    if len(ids) < 2:
        raise InputError("silhouette needs at least two clusters")
    # direct differences: the expanded form loses ~1e-8 near zero after sqrt
    dist = cdist(x, x)
    onehot = labels[:, None] == ids[None, :]
    sizes = onehot.sum(0)
    sums = dist @ onehot
    own = onehot.argmax(1)
    n = len(labels)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    other = np.where(onehot, np.inf, sums / sizes[None, :])
    b = other.min(1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(np.maximum(a, b) > 0, (b - a) / np.maximum(a, b), 0.0)
    s[own_size == 1] = 0.0
    return float(s.mean())


def _contingency(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError("label vectors must have equal length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if ai.size else 0, bi.max() + 1 if bi.size else 0), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _comb2(n):
    n = np.asarray(n, dtype=np.float64)
    return n * (n - 1) / 2.0


def adjusted_rand_index(labels_a, labels_b) -> float:
    table = _contingency(labels_a, labels_b)
    n = table.sum()
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(1)).sum()
    sum_b = _comb2(table.sum(0)).sum()
    total = _comb2(n)
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # only reachable when both partitions are all-singletons or both a single cluster
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def homogeneity(true_labels, pred_labels) -> float:
    """``1 - H(C|K) / H(C)``; 1 when the true labeling has zero entropy."""
    table = _contingency(true_labels, pred_labels)
    n = table.sum()
    h_c = _entropy(table.sum(1))
    if h_c == 0:
        return 1.0
    nz = table > 0
    cluster_sizes = table.sum(0)
    h_c_given_k = -(table[nz] / n * np.log(table[nz] / np.broadcast_to(cluster_sizes, table.shape)[nz])).sum()
    return float(1.0 - h_c_given_k / h_c)


def cluster_report(embeddings, labels, seed: int = 0, restarts: int = 10) -> dict:
    """Silhouette of the true labels, plus ARI and homogeneity of a k-means partition."""
    labels = np.asarray(labels)
    k = len(np.unique(labels))
    pred = kmeans(embeddings, k, seed=seed, restarts=restarts)
    return {
        "silhouette": silhouette(embeddings, labels),
        "adjusted_rand_index": adjusted_rand_index(labels, pred),
        "homogeneity": homogeneity(labels, pred),
        "k": int(k),
        "n": int(len(labels)),
    }
