"""Detection, ranking and clustering metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def f1_score(tp: int, fp: int, fn: int) -> float:
    """Harmonic mean of precision and recall; 0 when undefined."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def confusion_counts(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) for predictions ``scores >= threshold``."""
    pred = np.asarray(scores) >= threshold
    y = np.asarray(labels).astype(bool)
    return (int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & y)), int(np.sum(~pred & ~y)))


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic.

    Ties between a positive and a negative count one half.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(s)  # average ranks resolve ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _pairs(k):
    k = np.asarray(k, dtype=np.int64)
    return int(np.sum(k * (k - 1) // 2))


def rand_index(a, b) -> float:
    """Fraction of unordered element pairs on which two partitions agree."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError("partitions differ in length")
    n = a.size
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = ai.astype(np.int64) * (bi.max() + 1) + bi
    same_both = _pairs(np.bincount(joint))
    same_a = _pairs(np.bincount(ai))
    same_b = _pairs(np.bincount(bi))
    total = n * (n - 1) // 2
    agree = total + 2 * same_both - same_a - same_b
    return agree / total


def connected_components(binary, connectivity: int = 4) -> np.ndarray:
    """Label foreground components of a 2D binary image with union-find.

    Labels are 1..K in row-major order of each component's first pixel;
    background is 0.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    img = np.asarray(binary).astype(bool)
    if img.ndim != 2:
        raise ValueError("expected a 2D image")
    h, w = img.shape
    parent = np.arange(h * w)

    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            if ri < rj:
                parent[rj] = ri
            else:
                parent[ri] = rj

    offsets = [(-1, 0), (0, -1)] if connectivity == 4 else [(-1, -1), (-1, 0), (-1, 1), (0, -1)]
    for r in range(h):
        for c in range(w):
            if not img[r, c]:
                continue
            for dr, dc in offsets:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and img[rr, cc]:
                    union(r * w + c, rr * w + cc)
    labels = np.zeros(h * w, dtype=np.int64)
    next_label = 0
    root_label: dict[int, int] = {}
    for i in np.flatnonzero(img.ravel()):
        root = find(int(i))
        if root not in root_label:
            next_label += 1
            root_label[root] = next_label
        labels[i] = root_label[root]
    return labels.reshape(h, w)


def rand_score_sweep(prob_boundary, true_boundary, thresholds=None) -> tuple[float, float]:
    """Best Rand index over thresholds between cell partitions.

    Cells are the 4-connected components of the non-boundary region; all
    boundary pixels share label 0. Returns ``(best score, best threshold)``.
    """
    if thresholds is None:
        thresholds = np.round(np.arange(1, 10) * 0.1, 10)
    truth = connected_components(~np.asarray(true_boundary).astype(bool))
    best = (-1.0, float(thresholds[0]))
    for t in thresholds:
        cells = connected_components(np.asarray(prob_boundary) < t)
        score = rand_index(cells, truth)
        if score > best[0]:
            best = (score, float(t))
    return best
