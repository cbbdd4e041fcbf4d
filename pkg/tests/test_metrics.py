import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from se2gcnn.metrics import (
    confusion_counts,
    connected_components,
    f1_score,
    rand_index,
    rand_score_sweep,
    roc_auc,
)


def pairwise_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def pairwise_rand(a, b):
    pairs = list(itertools.combinations(range(len(a)), 2))
    agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i, j in pairs)
    return agree / len(pairs)


def flood_fill_count(mask):
    mask = np.asarray(mask, bool)
    seen = np.zeros_like(mask)
    count = 0
    for r, c in zip(*np.nonzero(mask)):
        if seen[r, c]:
            continue
        count += 1
        queue = deque([(r, c)])
        seen[r, c] = True
        while queue:
            y, x = queue.popleft()
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < mask.shape[0] and 0 <= xx < mask.shape[1] and mask[yy, xx] and not seen[yy, xx]:
                    seen[yy, xx] = True
                    queue.append((yy, xx))
    return count


class TestF1:
    def test_examples(self):
        assert f1_score(5, 0, 0) == 1.0
        assert f1_score(2, 1, 1) == pytest.approx(2 / 3, abs=0)
        assert f1_score(0, 3, 4) == 0.0
        assert f1_score(0, 0, 0) == 0.0

    @given(st.integers(1, 1000), st.integers(0, 1000), st.integers(0, 1000), st.integers(1, 50))
    def test_scale_invariant(self, tp, fp, fn, k):
        assert f1_score(k * tp, k * fp, k * fn) == pytest.approx(f1_score(tp, fp, fn), rel=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            f1_score(-1, 0, 0)

    def test_confusion(self):
        assert confusion_counts([0.9, 0.2, 0.7, 0.4], [1, 1, 0, 0]) == (1, 1, 1, 1)


class TestAUC:
    def test_examples(self):
        assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
        assert roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
        assert roc_auc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0]) == 0.75

    def test_single_class(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [1, 1])

    def test_against_pairwise_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(200):
            n = int(rng.integers(2, 60))
            labels = rng.integers(0, 2, n)
            labels[0], labels[1] = 0, 1
            # coarse scores so ties occur
            scores = rng.integers(0, 8, n) / 8 if trial % 2 else rng.standard_normal(n)
            assert roc_auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)

    @settings(max_examples=50)
    @given(st.lists(st.integers(-40, 40), min_size=4, max_size=30))
    def test_monotone_invariance(self, scores):
        # a coarse grid keeps exp strictly monotone in floating point
        labels = [i % 2 for i in range(len(scores))]
        s = np.array(scores) / 8.0
        assert roc_auc(np.exp(s), labels) == pytest.approx(roc_auc(s, labels), abs=1e-12)
        assert roc_auc(3 * s + 1, labels) == pytest.approx(roc_auc(s, labels), abs=1e-12)


class TestRand:
    def test_examples(self):
        assert rand_index([1, 1, 2, 2], [1, 1, 2, 2]) == 1.0
        assert rand_index([1, 1], [1, 2]) == 0.0
        assert rand_index([1, 1, 2, 2], [1, 1, 1, 2]) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rand_index([1, 2], [1])

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=25))
    def test_against_pairs_and_symmetric(self, pairs):
        a = [p[0] for p in pairs]
        b = [p[1] for p in pairs]
        value = rand_index(a, b)
        assert value == pytest.approx(pairwise_rand(a, b), abs=1e-12)
        assert value == pytest.approx(rand_index(b, a), abs=1e-12)
        renamed = [{0: 7, 1: 3, 2: 9, 3: -1}[x] for x in a]
        assert value == pytest.approx(rand_index(renamed, b), abs=1e-12)


class TestConnectedComponents:
    def test_zero(self):
        assert np.all(connected_components(np.zeros((4, 5))) == 0)

    def test_diagonal_blobs(self):
        img = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]])
        lab = connected_components(img)
        assert lab.max() == 2
        assert lab[0, 0] == 1 and lab[3, 3] == 2

    def test_row_major_order(self):
        img = np.array([[0, 0, 1], [1, 0, 1], [1, 0, 0]])
        lab = connected_components(img)
        assert lab[0, 2] == 1 and lab[1, 0] == 2

    def test_against_flood_fill(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            mask = rng.random((16, 16)) < rng.uniform(0.2, 0.7)
            lab = connected_components(mask)
            assert lab.max() == flood_fill_count(mask)
            assert np.all((lab > 0) == mask)
            for k in range(1, lab.max() + 1):
                assert flood_fill_count(lab == k) == 1


class TestRandSweep:
    def test_perfect_boundary(self):
        truth = np.zeros((10, 10), bool)
        truth[5, :] = True
        best, threshold = rand_score_sweep(truth.astype(float), truth)
        assert best == 1.0 and 0.1 <= threshold <= 0.9

    def test_picks_best_threshold(self):
        truth = np.zeros((8, 8), bool)
        truth[:, 4] = True
        prob = np.where(truth, 0.65, 0.2)
        best, threshold = rand_score_sweep(prob, truth)
        assert best == 1.0 and threshold <= 0.6 + 1e-9
