import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ood3d.errors import DegenerateInput
from ood3d.metrics import Positives, aupr, auroc, evaluate, fpr_at_tpr


def pairs(open_scores, closed_scores):
    return [(s, True) for s in open_scores] + [(s, False) for s in closed_scores]


# --- brute-force oracles, deliberately naive -------------------------------

def oracle_auroc(samples):
    pos = [s for s, y in samples if y]
    neg = [s for s, y in samples if not y]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def oracle_fpr(samples, target=0.95):
    n_pos = sum(1 for _, y in samples if y)
    n_neg = len(samples) - n_pos
    best = None
    for t in sorted({s for s, _ in samples}):
        tpr = sum(1 for s, y in samples if y and s >= t) / n_pos
        fpr = sum(1 for s, y in samples if not y and s >= t) / n_neg
        if tpr >= target and (best is None or fpr < best):
            best = fpr
    return best


def oracle_ap(samples):
    n_pos = sum(1 for _, y in samples if y)
    area, prev_recall = 0.0, 0.0
    for t in sorted({s for s, _ in samples}, reverse=True):
        tp = sum(1 for s, y in samples if y and s >= t)
        fp = sum(1 for s, y in samples if not y and s >= t)
        recall = tp / n_pos
        area += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return area


def random_samples(rng, n):
    labels = rng.random(n) < rng.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    # coarse rounding on half the sets forces ties
    scores = rng.normal(size=n) + labels * rng.uniform(0, 2)
    if rng.random() < 0.5:
        scores = np.round(scores, 1)
    return [(float(s), bool(y)) for s, y in zip(scores, labels)]


class TestExamples:
    def test_auroc(self):
        assert auroc(pairs([0.8, 0.9], [0.1, 0.2])) == 1.0
        assert auroc(pairs([0.5] * 3, [0.5] * 4)) == 0.5
        assert auroc(pairs([0.3, 0.8], [0.4])) == 0.5

    def test_fpr(self):
        assert fpr_at_tpr(pairs([0.8, 0.9], [0.1, 0.2])) == 0.0
        assert fpr_at_tpr(pairs([0.5] * 5, [0.5] * 5)) == 1.0

    def test_fpr_twenty(self):
        open_s = [0.9 - 0.05 * k for k in range(17)] + [0.1, 0.07, 0.05]
        closed_s = [s - 0.025 for s in open_s]
        s = pairs(open_s, closed_s)
        assert fpr_at_tpr(s) == pytest.approx(oracle_fpr(s), abs=1e-12)

    def test_aupr_hand_enumerated(self):
        # ranks: o(0.9) c(0.8) o(0.6) c c -> 0.5 * 1 + 0.5 * 2/3
        assert aupr(pairs([0.9, 0.6], [0.8, 0.3, 0.1])) == pytest.approx(0.5 + 1 / 3, abs=1e-15)

    def test_aupr_perfect(self):
        s = pairs([0.8, 0.9], [0.1, 0.2])
        assert aupr(s) == 1.0 and aupr(s, Positives.CLOSED) == 1.0

    def test_aupr_baseline_is_prevalence(self, rng):
        n = 10_000
        labels = rng.random(n) < 0.3
        s = list(zip(rng.random(n).tolist(), labels.tolist()))
        assert aupr(s) == pytest.approx(labels.mean(), abs=0.05)

    def test_unbounded_scores(self):
        assert auroc(pairs([1e6, -3.0], [-1e6])) == 1.0


class TestErrors:
    @pytest.mark.parametrize("fn", [auroc, fpr_at_tpr])
    def test_single_class(self, fn):
        with pytest.raises(DegenerateInput):
            fn(pairs([0.1, 0.2], []))
        with pytest.raises(DegenerateInput):
            fn([])

    def test_aupr_without_positives(self):
        with pytest.raises(DegenerateInput):
            aupr(pairs([], [0.1]))
        with pytest.raises(DegenerateInput):
            aupr(pairs([0.1], []), Positives.CLOSED)

    def test_non_finite(self):
        with pytest.raises(DegenerateInput):
            auroc(pairs([float("nan")], [0.1]))


def test_against_oracles(rng):
    for _ in range(200):
        s = random_samples(rng, int(rng.integers(2, 120)))
        assert auroc(s) == pytest.approx(oracle_auroc(s), abs=1e-12)
        assert fpr_at_tpr(s) == pytest.approx(oracle_fpr(s), abs=1e-12)
        assert aupr(s) == pytest.approx(oracle_ap(s), abs=1e-12)
        flipped = [(-x, not y) for x, y in s]
        assert aupr(s, Positives.CLOSED) == pytest.approx(oracle_ap(flipped), abs=1e-12)


class TestProperties:
    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_transform(self, seed):
        s = random_samples(np.random.default_rng(seed), 50)
        moved = [(np.exp(x) * 3 + 1, y) for x, y in s]
        assert auroc(moved) == pytest.approx(auroc(s), abs=1e-12)

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1))
    def test_label_flip(self, seed):
        rng = np.random.default_rng(seed)
        s = random_samples(rng, 40)
        s = [(x + 1e-9 * i, y) for i, (x, y) in enumerate(s)]  # break ties
        assert auroc([(x, not y) for x, y in s]) == pytest.approx(1 - auroc(s), abs=1e-12)

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 3))
    def test_shifting_open_up_never_hurts_fpr(self, seed, c):
        s = random_samples(np.random.default_rng(seed), 60)
        shifted = [(x + c if y else x, y) for x, y in s]
        assert fpr_at_tpr(shifted) <= fpr_at_tpr(s) + 1e-15

    def test_bounds_and_counts(self, rng):
        s = random_samples(rng, 300)
        rep = evaluate(s)
        for v in (rep.auroc, rep.fpr95, rep.aupr_e, rep.aupr_s):
            assert 0.0 <= v <= 1.0
        assert rep.n_open + rep.n_closed == 300

    def test_aupr_s_near_one_when_closed_dominates(self, rng):
        closed = rng.normal(0, 1, 2000)
        open_ = rng.normal(4, 1, 40)
        assert evaluate(pairs(open_, closed)).aupr_s > 0.99
