import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ncct.selection import (
    BatchPartition,
    ThresholdVector,
    compute_thresholds,
    partition_batch,
    select_confident,
)


def rows_with_label_prob(label_probs, labels, c=7):
    """Probability rows whose labelled entry equals the given value."""
    out = np.zeros((len(labels), c))
    for i, (p, y) in enumerate(zip(label_probs, labels)):
        out[i] = (1 - p) / (c - 1)
        out[i, y] = p
    return out


def random_batch(rng, n=64, c=7):
    z = rng.normal(size=(n, c)) * rng.uniform(0.1, 4)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return p, rng.integers(0, c, n)


def brute_thresholds(p, labels):
    out = {}
    for c in sorted(set(labels.tolist())):
        vals = [p[i, c] for i in range(len(labels)) if labels[i] == c]
        out[c] = sum(vals) / len(vals)
    return out


class TestThresholds:
    def test_constant_group(self):
        labels = np.array([2, 2, 2, 2])
        t = compute_thresholds(rows_with_label_prob([0.5] * 4, labels), labels)
        assert t[2] == 0.5

    def test_mean(self):
        labels = np.array([0, 0, 0])
        t = compute_thresholds(rows_with_label_prob([0.9, 0.5, 0.1], labels), labels)
        assert t[0] == pytest.approx(0.5, abs=1e-15)

    def test_presence(self):
        labels = np.array([0, 3, 3, 0, 0])
        t = compute_thresholds(rows_with_label_prob([0.2, 0.3, 0.4, 0.5, 0.6], labels), labels)
        assert t.classes() == [0, 3]
        assert 1 not in t

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p, y = random_batch(rng)
            t = compute_thresholds(p, y)
            ref = brute_thresholds(p, y)
            assert t.classes() == sorted(ref)
            for c, v in ref.items():
                assert abs(t[c] - v) < 1e-12


class TestPartition:
    def test_example(self):
        labels = np.array([0, 0, 0])
        p = rows_with_label_prob([0.9, 0.5, 0.1], labels)
        part = partition_batch(p, labels, ThresholdVector({0: 0.5}))
        assert part.confident.tolist() == [0, 1]
        assert part.non_confident.tolist() == [2]

    def test_singleton_confident(self):
        labels = np.array([4])
        _, part = select_confident(rows_with_label_prob([0.03], labels), labels)
        assert part.confident.tolist() == [0]

    def test_uniform_rows_all_confident(self):
        labels = np.array([0, 1, 1, 2, 2, 2, 6])
        p = np.full((7, 7), 1 / 7)
        _, part = select_confident(p, labels)
        assert len(part.confident) == 7
        assert len(part.non_confident) == 0

    def test_repeated_value_group_all_confident(self):
        # 3 * 0.1 sums to 0.30000000000000004; the threshold must not exceed 0.1
        labels = np.array([1, 1, 1])
        p = rows_with_label_prob([0.1, 0.1, 0.1], labels)
        _, part = select_confident(p, labels)
        assert len(part.confident) == 3

    def test_missing_threshold(self):
        labels = np.array([0, 1])
        with pytest.raises(RuntimeError):
            partition_batch(np.full((2, 3), 1 / 3), labels, ThresholdVector({0: 0.2}))

    def test_everything_confident(self):
        part = BatchPartition.everything_confident(5)
        assert part.confident.tolist() == [0, 1, 2, 3, 4]
        assert part.size == 5


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 80), c=st.integers(2, 9))
def test_selection_invariants(seed, n, c):
    rng = np.random.default_rng(seed)
    p, y = random_batch(rng, n, c)
    # repeated probabilities exercise the inclusive comparison
    if seed % 3 == 0:
        p = np.round(p, 2)
    t, part = select_confident(p, y)
    conf, nonconf = set(part.confident.tolist()), set(part.non_confident.tolist())
    assert not conf & nonconf
    assert conf | nonconf == set(range(n))
    for cls in set(y.tolist()):
        members = np.flatnonzero(y == cls)
        vals = p[members, cls]
        assert vals.min() <= t[cls] <= vals.max()
        assert conf & set(members.tolist())


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    p, y = random_batch(rng, 40)
    perm = rng.permutation(40)
    _, a = select_confident(p, y)
    _, b = select_confident(p[perm], y[perm])
    assert sorted(perm[b.confident].tolist()) == a.confident.tolist()
