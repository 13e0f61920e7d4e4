import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sethash.dataset import ImageSet
from sethash.dictionary import Dictionary
from sethash.errors import DimensionMismatch, EmptySet, InvalidParameter, TapeMismatch
from sethash.setfeat import (
    aggregate,
    aggregate_backward,
    aggregate_batch,
    feature_length,
    infer_mode,
    set_statistics,
    vlad,
)


def direct_vlad(members, centroids):
    """Residual sums per nearest centroid, then one global L2 normalisation, with plain loops."""
    k, d = len(centroids), len(centroids[0])
    v = [[0.0] * d for _ in range(k)]
    for x in members:
        best, best_dist = 0, None
        for j, c in enumerate(centroids):
            dist = sum((x[t] - c[t]) ** 2 for t in range(d))
            if best_dist is None or dist < best_dist:
                best, best_dist = j, dist
        for t in range(d):
            v[best][t] += x[t] - centroids[best][t]
    flat = [val for row in v for val in row]
    norm = math.sqrt(sum(val * val for val in flat))
    return [val / norm for val in flat] if norm > 0 else flat


def random_instance(rng, n=None, k=None, d=None):
    n = n or int(rng.integers(1, 9))
    k = k or int(rng.integers(1, 5))
    d = d or int(rng.integers(1, 7))
    c = rng.standard_normal((k, d)).astype(np.float32)
    return rng.standard_normal((n, d)), Dictionary(c)


def tie_free(x, dictionary, margin=1e-3):
    c = dictionary.centroids.astype(np.float64)
    for col in x.T:
        s = np.sort(col)
        if len(s) > 1 and np.min(np.diff(s)) < margin:
            return False
    dist = np.sqrt(((x[:, None] - c[None]) ** 2).sum(-1))
    if c.shape[0] > 1:
        s = np.sort(dist, axis=1)
        if np.min(s[:, 1] - s[:, 0]) < margin:
            return False
    return True


class TestStatistics:
    def test_singleton(self):
        x = np.array([[1.5, -2.0, 3.0]])
        mean, var, mn, mx = set_statistics(x)
        for v in (mean, mn, mx):
            np.testing.assert_array_equal(v, x[0])
        np.testing.assert_array_equal(var, 0)

    def test_two_points(self):
        mean, var, mn, mx = set_statistics(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(mean, [2, 3])
        np.testing.assert_array_equal(var, [1, 1])
        np.testing.assert_array_equal(mn, [1, 2])
        np.testing.assert_array_equal(mx, [3, 4])

    def test_population_variance(self, rng):
        x = rng.standard_normal((7, 3))
        np.testing.assert_allclose(set_statistics(x)[1], x.var(axis=0, ddof=0), rtol=1e-12)

    def test_empty(self):
        with pytest.raises(EmptySet):
            set_statistics(np.zeros((0, 2)))

    @given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 5))
    def test_order_and_bounds(self, seed, n, d):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((n, d)) * 10
        mean, var, mn, mx = set_statistics(x)
        assert np.all(mn <= mean) and np.all(mean <= mx) and np.all(var >= 0)
        perm = rng.permutation(n)
        for a, b in zip((mean, var, mn, mx), set_statistics(x[perm])):
            assert np.array_equal(a, b)

    def test_duplicate_member_keeps_extremes(self, rng):
        x = rng.standard_normal((5, 3))
        _, _, mn, mx = set_statistics(x)
        _, _, mn2, mx2 = set_statistics(np.vstack([x, x[2]]))
        assert np.array_equal(mn, mn2) and np.array_equal(mx, mx2)


class TestVlad:
    def test_members_on_centroids(self):
        c = np.array([[0.0, 0.0], [5.0, 5.0]])
        v, tape = vlad(np.array([[0.0, 0.0], [5.0, 5.0], [5.0, 5.0]]), Dictionary(c))
        np.testing.assert_array_equal(v, 0)
        assert tape.vlad_norm == 0

    def test_hand_example(self):
        v, tape = vlad(np.array([[1.0], [9.0]]), Dictionary(np.array([[0.0], [10.0]])))
        np.testing.assert_array_equal(tape.vlad_raw, [1, -1])
        np.testing.assert_allclose(v, [0.70710678, -0.70710678], atol=1e-8)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_direct_formula(self, seed):
        x, d = random_instance(np.random.default_rng(seed), 5, 3, 4)
        v, _ = vlad(x, d)
        expected = direct_vlad(x.tolist(), d.centroids.astype(np.float64).tolist())
        np.testing.assert_allclose(v, expected, atol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    def test_unit_norm(self, seed):
        x, d = random_instance(np.random.default_rng(seed))
        v, tape = vlad(x, d)
        if tape.vlad_norm > 0:
            assert abs(np.linalg.norm(v) - 1) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            vlad(np.zeros((2, 3)), Dictionary(np.zeros((2, 2))))


class TestAggregate:
    def test_length(self):
        f, _ = aggregate(np.zeros((3, 2)) + [[1, 2]], Dictionary(np.array([[0.0, 0.0], [1.0, 1.0]])))
        assert f.concat.shape == (feature_length(2, 2),) == (12,)

    def test_singleton_on_centroid(self):
        x = np.array([3.0, -1.0])
        f, _ = aggregate(x[None, :], Dictionary(np.array([[0.0, 0.0], [3.0, -1.0]])))
        np.testing.assert_array_equal(f.concat, np.concatenate([x, [0, 0], x, x, [0, 0, 0, 0]]))

    def test_permutation_remaps_tape(self, rng):
        x, d = random_instance(rng, 6, 3, 4)
        perm = rng.permutation(6)
        f1, t1 = aggregate(x, d)
        f2, t2 = aggregate(x[perm], d)
        assert np.array_equal(f1.concat, f2.concat)
        np.testing.assert_array_equal(perm[t2.argmax], t1.argmax)
        np.testing.assert_array_equal(perm[t2.argmin], t1.argmin)
        np.testing.assert_array_equal(t2.assignments, t1.assignments[perm])

    def test_ties_pick_lowest_member(self):
        _, tape = aggregate(np.array([[1.0, 0.0], [1.0, 0.0]]), None, "stats")
        np.testing.assert_array_equal(tape.argmin, [0, 0])
        np.testing.assert_array_equal(tape.argmax, [0, 0])

    def test_modes(self, rng):
        x, d = random_instance(rng, 4, 3, 2)
        full = aggregate(x, d, "all")[0].concat
        np.testing.assert_array_equal(aggregate(x, d, "stats")[0].concat, full[:8])
        np.testing.assert_array_equal(aggregate(x, d, "vlad")[0].concat, full[8:])
        np.testing.assert_array_equal(aggregate(x, None, "stats")[0].concat, full[:8])

    def test_vlad_mode_needs_dictionary(self):
        with pytest.raises(InvalidParameter):
            aggregate(np.zeros((1, 2)), None, "vlad")

    def test_unknown_mode(self):
        with pytest.raises(InvalidParameter):
            aggregate(np.zeros((1, 2)), None, "fisher")

    def test_infer_mode(self):
        assert infer_mode(feature_length(5, 3, "all"), 5, 3) == "all"
        assert infer_mode(20, 5, 3) == "stats"
        assert infer_mode(15, 5, 3) == "vlad"
        with pytest.raises(InvalidParameter):
            infer_mode(20, 5, 4)
        with pytest.raises(InvalidParameter):
            infer_mode(7, 5, 3)

    def test_batch(self, rng):
        x, d = random_instance(rng, 4, 2, 3)
        sets = [ImageSet(i, 0, x + i) for i in range(3)]
        out = aggregate_batch(sets, d)
        for i, s in enumerate(sets):
            np.testing.assert_array_equal(out[i], aggregate(s, d)[0].concat)

    def test_float32_members_match_float64(self, rng):
        x, d = random_instance(rng, 5, 2, 3)
        x32 = x.astype(np.float32)
        np.testing.assert_array_equal(aggregate(x32, d)[0].concat, aggregate(x32.astype(np.float64), d)[0].concat)


class TestBackward:
    def test_mean_block(self, rng):
        x, d = random_instance(rng, 4, 2, 3)
        _, tape = aggregate(x, d)
        g = np.zeros(feature_length(3, 2))
        g[:3] = [1.0, -2.0, 0.5]
        np.testing.assert_allclose(aggregate_backward(x, d, tape, g), np.tile(g[:3] / 4, (4, 1)))

    def test_max_block_routing(self, rng):
        x, d = random_instance(rng, 5, 2, 3)
        _, tape = aggregate(x, d)
        g = np.zeros(feature_length(3, 2))
        g[9 + 1] = 2.5
        out = aggregate_backward(x, d, tape, g)
        expected = np.zeros_like(x)
        expected[np.argmax(x[:, 1]), 1] = 2.5
        np.testing.assert_array_equal(out, expected)

    def test_zero_norm_vlad_passes_nothing(self):
        c = np.array([[0.0], [4.0]])
        x = np.array([[0.0], [4.0]])
        _, tape = aggregate(x, Dictionary(c), "vlad")
        assert np.all(aggregate_backward(x, Dictionary(c), tape, np.ones(2)) == 0)

    @pytest.mark.parametrize("mode", ["all", "stats", "vlad"])
    def test_finite_differences(self, mode):
        rng = np.random.default_rng(7)
        checked = 0
        while checked < 5:
            x, d = random_instance(rng, 4, 2, 3)
            if not tie_free(x, d):
                continue
            g = rng.standard_normal(feature_length(3, 2, mode))
            _, tape = aggregate(x, d, mode)
            analytic = aggregate_backward(x, d, tape, g)
            num = np.zeros_like(x)
            h = 1e-5
            for idx in np.ndindex(*x.shape):
                up, down = x.copy(), x.copy()
                up[idx] += h
                down[idx] -= h
                num[idx] = (aggregate(up, d, mode)[0].concat @ g - aggregate(down, d, mode)[0].concat @ g) / (2 * h)
            rel = np.abs(analytic - num) / np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-6)
            assert rel.max() <= 1e-4
            checked += 1

    def test_tape_from_other_set(self, rng):
        x, d = random_instance(rng, 4, 2, 3)
        _, tape = aggregate(x, d)
        with pytest.raises(TapeMismatch):
            aggregate_backward(x + 1, d, tape, np.zeros(feature_length(3, 2)))

    def test_wrong_gradient_width(self, rng):
        x, d = random_instance(rng, 4, 2, 3)
        _, tape = aggregate(x, d)
        with pytest.raises(DimensionMismatch):
            aggregate_backward(x, d, tape, np.zeros(3))
