import itertools
import math

import numpy as np
import pytest

from ircr import matching, raster


def brute_force_cost(w):
    """Exhaustive minimum assignment cost over all size-min(n, m) injections."""
    n, m = w.shape
    if n == 0 or m == 0:
        return 0.0
    best = math.inf
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = min(best, sum(w[i, c] for i, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = min(best, sum(w[r, j] for j, r in enumerate(rows)))
    return best


def pairs_cost(w, pairs):
    return sum(w[r, c] for r, c in pairs)


def single_pixel_map(shape, pixels):
    labels = np.zeros(shape, np.int32)
    for k, (r, c) in enumerate(pixels, start=1):
        labels[r, c] = k
    return labels


def disk_map(shape, centers, radius):
    labels = np.zeros(shape, np.int32)
    rr, cc = np.mgrid[0 : shape[0], 0 : shape[1]]
    for k, (r, c) in enumerate(centers, start=1):
        labels[(rr - r) ** 2 + (cc - c) ** 2 <= radius * radius] = k
    return labels


def random_label_map(rng, shape=(20, 20), k=4):
    labels = np.zeros(shape, np.int32)
    placed = 0
    tries = 0
    while placed < k and tries < 100:
        tries += 1
        r, c = rng.integers(2, shape[0] - 2), rng.integers(2, shape[1] - 2)
        size = int(rng.integers(1, 3))
        block = labels[r - size : r + size + 1, c - size : c + size + 1]
        if (block == 0).all():
            block[:] = placed + 1
            placed += 1
    return raster.relabel_by_first_pixel(labels)


class TestDistanceMatrix:
    def test_three_four_five(self):
        t = single_pixel_map((6, 6), [(0, 0)])
        s = single_pixel_map((6, 6), [(3, 4)])
        w = matching.distance_matrix(t, s)
        assert w.shape == (1, 1)
        assert w[0, 0] == 5.0

    def test_identical_maps_zero_diagonal(self):
        rng = np.random.default_rng(0)
        labels = random_label_map(rng)
        w = matching.distance_matrix(labels, labels)
        assert np.all(np.diag(w) == 0.0)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            t = random_label_map(rng)
            s = random_label_map(rng)
            w = matching.distance_matrix(t, s)
            for i in range(1, t.max() + 1):
                for j in range(1, s.max() + 1):
                    ct = raster.centroid(t, i)
                    cs = raster.centroid(s, j)
                    d = math.hypot(ct[0] - cs[0], ct[1] - cs[1])
                    assert abs(w[i - 1, j - 1] - d) < 1e-12

    def test_empty_sides(self):
        empty = np.zeros((5, 5), np.int32)
        other = single_pixel_map((5, 5), [(1, 1)])
        assert matching.distance_matrix(empty, other).shape == (0, 1)
        assert matching.distance_matrix(other, empty).shape == (1, 0)


class TestMunkres:
    def test_textbook_case_beats_greedy(self):
        w = np.array([[4.0, 1.0], [2.0, 0.0]])
        assert matching.munkres(w) == [(0, 1), (1, 0)]

    def test_dominant_diagonal(self):
        w = np.full((4, 4), 10.0)
        np.fill_diagonal(w, 0.0)
        assert matching.munkres(w) == [(i, i) for i in range(4)]

    def test_random_matrices_match_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            n, m = rng.integers(1, 7, size=2)
            w = rng.random((n, m)) * 10
            pairs = matching.munkres(w)
            assert len(pairs) == min(n, m)
            assert pairs_cost(w, pairs) == pytest.approx(brute_force_cost(w), abs=1e-9)

    def test_integer_ties_resolve_lexicographically(self):
        assert matching.munkres(np.zeros((3, 3))) == [(0, 0), (1, 1), (2, 2)]
        assert matching.munkres(np.ones((2, 3))) == [(0, 0), (1, 1)]
        # row 0 must take col 1 (cost 1) so that total stays 1; among the
        # optimal completions, row ordering prefers (0, 1) over (0, 2)
        w = np.array([[5.0, 1.0, 1.0], [5.0, 0.0, 0.0]])
        assert matching.munkres(w) == [(0, 1), (1, 2)]

    def test_rectangular_strips_padding(self):
        w = np.array([[1.0, 9.0, 9.0]])
        assert matching.munkres(w) == [(0, 0)]
        w = np.array([[9.0], [1.0], [9.0]])
        assert matching.munkres(w) == [(1, 0)]

    def test_empty(self):
        assert matching.munkres(np.zeros((0, 3))) == []

    def test_rejects_bad_entries(self):
        with pytest.raises(ValueError):
            matching.munkres(np.array([[1.0, -2.0]]))
        with pytest.raises(ValueError):
            matching.munkres(np.array([[np.inf]]))


class TestMatchInstances:
    def test_identical_maps_all_matched(self):
        rng = np.random.default_rng(5)
        labels = random_label_map(rng)
        for r_factor in (0.1, 1.5, 10.0):
            res = matching.match_instances(labels, labels, r_factor)
            assert len(res.pairs) == labels.max()
            assert all(d == 0.0 for _, _, d in res.pairs)
            assert res.unmatched_teacher == [] and res.unmatched_student == []

    def test_distance_beyond_radius_threshold_unmatched(self):
        # centroids 10 px apart, equivalent radius ~4 px, r = 1.5 -> rejected
        t = disk_map((24, 24), [(6, 6)], 4)
        s = disk_map((24, 24), [(16, 6)], 4)
        rho = matching.equivalent_radius(float((t > 0).sum()))
        assert 10.0 > 1.5 * rho
        res = matching.match_instances(t, s, 1.5)
        assert res.pairs == []
        assert res.unmatched_teacher == [1] and res.unmatched_student == [1]

    def test_huge_radius_keeps_all_munkres_pairs(self):
        rng = np.random.default_rng(7)
        t = random_label_map(rng, k=4)
        s = random_label_map(rng, k=3)
        res = matching.match_instances(t, s, 1e9)
        assert len(res.pairs) == 3

    def test_symmetry_under_swap(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            t = random_label_map(rng)
            s = random_label_map(rng, k=3)
            ab = matching.match_instances(t, s, 1.5)
            ba = matching.match_instances(s, t, 1.5)
            assert sorted((a, b) for a, b, _ in ab.pairs) == sorted(
                (b, a) for a, b, _ in ba.pairs
            )

    def test_monotone_in_r_factor(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            t = random_label_map(rng)
            s = random_label_map(rng)
            counts = [
                len(matching.match_instances(t, s, r).pairs)
                for r in (0.1, 1.0, 1.5, 2.0, 3.0)
            ]
            assert counts == sorted(counts)

    def test_translation_invariance(self):
        rng = np.random.default_rng(13)
        base_t = random_label_map(rng, shape=(14, 14))
        base_s = random_label_map(rng, shape=(14, 14))
        t = np.zeros((20, 20), np.int32)
        s = np.zeros((20, 20), np.int32)
        t[:14, :14] = base_t
        s[:14, :14] = base_s
        t2 = np.roll(np.roll(t, 4, axis=0), 3, axis=1)
        s2 = np.roll(np.roll(s, 4, axis=0), 3, axis=1)
        a = matching.match_instances(t, s, 1.5)
        b = matching.match_instances(t2, s2, 1.5)
        assert [(x, y) for x, y, _ in a.pairs] == [(x, y) for x, y, _ in b.pairs]
        assert a.unmatched_teacher == b.unmatched_teacher
        assert a.unmatched_student == b.unmatched_student

    def test_r_factor_must_be_positive(self):
        with pytest.raises(ValueError):
            matching.match_instances(np.zeros((4, 4), np.int32), np.zeros((4, 4), np.int32), 0.0)
