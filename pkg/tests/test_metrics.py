import numpy as np
import pytest

from ircr import metrics


def pixel_sets(labels):
    return {
        int(k): {(int(r), int(c)) for r, c in zip(*np.nonzero(labels == k))}
        for k in np.unique(labels)
        if k > 0
    }


def aji_oracle(gt, pred):
    """Literal set-based AJI: each GT claims its max-IoU prediction (lowest
    label on ties); never-claimed predictions pad the denominator."""
    g = pixel_sets(gt)
    s = pixel_sets(pred)
    if not g:
        return 1.0 if not s else 0.0
    num = 0
    den = 0
    used = set()
    for i in sorted(g):
        if not s:
            den += len(g[i])
            continue
        best_j, best_iou = None, -1.0
        for j in sorted(s):
            iou = len(g[i] & s[j]) / len(g[i] | s[j])
            if iou > best_iou:
                best_j, best_iou = j, iou
        num += len(g[i] & s[best_j])
        den += len(g[i] | s[best_j])
        used.add(best_j)
    for j in sorted(s):
        if j not in used:
            den += len(s[j])
    return num / den if den > 0 else 1.0


def dice_oracle(gt, pred):
    g = {(r, c) for r, c in zip(*np.nonzero(gt > 0))}
    s = {(r, c) for r, c in zip(*np.nonzero(pred > 0))}
    if not g and not s:
        return 1.0
    return 2 * len(g & s) / (len(g) + len(s))


def f1_oracle(gt, pred, thresh=0.5):
    g = pixel_sets(gt)
    s = pixel_sets(pred)
    if not g and not s:
        return 1.0, 0, 0, 0
    cands = []
    for i in sorted(g):
        for j in sorted(s):
            iou = len(g[i] & s[j]) / len(g[i] | s[j])
            if iou >= thresh:
                cands.append((-iou, i, j))
    tp = 0
    used_g, used_s = set(), set()
    for _, i, j in sorted(cands):
        if i not in used_g and j not in used_s:
            used_g.add(i)
            used_s.add(j)
            tp += 1
    fp = len(s) - tp
    fn = len(g) - tp
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 1.0
    return f1, tp, fp, fn


def random_instance_map(rng, size=12, max_instances=4):
    labels = np.zeros((size, size), np.int32)
    for k in range(1, int(rng.integers(0, max_instances + 1)) + 1):
        r, c = rng.integers(0, size - 3, size=2)
        h, w = rng.integers(1, 4, size=2)
        labels[r : r + h, c : c + w] = k
    # relabel contiguously since later rectangles may erase earlier ones
    out = np.zeros_like(labels)
    for new, old in enumerate(np.unique(labels[labels > 0]), start=1):
        out[labels == old] = new
    return out


class TestAji:
    def test_identical_maps(self):
        rng = np.random.default_rng(0)
        labels = random_instance_map(rng)
        assert metrics.aji(labels, labels) == 1.0

    def test_two_pixel_overlap_case(self):
        gt = np.zeros((4, 4), np.int32)
        pred = np.zeros((4, 4), np.int32)
        gt[0, 0:4] = 1  # 4 px
        pred[0, 2:4] = 1
        pred[1, 2:4] = 1  # 4 px, overlapping 2
        assert metrics.aji(gt, pred) == pytest.approx(2 / 6)

    def test_empty_pred(self):
        gt = np.zeros((4, 4), np.int32)
        gt[1:3, 1:3] = 1
        assert metrics.aji(gt, np.zeros((4, 4), np.int32)) == 0.0

    def test_empty_conventions(self):
        empty = np.zeros((3, 3), np.int32)
        one = empty.copy()
        one[1, 1] = 1
        assert metrics.aji(empty, empty) == 1.0
        assert metrics.aji(empty, one) == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            metrics.aji(np.zeros((3, 3), np.int32), np.zeros((4, 4), np.int32))

    def test_matches_oracle_on_random_maps(self):
        rng = np.random.default_rng(1)
        for _ in range(120):
            gt = random_instance_map(rng)
            pred = random_instance_map(rng)
            assert metrics.aji(gt, pred) == pytest.approx(aji_oracle(gt, pred), abs=1e-12)

    def test_label_permutation_invariance(self):
        rng = np.random.default_rng(2)
        gt = random_instance_map(rng)
        pred = random_instance_map(rng)
        k = pred.max()
        if k >= 2:
            permuted = np.zeros_like(pred)
            perm = rng.permutation(k) + 1
            for old in range(1, k + 1):
                permuted[pred == old] = perm[old - 1]
            assert metrics.aji(gt, pred) == pytest.approx(metrics.aji(gt, permuted), abs=1e-12)

    def test_aji_one_iff_identical_partition(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            gt = random_instance_map(rng)
            pred = random_instance_map(rng)
            same = np.array_equal(gt > 0, pred > 0) and all(
                len(np.unique(pred[gt == k])) == 1 for k in np.unique(gt[gt > 0])
            ) and all(
                len(np.unique(gt[pred == k])) == 1 for k in np.unique(pred[pred > 0])
            )
            assert (metrics.aji(gt, pred) == 1.0) == same


class TestDice:
    def test_identical(self):
        rng = np.random.default_rng(4)
        labels = random_instance_map(rng)
        assert metrics.dice_metric(labels, labels) == 1.0

    def test_disjoint(self):
        a = np.zeros((6, 6), np.int32)
        b = np.zeros((6, 6), np.int32)
        a[0, 0:5] = 1
        b[5, 0:5] = 1
        assert metrics.dice_metric(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), np.int32)
        b = np.zeros((4, 4), np.int32)
        a[0, 0:4] = 1
        b[0, 2:4] = 1
        b[1, 2:4] = 1
        assert metrics.dice_metric(a, b) == 0.5

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(60):
            gt = random_instance_map(rng)
            pred = random_instance_map(rng)
            assert metrics.dice_metric(gt, pred) == pytest.approx(
                dice_oracle(gt, pred), abs=1e-12
            )


class TestF1Obj:
    def test_identical(self):
        rng = np.random.default_rng(6)
        labels = random_instance_map(rng)
        while labels.max() == 0:
            labels = random_instance_map(rng)
        f1, tp, fp, fn = metrics.f1_obj(labels, labels)
        assert (f1, tp, fp, fn) == (1.0, labels.max(), 0, 0)

    def test_one_gt_two_preds(self):
        gt = np.zeros((8, 8), np.int32)
        gt[0:2, 0:5] = 1  # 10 px
        pred = np.zeros((8, 8), np.int32)
        pred[0:2, 0:4] = 1  # IoU 8/10 = 0.8
        pred[6, 6] = 2  # disjoint
        f1, tp, fp, fn = metrics.f1_obj(gt, pred)
        assert (tp, fp, fn) == (1, 1, 0)
        assert f1 == pytest.approx(2 / 3)

    def test_below_threshold(self):
        gt = np.zeros((5, 5), np.int32)
        gt[0, 0:5] = 1
        pred = np.zeros((5, 5), np.int32)
        pred[0, 0:2] = 1  # IoU 0.4
        f1, tp, fp, fn = metrics.f1_obj(gt, pred, 0.5)
        assert (f1, tp, fp, fn) == (0.0, 0, 1, 1)

    def test_empty_maps(self):
        empty = np.zeros((3, 3), np.int32)
        assert metrics.f1_obj(empty, empty) == (1.0, 0, 0, 0)

    def test_matches_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(120):
            gt = random_instance_map(rng)
            pred = random_instance_map(rng)
            ours = metrics.f1_obj(gt, pred)
            oracle = f1_oracle(gt, pred)
            assert ours[1:] == oracle[1:]
            assert ours[0] == pytest.approx(oracle[0], abs=1e-12)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            gt = random_instance_map(rng)
            pred = random_instance_map(rng)
            tps = [metrics.f1_obj(gt, pred, t)[1] for t in (0.3, 0.5, 0.7, 0.9)]
            assert tps == sorted(tps, reverse=True)

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            metrics.f1_obj(np.zeros((3, 3), np.int32), np.zeros((3, 3), np.int32), 1.5)


def test_report_bundles_everything():
    rng = np.random.default_rng(9)
    gt = random_instance_map(rng)
    pred = random_instance_map(rng)
    rep = metrics.report(gt, pred)
    assert rep.aji == metrics.aji(gt, pred)
    assert rep.dice == metrics.dice_metric(gt, pred)
    assert rep.f1_obj == metrics.f1_obj(gt, pred)[0]
