import math

import numpy as np
import pytest

from promptseg.metrics import aggregate, boundary, dice_score, format_csv, format_table, hd95, iou_score


def brute_dice_iou(a, b):
    pa = {(int(y), int(x)) for y, x in zip(*np.nonzero(a))}
    pb = {(int(y), int(x)) for y, x in zip(*np.nonzero(b))}
    if not pa and not pb:
        return 1.0, 1.0
    return 2 * len(pa & pb) / (len(pa) + len(pb)), len(pa & pb) / len(pa | pb)


def brute_boundary(m):
    h, w = m.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            nbrs = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
            if any(not (0 <= yy < h and 0 <= xx < w) or not m[yy, xx] for yy, xx in nbrs):
                pts.append((y, x))
    return pts


def brute_hd95(a, b):
    ba, bb = brute_boundary(a), brute_boundary(b)

    def directed(src, dst):
        d = sorted(min(math.hypot(y - yy, x - xx) for yy, xx in dst) for y, x in src)
        return d[math.ceil(0.95 * len(d)) - 1]

    return max(directed(ba, bb), directed(bb, ba))


def test_dice_iou_basic():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    b = np.zeros((4, 4), bool)
    b[0, :2] = True
    assert dice_score(a, a) == 1.0
    assert dice_score(a, ~a) == 0.0
    assert abs(dice_score(a, b) - 4 / 6) < 1e-12
    assert iou_score(a, b) == 0.5
    empty = np.zeros((4, 4), bool)
    assert dice_score(empty, empty) == 1.0 and iou_score(empty, empty) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice_score(np.zeros((2, 2)), np.zeros((3, 3)))


def test_hd95_two_pixels():
    a = np.zeros((16, 16), bool)
    b = np.zeros((16, 16), bool)
    a[3, 4] = True
    b[8, 4] = True
    assert hd95(a, b) == 5.0
    assert hd95(a, a) == 0.0


def test_hd95_empty_is_nan():
    a = np.zeros((8, 8), bool)
    b = a.copy()
    b[2, 2] = True
    assert math.isnan(hd95(a, b))


def test_boundary_matches_brute():
    rng = np.random.default_rng(0)
    m = rng.random((16, 16)) > 0.4
    assert set(zip(*np.nonzero(boundary(m)))) == set(brute_boundary(m))


def test_metric_oracles_random_pairs():
    rng = np.random.default_rng(1)
    for i in range(100):
        a = rng.random((16, 16)) > rng.uniform(0.3, 0.9)
        b = rng.random((16, 16)) > rng.uniform(0.3, 0.9)
        d, j = brute_dice_iou(a, b)
        assert dice_score(a, b) == d and iou_score(a, b) == j
        assert abs(dice_score(a, b) - 2 * j / (1 + j)) < 1e-12
        assert j <= dice_score(a, b) <= 1
        assert dice_score(a, b) == dice_score(b, a)
        if a.any() and b.any():
            assert abs(hd95(a, b) - brute_hd95(a, b)) < 1e-9
            assert hd95(a, b) == hd95(b, a)


def test_aggregate_mean_of_task_means():
    reports, mdice, miou = aggregate({0: [(0.8, 0.7, 1.0), (0.8, 0.7, 3.0)], 1: [(0.6, 0.5, float("nan"))]})
    assert abs(reports[0].dice - 80) < 1e-9 and abs(reports[1].dice - 60) < 1e-9
    assert abs(mdice - 70) < 1e-9
    assert reports[0].hd95 == 2.0
    assert reports[1].hd95_excluded == 1 and math.isnan(reports[1].hd95)


def test_single_task_mdice_equals_task():
    reports, mdice, _ = aggregate({3: [(0.5, 1 / 3, 2.0)]})
    assert mdice == reports[0].dice


def test_report_formats():
    reports, mdice, miou = aggregate({0: [(1.0, 1.0, 0.0)], 1: [(0.5, 1 / 3, 2.0)]})
    text = format_csv(reports, mdice, miou)
    lines = text.strip().split("\n")
    assert lines[0] == "task,dice,iou,hd95,n_samples,hd95_excluded"
    assert lines[-1].startswith("mean,75.0000")
    assert "mDice" in format_table(reports, mdice, miou)
