import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvalign.geometry import Box, LandmarkSet, iou
from mvalign.metrics import MetricError, ced_auc_fr, detection_pr, nme


def nme_loop(pred, gt):
    xs = [p[0] for p, m in zip(gt.points, gt.mask) if m]
    ys = [p[1] for p, m in zip(gt.points, gt.mask) if m]
    d = math.sqrt((max(xs) - min(xs)) ** 2 + (max(ys) - min(ys)) ** 2)
    total, count = 0.0, 0
    for a, b, ma, mb in zip(pred.points, gt.points, pred.mask, gt.mask):
        if ma and mb:
            total += math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2)
            count += 1
    return total / count / d


def test_nme_single_point_off():
    rng = np.random.default_rng(0)
    for n, schema in ((68, "P68"), (39, "P39")):
        gt = LandmarkSet(rng.uniform(0, 100, (n, 2)), None, schema)
        d = float(np.hypot(*np.ptp(gt.points, axis=0)))
        pred = gt.points.copy()
        pred[5, 0] += d
        assert nme(LandmarkSet(pred, None, schema), gt) == pytest.approx(1 / n, rel=1e-12)
        assert nme(gt, gt) == 0.0


def test_nme_matches_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        gt = LandmarkSet(rng.uniform(0, 100, (68, 2)), rng.random(68) < 0.9)
        pred = LandmarkSet(gt.points + rng.normal(0, 3, (68, 2)), rng.random(68) < 0.9)
        assert abs(nme(pred, gt) - nme_loop(pred, gt)) < 1e-12


def test_nme_eye_normalizers():
    gt = LandmarkSet(np.random.default_rng(2).uniform(0, 100, (68, 2)))
    pred = LandmarkSet(gt.points + [3.0, 4.0])
    d = np.linalg.norm(gt.points[36] - gt.points[45])
    assert nme(pred, gt, "outer_eye_corner") == pytest.approx(5.0 / d, rel=1e-12)
    with pytest.raises(MetricError):
        nme(LandmarkSet(np.zeros((39, 2)), None, "P39"), LandmarkSet(np.zeros((39, 2)), None, "P39"), "eye_centre")


def test_nme_errors():
    gt = LandmarkSet(np.zeros((68, 2)))
    with pytest.raises(MetricError):
        nme(gt, gt)  # zero-size face
    a = LandmarkSet(np.random.default_rng(3).uniform(0, 9, (68, 2)))
    with pytest.raises(MetricError):
        nme(LandmarkSet(a.points, np.zeros(68, bool)), a)
    with pytest.raises(MetricError):
        nme(LandmarkSet(np.zeros((39, 2)), None, "P39"), a)


def test_auc_examples():
    curve, auc, fr = ced_auc_fr([0.05, 0.05, 0.15])
    assert fr == pytest.approx(1 / 3, abs=1e-12) and auc == pytest.approx(1 / 3, abs=1e-12)
    _, auc, fr = ced_auc_fr(np.zeros(10))
    assert auc == 1.0 and fr == 0.0
    with pytest.raises(MetricError):
        ced_auc_fr([])


def test_auc_matches_dense_grid():
    rng = np.random.default_rng(4)
    grid = np.linspace(0, 0.1, 10_000)
    for _ in range(100):
        e = np.sort(rng.exponential(0.04, int(rng.integers(1, 60))))
        _, auc, _ = ced_auc_fr(e)
        ced = np.searchsorted(e, grid, side="right") / e.size
        assert abs(auc - np.trapezoid(ced, grid) / 0.1) < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 0.3), min_size=1, max_size=40), st.floats(0.01, 0.2))
def test_ced_monotone_and_failure_rate_complement(errors, tau):
    curve, _, _ = ced_auc_fr(errors, max_threshold=tau)
    assert np.all(np.diff(curve.fractions) >= 0)
    _, _, fr = ced_auc_fr(errors, max_threshold=tau)
    assert fr == pytest.approx(1 - curve.at(tau), abs=1e-12)


def test_detection_perfect_detector():
    gts = [[Box(0, 0, 10, 10), Box(20, 20, 30, 30)], [Box(5, 5, 25, 25)]]
    dets = [[Box(*g.as_array(), score=0.9) for g in img] for img in gts]
    res = detection_pr(dets, gts)
    assert res["recall"][-1] == 1.0 and res["false_positives"][-1] == 0
    assert res["recall_at_fp"] == {5: 1.0, 50: 1.0, 150: 1.0}


def sweep_oracle(detections, ground_truths, thr):
    """Threshold, then match each image from scratch."""
    tp = fp = 0
    for dets, gts in zip(detections, ground_truths):
        kept = sorted([d for d in dets if d.score >= thr], key=lambda d: -d.score)
        used = [False] * len(gts)
        for d in kept:
            best, arg = 0.5, -1
            for j, g in enumerate(gts):
                o = iou(d, g)
                if not used[j] and o > best:
                    best, arg = o, j
            if arg >= 0:
                used[arg] = True
                tp += 1
            else:
                fp += 1
    return tp, fp


def test_detection_pr_matches_brute_force_sweep():
    rng = np.random.default_rng(5)
    gts, dets = [], []
    for _ in range(20):
        g = [Box(x, y, x + 20, y + 20) for x, y in rng.uniform(0, 200, (3, 2))]
        d = []
        for _ in range(10):
            if rng.random() < 0.5:
                b = g[int(rng.integers(3))].as_array() + rng.normal(0, 3, 4)
            else:
                b = np.r_[rng.uniform(0, 200, 2), 0, 0]
                b[2:] = b[:2] + 20
            d.append(Box(*b, score=float(np.round(rng.random(), 2))))
        gts.append(g)
        dets.append(d)
    res = detection_pr(dets, gts)
    n_gt = 60
    for t, r, f in zip(res["thresholds"], res["recall"], res["false_positives"]):
        tp, fp = sweep_oracle(dets, gts, t)
        assert (tp / n_gt, fp) == (pytest.approx(r, abs=1e-12), f)
    for k in (5, 50, 150):
        best = max((sweep_oracle(dets, gts, t)[0] / n_gt for t in res["thresholds"]
                    if sweep_oracle(dets, gts, t)[1] <= k), default=0.0)
        assert res["recall_at_fp"][k] == pytest.approx(best, abs=1e-12)
