import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvalign.geometry import Box, DegenerateError, LandmarkSet, SimilarityTransform, decode_box_target, \
    decode_box_targets, decode_landmark_targets, encode_box_target, encode_box_targets, encode_landmark_targets, \
    estimate_similarity, iou, nms, nms_indices, read_landmarks, similarity_residual, transform_landmarks, \
    warp_image, write_landmarks
from mvalign.landmarks.schema import five_point_template
from mvalign.metrics import nme


def random_boxes(rng, n):
    xy = rng.uniform(0, 80, (n, 2))
    wh = rng.uniform(5, 40, (n, 2))
    return np.column_stack([xy, xy + wh])


def greedy_oracle(boxes, scores, thr):
    """Quadratic greedy suppression written from the definition."""
    remaining = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        b = Box(*boxes[best])
        remaining = [j for j in remaining if iou(b, Box(*boxes[j])) <= thr]
    return keep


def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 6, 6)) == 0.0
    assert iou(a, Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)


def test_nms_examples():
    one = [Box(0, 0, 1, 1, 0.3)]
    assert nms(one, 0.5) == one
    a, b = Box(0, 0, 4, 4, 0.8), Box(0, 0, 4, 4, 0.9)
    assert nms([a, b], 0.5) == [b]
    assert nms([], 0.5) == []


def test_nms_matches_greedy_oracle_on_seeded_cases():
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        boxes = random_boxes(rng, n)
        scores = np.round(rng.uniform(0, 1, n), 1)  # coarse scores force ties
        thr = float(rng.uniform(0.1, 0.9))
        assert nms_indices(boxes, scores, thr).tolist() == greedy_oracle(boxes, scores, thr), seed


def test_nms_output_sorted_by_score():
    rng = np.random.default_rng(3)
    boxes = [Box(*b, score=s) for b, s in zip(random_boxes(rng, 50), rng.uniform(0, 1, 50))]
    kept = nms(boxes, 0.4)
    assert [b.score for b in kept] == sorted((b.score for b in kept), reverse=True)


def test_box_target_examples():
    g = Box(10, 20, 50, 40)
    np.testing.assert_array_equal(encode_box_target(g, g), np.zeros(4))
    shifted = Box(30, 20, 70, 40)
    np.testing.assert_allclose(encode_box_target(g, shifted), [0.5, 0, 0, 0], atol=1e-15)


def test_box_target_round_trip():
    rng = np.random.default_rng(4)
    anchors, gts = random_boxes(rng, 100), random_boxes(rng, 100)
    back = decode_box_targets(anchors, encode_box_targets(anchors, gts))
    assert np.abs(back - gts).max() < 1e-9
    for a, g in zip(anchors[:10], gts[:10]):
        d = decode_box_target(Box(*a), encode_box_target(Box(*a), Box(*g)))
        assert np.abs(d.as_array() - g).max() < 1e-9
    pts = rng.uniform(0, 100, (100, 5, 2))
    t = encode_landmark_targets(anchors, gts, pts)
    assert np.abs(decode_landmark_targets(anchors, gts, t) - pts).max() < 1e-9


def test_similarity_examples():
    tpl = five_point_template(64)
    tf = estimate_similarity(tpl, tpl)
    assert abs(tf.scale - 1) < 1e-12 and abs(tf.rotation) < 1e-12 and np.abs(tf.translation).max() < 1e-12
    half = estimate_similarity(2 * tpl, tpl)
    assert half.scale == pytest.approx(0.5, abs=1e-12) and abs(half.rotation) < 1e-12


def grid_refined_residual(src, dst):
    """Least squares by brute force: grid over rotation, then golden-section refinement.

    For a fixed rotation the optimal scale and translation are linear least
    squares, so the search is one-dimensional.
    """
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d

    def cost(theta):
        c, s = math.cos(theta), math.sin(theta)
        r = xs @ np.array([[c, s], [-s, c]])
        scale = max((r * xd).sum() / (r * r).sum(), 0.0)
        return ((scale * r - xd) ** 2).sum()

    grid = np.linspace(-math.pi, math.pi, 721)
    best = grid[np.argmin([cost(t) for t in grid])]
    lo, hi = best - 2 * math.pi / 720, best + 2 * math.pi / 720
    g = (math.sqrt(5) - 1) / 2
    for _ in range(200):
        a, b = hi - g * (hi - lo), lo + g * (hi - lo)
        if cost(a) < cost(b):
            hi = b
        else:
            lo = a
    return cost(0.5 * (lo + hi))


def test_similarity_recovers_random_transform_and_matches_grid_oracle():
    tpl = five_point_template(64)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        true = SimilarityTransform(rng.uniform(0.3, 3), rng.uniform(-math.pi, math.pi), rng.uniform(-50, 50, 2))
        src = true.inverse().apply(tpl)
        est = estimate_similarity(src, tpl)
        assert abs(est.scale - true.scale) < 1e-9
        assert abs(math.remainder(est.rotation - true.rotation, 2 * math.pi)) < 1e-9
        assert np.abs(est.translation - true.translation).max() < 1e-9
        noisy = src + rng.normal(0, 1.0, src.shape)
        gap = similarity_residual(noisy, tpl, estimate_similarity(noisy, tpl)) - grid_refined_residual(noisy, tpl)
        assert abs(gap) < 1e-6


def test_similarity_masks_and_degenerate_input():
    tpl = five_point_template(10)
    src = tpl.copy()
    src[4] = [1e3, -1e3]
    tf = estimate_similarity(LandmarkSet(src, [1, 1, 1, 1, 0], "P5"), tpl)
    assert abs(tf.scale - 1) < 1e-12
    with pytest.raises(DegenerateError):
        estimate_similarity(np.ones((5, 2)), tpl)
    with pytest.raises(DegenerateError):
        estimate_similarity(tpl, tpl, src_mask=[1, 0, 0, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.2, 5), st.floats(-3.1, 3.1), st.floats(-100, 100), st.floats(-100, 100))
def test_transform_inverse_composition(scale, rot, tx, ty):
    tf = SimilarityTransform(scale, rot, np.array([tx, ty]))
    pts = np.random.default_rng(0).uniform(-50, 50, (10, 2))
    np.testing.assert_allclose(tf.inverse().apply(tf.apply(pts)), pts, atol=1e-9)
    np.testing.assert_allclose(tf.compose(tf.inverse()).apply(pts), pts, atol=1e-9)
    lms = LandmarkSet(np.zeros((5, 2)) + pts[:5], [1, 1, 0, 1, 1], "P5")
    moved = transform_landmarks(lms, tf)
    assert moved.mask.tolist() == lms.mask.tolist() and moved.schema == "P5"
    np.testing.assert_array_equal(moved.points[2], lms.points[2])
    np.testing.assert_allclose(transform_landmarks(moved, tf.inverse()).points, lms.points, atol=1e-9)


def test_nme_invariant_under_shared_similarity():
    rng = np.random.default_rng(5)
    gt = LandmarkSet(rng.uniform(20, 80, (68, 2)))
    pred = LandmarkSet(gt.points + rng.normal(0, 2, (68, 2)))
    tf = SimilarityTransform(1.7, 0.6, np.array([5.0, -9.0]))
    for kind in ("eye_centre", "outer_eye_corner", "bbox_diagonal"):
        a = nme(pred, gt, kind)
        b = nme(transform_landmarks(pred, tf), transform_landmarks(gt, tf), kind)
        if kind == "bbox_diagonal":
            # the landmark bounding box is not rotation covariant; a pure scale+shift is
            tf2 = SimilarityTransform(1.7, 0.0, np.array([5.0, -9.0]))
            b = nme(transform_landmarks(pred, tf2), transform_landmarks(gt, tf2), kind)
        assert a == pytest.approx(b, rel=1e-12)


def ramp(h=12, w=12):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([xs, ys, xs + 2 * ys])


def test_warp_identity_and_shift():
    img = ramp()
    np.testing.assert_allclose(warp_image(img, SimilarityTransform(), 12), img, atol=1e-12)
    shifted = warp_image(img, SimilarityTransform(1.0, 0.0, np.array([1.0, 0.0])), 12)
    np.testing.assert_allclose(shifted[:, :, 1:], img[:, :, :-1], atol=1e-12)
    assert np.all(shifted[:, :, 0] == 0)


def test_warp_round_trip_on_smooth_image():
    ys, xs = np.mgrid[0:64, 0:64] / 64.0
    img = np.stack([np.sin(3 * xs) * np.cos(2 * ys), xs * ys, np.cos(4 * xs + ys)])
    centre = np.array([32.0, 32.0])
    lin = SimilarityTransform(1.1, 0.3, np.zeros(2))
    tf = SimilarityTransform(1.1, 0.3, centre - lin.apply(centre[None])[0])  # about the image centre
    back = warp_image(warp_image(img, tf, 64), tf.inverse(), 64)
    inner = (slice(None), slice(16, 48), slice(16, 48))
    assert np.abs(back[inner] - img[inner]).mean() < 2e-2 * (img.max() - img.min())


def test_landmark_file_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    lms = LandmarkSet(rng.uniform(0, 100, (39, 2)), rng.random(39) < 0.8, "P39")
    for name in ("a.pts", "a.json"):
        write_landmarks(tmp_path / name, lms)
        back = read_landmarks(str(tmp_path / name))
        assert back.schema == "P39"
        np.testing.assert_array_equal(back.points, lms.points)
        np.testing.assert_array_equal(back.mask, lms.mask)


def test_landmark_set_validation():
    with pytest.raises(ValueError):
        LandmarkSet(np.zeros((39, 2)), schema="P68")
    with pytest.raises(ValueError):
        LandmarkSet(np.zeros((5, 2)), schema="P7")
