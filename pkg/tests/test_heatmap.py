import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvalign import tensor as T
from mvalign.geometry import SimilarityTransform
from mvalign.gradcheck import gradcheck
from mvalign.heatmap import EmptyMaskWarning, decode_peaks, masked_mse_loss, peak_confidence, render_heatmaps


def test_render_peak_and_tail():
    maps, mask = render_heatmaps([[4 * 8, 4 * 8]], None, 16, 16, sigma=1.0)
    assert mask.all() and maps[0, 8, 8] == 1.0
    assert maps[0, 8, 11] == pytest.approx(math.exp(-4.5), abs=1e-15)


def test_render_peak_is_one_at_nearest_grid_point():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 60, (20, 2))
    maps, _ = render_heatmaps(pts, None, 16, 16)
    for k, (x, y) in enumerate(pts / 4):
        assert maps[k, int(round(y)), int(round(x))] == 1.0
        assert maps[k].max() == 1.0


def test_render_masked_and_out_of_bounds_channels_are_zero():
    maps, mask = render_heatmaps([[10, 10], [20, 20], [-30, 5]], [True, False, True], 16, 16)
    assert mask.tolist() == [True, False, False]
    assert not maps[1].any() and not maps[2].any()


@pytest.mark.parametrize("refine,limit", [("quarter", 0.25 * 4), ("parabola", 1e-9)])
def test_render_decode_round_trip(refine, limit):
    rng = np.random.default_rng(1)
    pts = rng.uniform(4, 56, (68, 2))  # keep peaks off the border row and column
    maps, mask = render_heatmaps(pts, None, 16, 16)
    dec = decode_peaks(maps, mask, refine=refine)
    err = np.abs(dec.points - pts).max()
    assert err <= limit + 1e-12


def test_parabola_refines_border_peaks():
    rng = np.random.default_rng(7)
    pts = np.concatenate([rng.uniform(0, 2, (20, 2)), rng.uniform(58, 60, (20, 2))])
    maps, mask = render_heatmaps(pts, None, 16, 16)
    assert mask.all()
    dec = decode_peaks(maps, mask, refine="parabola")
    assert np.abs(dec.points - pts).max() < 1e-9


def test_render_decode_round_trip_at_full_resolution():
    # a 64x64 response map grid (256 crop): the quarter step stays within half a map pixel
    rng = np.random.default_rng(2)
    pts = rng.uniform(4, 248, (68, 2))
    maps, mask = render_heatmaps(pts, None, 64, 64)
    dec = decode_peaks(maps, mask)
    assert np.abs(dec.points / 4 - pts / 4).max() <= 0.5


def test_decode_lone_peak():
    m = np.zeros((1, 16, 32))
    m[0, 10, 20] = 1.0
    dec = decode_peaks(m, crop_to_image=SimilarityTransform())
    assert dec.points[0].tolist() == [80.0, 40.0]


def test_decode_symmetric_gaussian_centre():
    maps, _ = render_heatmaps([[36.0, 28.0]], None, 16, 16, sigma=1.5)
    for refine in ("quarter", "parabola"):
        np.testing.assert_allclose(decode_peaks(maps, refine=refine).points[0], [36.0, 28.0], atol=0.5)


def test_decode_flat_channel_flagged():
    maps = np.zeros((2, 8, 8))
    maps[1, 3, 3] = 0.7
    dec = decode_peaks(maps)
    assert dec.low_confidence.tolist() == [True, False]
    assert dec.mask.tolist() == [False, True]


def test_decode_matches_exhaustive_scan():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        maps = np.round(rng.uniform(0, 1, (5, 9, 11)), 2)  # rounding creates ties
        dec = decode_peaks(maps, refine="quarter")
        for k in range(5):
            best, bi, bj = -1.0, 0, 0
            for i in range(9):
                for j in range(11):
                    if maps[k, i, j] > best:
                        best, bi, bj = maps[k, i, j], i, j
            dx = 0.25 * np.sign(maps[k, bi, bj + 1] - maps[k, bi, bj - 1]) if 0 < bj < 10 else 0.0
            dy = 0.25 * np.sign(maps[k, bi + 1, bj] - maps[k, bi - 1, bj]) if 0 < bi < 8 else 0.0
            assert dec.points[k].tolist() == [4 * (bj + dx), 4 * (bi + dy)]


def test_decode_maps_through_transform():
    maps, _ = render_heatmaps([[20.0, 32.0]], None, 16, 16)
    tf = SimilarityTransform(2.0, 0.5, np.array([3.0, 4.0]))
    np.testing.assert_allclose(decode_peaks(maps, crop_to_image=tf, refine="parabola").points[0],
                               tf.apply(np.array([[20.0, 32.0]]))[0], atol=1e-9)


def test_confidence_examples():
    maps, _ = render_heatmaps(np.random.default_rng(3).uniform(0, 60, (10, 2)), None, 16, 16)
    assert peak_confidence(maps).tolist() == [1.0] * 10
    assert peak_confidence(np.zeros((4, 8, 8))).tolist() == [0.0] * 4


@settings(max_examples=30)
@given(st.permutations(list(range(6))), st.integers(0, 1000))
def test_confidence_permutation_equivariant(perm, seed):
    maps = np.random.default_rng(seed).normal(0.5, 0.5, (6, 5, 5))
    assert np.array_equal(peak_confidence(maps[perm]), peak_confidence(maps)[perm])


def loss_oracle(pred, gt, mask):
    total = 0.0
    b, n, h, w = pred.shape
    for s in range(b):
        sel = [k for k in range(n) if mask[s, k]]
        acc = 0.0
        for k in sel:
            for i in range(h):
                for j in range(w):
                    acc += (pred[s, k, i, j] - gt[s, k, i, j]) ** 2
        total += acc / len(sel) if sel else 0.0
    return total / b


def test_masked_loss_matches_loop_oracle_and_gradcheck():
    rng = np.random.default_rng(4)
    pred = rng.uniform(0, 1, (3, 6, 5, 5))
    gt = rng.uniform(0, 1, (3, 6, 5, 5))
    mask = rng.random((3, 6)) < 0.5
    mask[:, 0] = True
    p = T.Tensor(pred, requires_grad=True)
    loss = masked_mse_loss(p, gt, mask)
    assert abs(loss.item() - loss_oracle(pred, gt, mask)) < 1e-12
    loss.backward()
    assert np.all(p.grad[~mask] == 0.0)
    assert gradcheck(lambda: masked_mse_loss(p, gt, mask), [p]).passed()


def test_masked_loss_edge_cases():
    gt = np.random.default_rng(5).uniform(0, 1, (2, 3, 4, 4))
    assert masked_mse_loss(T.Tensor(gt), gt, np.ones((2, 3), bool)).item() == 0.0
    p = T.Tensor(gt + 1.0, requires_grad=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        loss = masked_mse_loss(p, gt, np.zeros((2, 3), bool))
    assert any(issubclass(w.category, EmptyMaskWarning) for w in caught)
    assert loss.item() == 0.0
    loss.backward()
    assert not p.grad.any()
