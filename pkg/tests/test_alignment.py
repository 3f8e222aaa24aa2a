import math

import numpy as np
import pytest

from mvalign.alignment import NormalizationError, fit, fit_maps, normalize_face, select_view
from mvalign.geometry import Box, SimilarityTransform, estimate_similarity, warp_image
from mvalign.heatmap import render_heatmaps
from mvalign.landmarks import build_union_schema, synthesize_dataset, to_union
from mvalign.landmarks.schema import five_point_template
from mvalign.pipeline import TH1, TH2

from helpers import OracleModel, rotate_about


def test_threshold_presets():
    assert TH1 == (0.6, 0.7, 0.7, 0.7)
    assert TH2 == (0.5, 0.5, 0.3, 0.7)


def test_normalize_is_identity_for_a_face_on_the_template():
    img = np.random.default_rng(0).uniform(0, 1, (3, 64, 64))
    crop, back = normalize_face(img, None, five_point_template(64), 64)
    assert abs(back.scale - 1) < 1e-12 and abs(back.rotation) < 1e-12 and np.abs(back.translation).max() < 1e-12
    np.testing.assert_allclose(crop, img, atol=1e-9)


def test_normalize_removes_in_plane_rotation():
    s = synthesize_dataset(1, 3, image_size=128)[0]
    rot = rotate_about(math.radians(25), (63.5, 63.5))
    img2 = warp_image(s.image, rot, 128)
    crop1, back1 = normalize_face(s.image, s.box, s.five, 64)
    crop2, back2 = normalize_face(img2, None, rot.apply(s.five), 64)
    local1 = back1.inverse().apply(s.landmarks.points)
    local2 = back2.inverse().apply(rot.apply(s.landmarks.points))
    assert np.sqrt(((local1 - local2) ** 2).sum(axis=1).mean()) < 1.0
    inner = (slice(None), slice(8, 56), slice(8, 56))
    assert np.sqrt(((crop1[inner] - crop2[inner]) ** 2).mean()) < 0.05


def test_normalize_round_trip_composition():
    s = synthesize_dataset(1, 4, image_size=128)[0]
    _, back = normalize_face(s.image, s.box, s.five, 64)
    to_crop = estimate_similarity(s.five, five_point_template(64))
    ident = back.compose(to_crop)
    pts = s.landmarks.points
    assert np.abs(ident.apply(pts) - pts).max() < 1e-9


def test_normalize_rejects_degenerate_points():
    with pytest.raises(NormalizationError):
        normalize_face(np.zeros((3, 32, 32)), None, np.ones((5, 2)), 32)
    with pytest.raises(NormalizationError):
        normalize_face(np.zeros((3, 32, 32)), None, None, 32)


@pytest.mark.parametrize("view_index", [0, 1, 3])
def test_fit_with_oracle_maps(view_index):
    schema = build_union_schema("U68")
    s = synthesize_dataset(4, 5, image_size=128)[view_index]
    model = OracleModel(s, schema, 64)
    r = fit(s.image, s.box, s.five, model, schema, 64)
    assert r.view == s.view
    assert len(r.landmarks.points) == (68 if s.view == "frontal" else 39)
    err_crop = np.abs(r.crop_to_image.inverse().apply(r.landmarks.points)
                      - r.crop_to_image.inverse().apply(s.landmarks.points)).max()
    assert err_crop <= 0.5


def test_view_selection_from_confidences():
    schema = build_union_schema("U68")
    for view in ("frontal", "left_profile", "right_profile"):
        conf = np.zeros(68)
        conf[schema.view_map(view)] = 0.9
        assert select_view(conf, schema)[0] == view
    assert select_view(np.zeros(68), schema)[0] == "frontal"


def test_fit_maps_forced_view():
    schema = build_union_schema("U68")
    pts = np.random.default_rng(6).uniform(8, 56, (39, 2))
    from mvalign.geometry import LandmarkSet

    union, _ = to_union(LandmarkSet(pts, None, "P39"), "right_profile", schema)
    maps, _ = render_heatmaps(union.points, union.mask, 16, 16)
    r = fit_maps(maps, schema, SimilarityTransform(), view="right_profile")
    np.testing.assert_allclose(r.landmarks.points, pts, atol=1e-9)
    assert r.landmarks.schema == "P39"
