"""Five-point face normalisation and dense landmark fitting with the hourglass model."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import DegenerateError, LandmarkSet, SimilarityTransform, box_to_square_transform, \
    estimate_similarity, warp_image
from .heatmap import decode_peaks, peak_confidence
from .landmarks.schema import NATIVE_SCHEMA, VIEWS, five_point_template


class NormalizationError(ValueError):
    pass


def normalize_face(image, box, five, size=64, template=None):
    """Warp the face so its five points land on the template.

    Returns ``(crop, crop_to_image)``.  When the five points are missing or
    degenerate this raises :class:`NormalizationError`; callers then use
    :func:`box_crop`.
    """
    tpl = five_point_template(size) if template is None else np.asarray(template, dtype=np.float64) * size
    if five is None:
        raise NormalizationError("no five-point landmarks")
    pts = five.points if isinstance(five, LandmarkSet) else np.asarray(five, dtype=np.float64)
    mask = five.mask if isinstance(five, LandmarkSet) else None
    try:
        to_crop = estimate_similarity(pts, tpl, src_mask=mask)
    except DegenerateError as exc:
        raise NormalizationError(str(exc)) from exc
    return warp_image(image, to_crop, size), to_crop.inverse()


def box_crop(image, box, size=64):
    """Axis-aligned fallback: the square around ``box`` resized to ``size``."""
    to_crop = box_to_square_transform(box, size)
    return warp_image(image, to_crop, size), to_crop.inverse()


def select_view(conf, schema, margin=0.15):
    """Pick frontal, left or right profile from per-slot peak confidences.

    A profile view scores the mean confidence over its slots minus the mean
    over the slots it leaves empty; the frontal view scores ``margin``.
    Ties go to the frontal view.
    """
    scores = {"frontal": float(margin)}
    for v in ("left_profile", "right_profile"):
        m = schema.view_mask(v)
        scores[v] = float(conf[m].mean() - conf[~m].mean())
    best = max(VIEWS, key=lambda v: scores[v])
    return best, scores


@dataclass
class FitResult:
    landmarks: LandmarkSet
    confidence: np.ndarray
    view: str
    crop_to_image: SimilarityTransform
    maps: np.ndarray
    view_scores: dict


def fit_maps(maps, schema, crop_to_image, view=None, refine="parabola", margin=0.15):
    """Decode one union stack (Nu,h,w) into native landmarks in image coordinates."""
    conf = peak_confidence(maps)
    scores = {}
    if view is None:
        view, scores = select_view(conf, schema, margin)
    idx = schema.view_map(view)
    peaks = decode_peaks(maps[idx], None, crop_to_image, refine=refine)
    lms = LandmarkSet(peaks.points, peaks.mask, NATIVE_SCHEMA[view])
    return FitResult(lms, conf[idx], view, crop_to_image, maps, scores)


def predict_maps(model, crops):
    """Eval-mode forward of a batch of crops (B,3,S,S)."""
    was = model.training
    model.eval()
    with T.no_grad():
        out = model.predict(T.Tensor(np.asarray(crops, dtype=np.float64))).data
    model.train(was)
    return out


def fit(image, box, five, model, schema, size=None, view=None, refine="parabola", template=None, margin=0.15):
    """normalize -> hourglass -> decode -> back to image coordinates."""
    size = size or model.cfg.input_size
    try:
        crop, back = normalize_face(image, box, five, size, template)
    except NormalizationError:
        crop, back = box_crop(image, box, size)
    maps = predict_maps(model, crop[None])[0]
    return fit_maps(maps, schema, back, view, refine, margin)
