"""Normalised landmark error, cumulative error curves and detection recall."""
from dataclasses import dataclass

import numpy as np

from .geometry import iou_matrix

NORMALIZERS = ("eye_centre", "outer_eye_corner", "bbox_diagonal")


class MetricError(ValueError):
    pass


def normalizer_distance(gt, kind, box=None):
    """Face-size distance ``d`` for one ground-truth landmark set.

    ``bbox_diagonal`` uses ``box`` when given, else the bounding box of the
    visible ground-truth points.  Eye normalizers need the 68-point layout
    (0-based eyes 36-41 and 42-47, outer corners 36 and 45).
    """
    if kind == "bbox_diagonal":
        if box is not None:
            return float(np.hypot(box.width, box.height))
        pts = gt.visible()
        if len(pts) == 0:
            raise MetricError("no visible ground-truth points")
        span = pts.max(axis=0) - pts.min(axis=0)
        return float(np.hypot(*span))
    if kind not in NORMALIZERS:
        raise MetricError(f"unknown normalizer {kind!r}")
    if gt.schema not in ("P68", "U68", "U86"):
        raise MetricError(f"{kind} needs a 68-point layout, got {gt.schema}")
    p = gt.points
    if kind == "eye_centre":
        if not (gt.mask[36:48].all()):
            raise MetricError("eye landmarks are masked")
        return float(np.linalg.norm(p[36:42].mean(axis=0) - p[42:48].mean(axis=0)))
    if not (gt.mask[36] and gt.mask[45]):
        raise MetricError("outer eye corners are masked")
    return float(np.linalg.norm(p[36] - p[45]))


def nme(pred, gt, kind="bbox_diagonal", box=None):
    """Mean Euclidean error over points visible in both sets, divided by ``d``."""
    if pred.schema != gt.schema:
        raise MetricError(f"schema mismatch: {pred.schema} vs {gt.schema}")
    d = normalizer_distance(gt, kind, box)
    if d <= 0:
        raise MetricError("normalizer distance is zero")
    m = gt.mask & pred.mask
    if not m.any():
        raise MetricError("no landmarks left after masking")
    err = np.linalg.norm(pred.points[m] - gt.points[m], axis=1)
    return float(err.mean() / d)


@dataclass
class ErrorRecord:
    value: float
    normalizer: str


@dataclass
class CEDCurve:
    errors: np.ndarray
    thresholds: np.ndarray
    fractions: np.ndarray

    def at(self, e):
        """Fraction of errors <= e."""
        return float(np.searchsorted(self.errors, e, side="right") / len(self.errors))


def ced_auc_fr(errors, max_threshold=0.1, grid=101):
    """CED curve, normalised area up to ``max_threshold`` and failure rate.

    The CED is a step function, so its area has a closed form: each error
    ``e`` contributes ``max(0, max_threshold - e)``.  Written as one minus the
    clipped error mass so that all-zero errors give exactly 1.
    """
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if e.size == 0:
        raise MetricError("empty error list")
    if not max_threshold > 0:
        raise MetricError("max_threshold must be positive")
    auc = float(1.0 - np.minimum(e, max_threshold).sum() / (e.size * max_threshold))
    fr = float(np.count_nonzero(e > max_threshold) / e.size)
    th = np.linspace(0.0, max_threshold, grid)
    frac = np.searchsorted(e, th, side="right") / e.size
    return CEDCurve(e, th, frac), auc, fr


def detection_pr(detections, ground_truths, iou_match=0.5, fp_points=(5, 50, 150)):
    """Recall at fixed false-positive counts over a score sweep.

    ``detections[i]`` lists scored boxes for image ``i``; ``ground_truths[i]``
    its true boxes.  Within an image, detections are matched greedily in
    score order to the unmatched ground truth of highest IoU (> ``iou_match``).
    Lowering the threshold only appends detections to each image's greedy
    order, so one pass gives the matching at every threshold.
    """
    if not 0 < iou_match < 1:
        raise MetricError("iou_match must lie in (0, 1)")
    scores, tps = [], []
    n_gt = sum(len(g) for g in ground_truths)
    for dets, gts in zip(detections, ground_truths):
        if not dets:
            continue
        order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
        ds = [dets[k] for k in order]
        used = np.zeros(len(gts), dtype=bool)
        ov = iou_matrix(np.array([d.as_array() for d in ds]), np.array([g.as_array() for g in gts]).reshape(-1, 4)) \
            if gts else np.zeros((len(ds), 0))
        for k, d in enumerate(ds):
            cand = np.where(~used & (ov[k] > iou_match), ov[k], -1.0)
            hit = cand.size > 0 and cand.max() > 0
            if hit:
                used[int(cand.argmax())] = True
            scores.append(d.score)
            tps.append(hit)
    scores = np.asarray(scores)
    tps = np.asarray(tps, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, tps = scores[order], tps[order]
    # only thresholds at the end of a run of equal scores are reachable
    last = np.ones(len(scores), dtype=bool)
    last[:-1] = scores[1:] != scores[:-1]
    tp = np.cumsum(tps)[last]
    fp = np.cumsum(~tps)[last]
    th = scores[last]
    recall = tp / max(n_gt, 1)
    precision = tp / np.maximum(tp + fp, 1)
    at_fp = {}
    for k in fp_points:
        ok = fp <= k
        at_fp[k] = float(recall[ok].max()) if ok.any() else 0.0
    return {"thresholds": th, "recall": recall, "precision": precision, "false_positives": fp,
            "true_positives": tp, "recall_at_fp": at_fp, "num_gt": n_gt}
