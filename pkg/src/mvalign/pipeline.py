"""Cascade face detection, shape-indexed failure checking and frame-to-frame tracking."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .alignment import NormalizationError, box_crop, fit, normalize_face
from .geometry import Box, LandmarkSet, SimilarityTransform, box_to_square_transform, decode_box_targets, \
    decode_landmark_targets, nms_indices, warp_image
from .networks import face_probability

TH1 = (0.6, 0.7, 0.7, 0.7)
TH2 = (0.5, 0.5, 0.3, 0.7)


@dataclass
class CascadeConfig:
    """Per-stage score thresholds ordered (proposal, CLS2, CLS3, CLS4)."""
    thresholds: tuple = TH2
    pyramid_factor: float = 0.709
    min_face: float = 20.0
    nms: tuple = (0.5, 0.7, 0.5, 0.5)
    cross_scale_nms: float = 0.7
    crop_size: int = 64
    classifier_size: int = 128
    refine: str = "parabola"
    template: tuple = None
    view_margin: float = 0.15

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        self.nms = tuple(float(t) for t in self.nms)
        if len(self.thresholds) != 4 or not all(0 < t < 1 for t in self.thresholds):
            raise ValueError("need four thresholds in (0, 1)")
        if len(self.nms) != 4 or not all(0 < t < 1 for t in self.nms):
            raise ValueError("need four NMS thresholds in (0, 1)")
        if not 0 < self.pyramid_factor < 1:
            raise ValueError("pyramid_factor must lie in (0, 1)")
        if self.min_face < 12:
            raise ValueError("min_face must be at least 12 px")


@dataclass
class Models:
    stages: list
    mhm: object = None
    classifier: object = None
    schema: object = None


@dataclass
class Face:
    box: Box
    five: np.ndarray
    landmarks: LandmarkSet = None
    confidence: np.ndarray = None
    view: str = None
    probability: float = None


@dataclass
class Detections:
    faces: list
    stage_counts: list


def _eval(net, x):
    net.eval()
    with T.no_grad():
        logits, box, lmk = net(T.Tensor(x))
    return face_probability(logits), box.data, lmk.data


def crop_windows(image, boxes, size):
    """Square crops around each (n,4) box, resampled to ``size``."""
    out = np.empty((len(boxes), image.shape[0], size, size))
    for k, b in enumerate(boxes):
        out[k] = warp_image(image, box_to_square_transform(Box(*b[:4]), size), size)
    return out


def _square(boxes):
    b = np.array(boxes, dtype=np.float64)
    cx = 0.5 * (b[:, 0] + b[:, 2])
    cy = 0.5 * (b[:, 1] + b[:, 3])
    s = np.maximum(b[:, 2] - b[:, 0], b[:, 3] - b[:, 1])
    return np.stack([cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2], axis=1)


def pyramid_scales(h, w, cfg):
    scales = []
    s = 12.0 / cfg.min_face
    while min(h, w) * s >= 12:
        scales.append(s)
        s *= cfg.pyramid_factor
    return scales


def propose(image, net, cfg):
    """Fully convolutional stage-1 scan over the image pyramid; returns (n,5) boxes+scores."""
    h, w = image.shape[1:]
    found = []
    for s in pyramid_scales(h, w, cfg):
        hs, ws = int(h * s), int(w * s)
        hs -= hs % 2
        ws -= ws % 2
        if min(hs, ws) < 12:
            continue
        level = warp_image(image, SimilarityTransform(s, 0.0, np.array([0.5 * s - 0.5, 0.5 * s - 0.5])), hs, ws)
        prob, reg, _ = _eval(net, level[None])
        prob, reg = prob[0], reg[0]
        iy, ix = np.nonzero(prob > cfg.thresholds[0])
        if len(iy) == 0:
            continue
        # output cell (iy, ix) sees level pixels [2ix, 2ix + 12); level pixel p sits at (p + 0.5)/s - 0.5
        x1 = (2 * ix + 0.5) / s - 0.5
        y1 = (2 * iy + 0.5) / s - 0.5
        anchors = np.stack([x1, y1, x1 + 12 / s, y1 + 12 / s], axis=1)
        boxes = decode_box_targets(anchors, reg[:, iy, ix].T)
        scores = prob[iy, ix]
        keep = nms_indices(boxes, scores, cfg.nms[0])
        found.append(np.column_stack([boxes[keep], scores[keep]]))
    if not found:
        return np.zeros((0, 5))
    allb = np.vstack(found)
    keep = nms_indices(allb[:, :4], allb[:, 4], cfg.cross_scale_nms)
    return allb[keep]


def refine(image, boxes, net, threshold, nms_threshold):
    """Stage-2/3 rescoring and regression; returns (boxes+scores (n,5), five points (n,5,2))."""
    if len(boxes) == 0:
        return np.zeros((0, 5)), np.zeros((0, 5, 2))
    anchors = _square(boxes[:, :4])
    prob, reg, lmk = _eval(net, crop_windows(image, anchors, net.input_size))
    ok = prob > threshold
    anchors, prob, reg, lmk = anchors[ok], prob[ok], reg[ok], lmk[ok]
    if len(anchors) == 0:
        return np.zeros((0, 5)), np.zeros((0, 5, 2))
    decoded = decode_box_targets(anchors, reg)
    five = decode_landmark_targets(anchors, decoded, lmk)
    keep = nms_indices(decoded, prob, nms_threshold)
    return np.column_stack([decoded[keep], prob[keep]]), five[keep]


def shape_indexed_patches(image, box, five, landmarks, view, schema, crop_size=128, patch=24, template=None):
    """Union-ordered 24x24 patches around landmarks in the normalised ``crop_size`` face.

    Slots without a landmark get all-zero patches.
    """
    try:
        crop, back = normalize_face(image, box, five, crop_size, template)
    except NormalizationError:
        crop, back = box_crop(image, box, crop_size)
    local = back.inverse().apply(landmarks.points)
    slots = schema.view_map(view)
    pts = np.zeros((schema.size, 2))
    valid = np.zeros(schema.size, dtype=bool)
    pts[slots] = local
    valid[slots] = landmarks.mask
    cy = np.ascontiguousarray(np.round(pts[:, 1]).astype(np.int64))
    cx = np.ascontiguousarray(np.round(pts[:, 0]).astype(np.int64))
    out = kernels.patches(np.ascontiguousarray(crop), cy, cx, patch)
    out[~valid] = 0.0
    return out


def check_failure(image, box, five, result, classifier, schema, threshold=0.7, crop_size=128, template=None):
    """Face probability of the shape-indexed patches; returns ``(probability, failed)``."""
    patches = shape_indexed_patches(image, box, five, result.landmarks, result.view, schema, crop_size,
                                    template=template)
    p = float(classifier.probability(patches[None])[0])
    return p, p < threshold


def detect(image, cfg, models):
    """Proposal -> CLS2 -> CLS3 (+five points) -> dense fit and CLS4.

    ``stage_counts`` holds the number of boxes alive after each stage.
    """
    image = np.asarray(image, dtype=np.float64)
    if min(image.shape[1:]) < cfg.min_face:
        raise ValueError("image is smaller than the minimum face")
    s1, s2, s3 = models.stages
    boxes = propose(image, s1, cfg)
    counts = [len(boxes)]
    boxes, _ = refine(image, boxes, s2, cfg.thresholds[1], cfg.nms[1])
    counts.append(len(boxes))
    boxes, fives = refine(image, boxes, s3, cfg.thresholds[2], cfg.nms[2])
    counts.append(len(boxes))
    faces = [Face(Box(*b[:4], score=float(b[4])), f) for b, f in zip(boxes, fives)]
    if models.mhm is not None:
        kept = []
        for face in faces:
            r = fit(image, face.box, face.five, models.mhm, models.schema, cfg.crop_size, refine=cfg.refine,
                    template=cfg.template, margin=cfg.view_margin)
            face.landmarks, face.confidence, face.view = r.landmarks, r.confidence, r.view
            if models.classifier is not None:
                face.probability, failed = check_failure(image, face.box, face.five, r, models.classifier,
                                                         models.schema, cfg.thresholds[3], cfg.classifier_size,
                                                         cfg.template)
                if failed:
                    continue
            kept.append(face)
        faces = kept
    counts.append(len(faces))
    return Detections(faces, counts)


# --------------------------------------------------------------------------
# tracking

@dataclass
class KalmanSmoother:
    """Independent constant-velocity filter per coordinate."""
    process_var: float = 0.05
    measurement_var: float = 1.0
    x: np.ndarray = None
    v: np.ndarray = None
    p: np.ndarray = None

    def reset(self):
        self.x = self.v = self.p = None

    def __call__(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.x is None or self.x.shape != z.shape:
            self.x = z.copy()
            self.v = np.zeros_like(z)
            big = 1e3 * self.measurement_var
            self.p = np.broadcast_to(np.array([[self.measurement_var, 0.0], [0.0, big]]), z.shape + (2, 2)).copy()
            return z.copy()
        q = self.process_var
        Q = q * np.array([[0.25, 0.5], [0.5, 1.0]])
        F = np.array([[1.0, 1.0], [0.0, 1.0]])
        x = self.x + self.v
        v = self.v
        P = F @ self.p @ F.T + Q
        s = P[..., 0, 0] + self.measurement_var
        k0 = P[..., 0, 0] / s
        k1 = P[..., 1, 0] / s
        r = z - x
        self.x = x + k0 * r
        self.v = v + k1 * r
        K = np.stack([k0, k1], axis=-1)[..., :, None]
        H = np.array([[1.0, 0.0]])
        self.p = (np.eye(2) - K @ H) @ P
        return self.x.copy()


def smooth_landmarks(state, landmarks):
    """Filter the points through ``state.smoother``; identity when smoothing is off."""
    if state.smoother is None:
        return landmarks
    pts = state.smoother(landmarks.points)
    return LandmarkSet(pts, landmarks.mask.copy(), landmarks.schema)


@dataclass
class TrackerConfig:
    margin: float = 0.2
    failure_threshold: float = 0.7
    smooth: bool = False
    process_var: float = 0.05
    measurement_var: float = 1.0


@dataclass
class TrackerState:
    status: str = "lost"
    box: Box = None
    landmarks: LandmarkSet = None
    failures: int = 0
    smoother: KalmanSmoother = None
    frame: int = 0


@dataclass
class TrackResult:
    frame: int
    status: str
    box: Box = None
    landmarks: LandmarkSet = None
    confidence: float = None
    detector_called: bool = False
    view: str = None
    checked: float = None    # failure-checker probability of the pass-path fit, when one ran

    def to_json(self):
        return {"frame": self.frame, "status": self.status, "checked": self.checked,
                "box": None if self.box is None else self.box.to_list(),
                "points": None if self.landmarks is None else self.landmarks.points.tolist(),
                "confidence": self.confidence, "view": self.view}


def _five_from_box(image, box, net, passes=2):
    """Stage-3 net on a box: regress the box, then read five points from the refined box."""
    anchor = _square(box.as_array()[None])
    for _ in range(passes):
        prob, reg, lmk = _eval(net, crop_windows(image, anchor, net.input_size))
        decoded = decode_box_targets(anchor, reg)
        five = decode_landmark_targets(anchor, decoded, lmk)[0]
        anchor = _square(decoded)
    return Box(*decoded[0]), five, float(prob[0])


def new_tracker(cfg=None):
    cfg = cfg or TrackerConfig()
    return TrackerState(smoother=KalmanSmoother(cfg.process_var, cfg.measurement_var) if cfg.smooth else None)


def track_step(frame, state, models, cascade_cfg, cfg=None):
    """Advance the tracker by one frame; returns ``(new_state, result)``."""
    cfg = cfg or TrackerConfig()
    frame = np.asarray(frame, dtype=np.float64)
    idx = state.frame
    fitted = None
    checked = None
    if state.status == "tracking":
        search = state.box.expand(cfg.margin)
        box, five, _ = _five_from_box(frame, search, models.stages[2])
        r = fit(frame, box, five, models.mhm, models.schema, cascade_cfg.crop_size, refine=cascade_cfg.refine,
                template=cascade_cfg.template, margin=cascade_cfg.view_margin)
        prob, failed = check_failure(frame, box, five, r, models.classifier, models.schema, cfg.failure_threshold,
                                     cascade_cfg.classifier_size, cascade_cfg.template)
        checked = prob
        if not failed:
            fitted = (r, prob, False)
    if fitted is None:
        found = detect(frame, cascade_cfg, models).faces
        if found:
            best = max(found, key=lambda f: (f.probability if f.probability is not None else f.box.score))
            r = _Fit(best.landmarks, best.confidence, best.view)
            fitted = (r, best.probability, True)
        else:
            if state.smoother is not None:
                state.smoother.reset()
            new = TrackerState("lost", None, None, state.failures + 1, state.smoother, idx + 1)
            return new, TrackResult(idx, "lost", detector_called=True, checked=checked)
    r, prob, called = fitted
    lms = smooth_landmarks(state, r.landmarks) if state.smoother is not None else r.landmarks
    if state.smoother is not None and state.landmarks is not None and state.landmarks.schema != lms.schema:
        state.smoother.reset()
        lms = smooth_landmarks(state, r.landmarks)
    box = Box.from_points(lms.visible())
    new = TrackerState("tracking", box, lms, 0, state.smoother, idx + 1)
    return new, TrackResult(idx, "tracking", box, lms, prob, called, r.view, checked)


@dataclass
class _Fit:
    landmarks: LandmarkSet
    confidence: np.ndarray
    view: str


def track(frames, models, cascade_cfg, cfg=None):
    state = new_tracker(cfg)
    results = []
    for f in frames:
        state, res = track_step(f, state, models, cascade_cfg, cfg)
        results.append(res)
    return results
