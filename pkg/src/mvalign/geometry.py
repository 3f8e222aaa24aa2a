"""Boxes, overlap, suppression, regression coding and similarity alignment.

Coordinates are pixels with the integer grid at pixel centres: pixel
``(row i, col j)`` sits at ``(x=j, y=i)``.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

SCHEMA_SIZES = {"P5": 5, "P39": 39, "P68": 68, "U68": 68, "U86": 86}


class DegenerateError(ValueError):
    pass


# --------------------------------------------------------------------------
# boxes

@dataclass
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"invalid box {self.as_array()}")
        if not math.isfinite(self.score):
            raise ValueError("box score must be finite")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def center(self):
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    @property
    def area(self):
        return self.width * self.height

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2])

    def expand(self, margin):
        """Grow by ``margin`` times width/height on every side."""
        dx, dy = margin * self.width, margin * self.height
        return Box(self.x1 - dx, self.y1 - dy, self.x2 + dx, self.y2 + dy, self.score)

    def square(self):
        cx, cy = self.center
        s = max(self.width, self.height)
        return Box(cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2, self.score)

    @classmethod
    def from_points(cls, pts, score=1.0):
        pts = np.asarray(pts, dtype=np.float64)
        return cls(float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max()), score)

    def to_list(self):
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a, b):
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a, b):
    """Pairwise IoU of (n,4) and (m,4) corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms_indices(boxes, scores, iou_threshold):
    """Greedy suppression; returns kept indices by descending score.

    Equal scores are resolved in favour of the lower original index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))
    keep = kernels.nms_sorted(np.ascontiguousarray(boxes[order]), float(iou_threshold))
    return order[keep]


def nms(boxes, iou_threshold):
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if not boxes:
        return []
    arr = np.array([b.as_array() for b in boxes])
    keep = nms_indices(arr, [b.score for b in boxes], iou_threshold)
    return [boxes[i] for i in keep]


# --------------------------------------------------------------------------
# regression targets: centre offsets and log sizes over the gt face size

def encode_box_target(anchor, gt):
    s = max(gt.width, gt.height)
    (ax, ay), (gx, gy) = anchor.center, gt.center
    return np.array([(gx - ax) / s, (gy - ay) / s, math.log(gt.width / anchor.width), math.log(gt.height / anchor.height)])


def decode_box_target(anchor, t, score=None):
    ax, ay = anchor.center
    w = anchor.width * math.exp(t[2])
    h = anchor.height * math.exp(t[3])
    s = max(w, h)
    cx, cy = ax + t[0] * s, ay + t[1] * s
    return Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, anchor.score if score is None else score)


def encode_box_targets(anchors, gts):
    """Vectorised :func:`encode_box_target` over (n,4) arrays."""
    a = np.asarray(anchors, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    s = np.maximum(gw, gh)
    return np.stack([((g[:, 0] + g[:, 2]) - (a[:, 0] + a[:, 2])) / (2 * s),
                     ((g[:, 1] + g[:, 3]) - (a[:, 1] + a[:, 3])) / (2 * s),
                     np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_box_targets(anchors, t):
    a = np.asarray(anchors, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    w = (a[:, 2] - a[:, 0]) * np.exp(t[:, 2])
    h = (a[:, 3] - a[:, 1]) * np.exp(t[:, 3])
    s = np.maximum(w, h)
    cx = 0.5 * (a[:, 0] + a[:, 2]) + t[:, 0] * s
    cy = 0.5 * (a[:, 1] + a[:, 3]) + t[:, 1] * s
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode_landmark_targets(anchors, gts, points):
    """Landmarks (n,k,2) relative to the anchor centre over the gt face size."""
    a = np.asarray(anchors, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64)
    s = np.maximum(g[:, 2] - g[:, 0], g[:, 3] - g[:, 1])
    c = 0.5 * (a[:, :2] + a[:, 2:])
    return ((np.asarray(points) - c[:, None, :]) / s[:, None, None]).reshape(len(a), -1)


def decode_landmark_targets(anchors, decoded_boxes, t):
    a = np.asarray(anchors, dtype=np.float64)
    d = np.asarray(decoded_boxes, dtype=np.float64)
    s = np.maximum(d[:, 2] - d[:, 0], d[:, 3] - d[:, 1])
    c = 0.5 * (a[:, :2] + a[:, 2:])
    return np.asarray(t).reshape(len(a), -1, 2) * s[:, None, None] + c[:, None, :]


# --------------------------------------------------------------------------
# landmark sets

@dataclass
class LandmarkSet:
    points: np.ndarray
    mask: np.ndarray = None
    schema: str = "P68"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.mask is None:
            self.mask = np.ones(len(self.points), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if self.schema not in SCHEMA_SIZES:
            raise ValueError(f"unknown schema {self.schema!r}")
        if len(self.points) != SCHEMA_SIZES[self.schema]:
            raise ValueError(f"schema {self.schema} needs {SCHEMA_SIZES[self.schema]} points, got {len(self.points)}")
        if len(self.mask) != len(self.points):
            raise ValueError("mask length differs from point count")

    def __len__(self):
        return len(self.points)

    def visible(self):
        return self.points[self.mask]

    def copy(self):
        return LandmarkSet(self.points.copy(), self.mask.copy(), self.schema)

    def to_json(self):
        return {"schema": self.schema, "points": self.points.tolist(), "mask": self.mask.astype(int).tolist()}

    @classmethod
    def from_json(cls, doc):
        return cls(np.array(doc["points"], dtype=np.float64), np.array(doc.get("mask", [1] * len(doc["points"])), dtype=bool),
                   doc["schema"])


_DEFAULT_SCHEMA = {5: "P5", 39: "P39", 68: "P68", 86: "U86"}


def write_landmarks(path, lms):
    """Text format: point count, then ``x y v`` per line.  ``.json`` paths use the JSON form."""
    if str(path).endswith(".json"):
        with open(path, "w") as fh:
            json.dump(lms.to_json(), fh)
        return
    lines = [str(len(lms))]
    lines += [f"{x!r} {y!r} {int(v)}" for (x, y), v in zip(lms.points.tolist(), lms.mask)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_landmarks(path, schema=None):
    if str(path).endswith(".json"):
        with open(path) as fh:
            doc = json.load(fh)
        lms = LandmarkSet.from_json(doc)
        if schema is not None and lms.schema != schema:
            raise ValueError(f"{path}: schema {lms.schema} != expected {schema}")
        return lms
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    if not rows:
        raise ValueError(f"{path}: empty landmark file")
    n = int(rows[0][0])
    body = rows[1:]
    if len(body) != n:
        raise ValueError(f"{path}: header says {n} points, found {len(body)}")
    pts = np.array([[float(r[0]), float(r[1])] for r in body]).reshape(-1, 2)
    mask = np.array([bool(int(r[2])) if len(r) > 2 else True for r in body], dtype=bool)
    schema = schema or _DEFAULT_SCHEMA.get(n)
    if schema is None:
        raise ValueError(f"{path}: no schema has {n} points")
    return LandmarkSet(pts, mask, schema)


# --------------------------------------------------------------------------
# similarity transforms:  p' = scale * R(rotation) p + translation

@dataclass
class SimilarityTransform:
    scale: float = 1.0
    rotation: float = 0.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(2)

    @property
    def linear(self):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    @property
    def matrix(self):
        m = np.eye(3)
        m[:2, :2] = self.linear
        m[:2, 2] = self.translation
        return m

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.linear.T + self.translation

    __call__ = apply

    def inverse(self):
        inv_lin = np.linalg.inv(self.linear)
        return SimilarityTransform(1.0 / self.scale, -self.rotation, -inv_lin @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(self.scale * other.scale, _wrap(self.rotation + other.rotation),
                                   self.linear @ other.translation + self.translation)

    @classmethod
    def from_matrix(cls, m):
        a, b = m[0, 0], m[1, 0]
        return cls(math.hypot(a, b), math.atan2(b, a), m[:2, 2])

    @classmethod
    def identity(cls):
        return cls()


def _wrap(theta):
    return (theta + math.pi) % (2 * math.pi) - math.pi


def similarity_residual(src, dst, tform):
    """Sum of squared distances between ``tform(src)`` and ``dst``."""
    d = tform.apply(src) - dst
    return float((d * d).sum())


def estimate_similarity(src, dst, src_mask=None, dst_mask=None):
    """Least-squares similarity taking ``src`` points onto ``dst``.

    Accepts :class:`LandmarkSet` or (n,2) arrays.  Points masked out in either
    set are ignored.  Closed form from the SVD of the 2x2 cross-covariance,
    with the reflection case folded back to a proper rotation.
    """
    if isinstance(src, LandmarkSet):
        src_mask = src.mask if src_mask is None else src_mask
        src = src.points
    if isinstance(dst, LandmarkSet):
        dst_mask = dst.mask if dst_mask is None else dst_mask
        dst = dst.points
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape:
        raise ValueError("src and dst need the same number of points")
    keep = np.ones(len(src), dtype=bool)
    if src_mask is not None:
        keep &= np.asarray(src_mask, dtype=bool)
    if dst_mask is not None:
        keep &= np.asarray(dst_mask, dtype=bool)
    src, dst = src[keep], dst[keep]
    if len(src) < 2:
        raise DegenerateError("need at least two usable point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs * xs).sum() / len(src)
    if var_s <= 1e-12 * max(1.0, float(np.abs(src).max()) ** 2):
        raise DegenerateError("source points are coincident")
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[1] = -1.0
    rot = u @ np.diag(sign) @ vt
    scale = float((d * sign).sum() / var_s)
    if scale <= 0:
        raise DegenerateError("degenerate correspondence")
    t = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale, math.atan2(rot[1, 0], rot[0, 0]), t)


def transform_landmarks(lms, tform):
    pts = lms.points.copy()
    pts[lms.mask] = tform.apply(lms.points[lms.mask])
    return LandmarkSet(pts, lms.mask.copy(), lms.schema)


def warp_image(img, tform, out_size, out_w=None):
    """Resample ``img`` (C,H,W) into the frame of ``tform`` (image -> output).

    Each output pixel is mapped back through the inverse transform and
    sampled bilinearly; samples outside the source are zero.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    out_h = int(out_size)
    out_w = out_h if out_w is None else int(out_w)
    if out_h <= 0 or out_w <= 0:
        raise ValueError("out_size must be positive")
    inv = tform.inverse()
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    src = inv.apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx = np.ascontiguousarray(src[:, 0].reshape(out_h, out_w))
    sy = np.ascontiguousarray(src[:, 1].reshape(out_h, out_w))
    return kernels.bilinear(img, sx, sy)


def box_to_square_transform(box, out_size):
    """Axis-aligned scale+translate taking ``box`` onto ``[0, out_size)``."""
    sq = box.square()
    s = out_size / sq.width
    return SimilarityTransform(s, 0.0, np.array([-sq.x1 * s, -sq.y1 * s]))
