"""Procedural face-like figures with exactly known landmarks.

Faces live in a canonical unit frame whose five reference points coincide
with the default crop template.  Every landmark is a sample of a parametric
curve (jaw ellipse arc, brow parabolas, eye and lip ellipses, nose lines);
profile views apply a per-point depth-dependent yaw to the same curves and
keep the 39 visible points.  A random similarity then places the figure
in the image.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..geometry import Box, LandmarkSet, SimilarityTransform

VIEWS = ("frontal", "left_profile", "right_profile")

# frontal indices each profile landmark is generated from (left profile: the
# nose points to image-left and the image-right half of the face is visible)
PROFILE_SOURCE = np.array([16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5,
                           22, 23, 24, 25, 26,
                           42, 43, 44, 45, 46, 47,
                           27, 28, 29, 30, 33, 34,
                           51, 52, 53, 54, 55, 56, 57, 62, 64, 66])

FLIP68 = np.array(list(range(16, -1, -1)) + list(range(26, 16, -1)) + [27, 28, 29, 30] + [35, 34, 33, 32, 31]
                  + [45, 44, 43, 42, 47, 46] + [39, 38, 37, 36, 41, 40]
                  + [54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55] + [64, 63, 62, 61, 60, 67, 66, 65])


@dataclass
class FaceParams:
    jaw_width: float = 1.0
    eye_scale: float = 1.0
    mouth_width: float = 1.0
    mouth_open: float = 0.0125
    brow_raise: float = 0.0
    nose_length: float = 1.0
    yaw_deg: float = 10.0
    skin: tuple = (0.86, 0.70, 0.58)
    ink: tuple = (0.16, 0.10, 0.08)
    lips: tuple = (0.72, 0.26, 0.26)

    @classmethod
    def random(cls, rng):
        return cls(jaw_width=rng.uniform(0.92, 1.08), eye_scale=rng.uniform(0.85, 1.15),
                   mouth_width=rng.uniform(0.9, 1.1), mouth_open=rng.uniform(0.0, 0.025),
                   brow_raise=rng.uniform(-0.015, 0.015), nose_length=rng.uniform(0.92, 1.08),
                   yaw_deg=rng.uniform(8.0, 12.0),
                   skin=tuple(np.clip(np.array([0.86, 0.70, 0.58]) + rng.uniform(-0.08, 0.08, 3), 0, 1)),
                   ink=tuple(np.clip(np.array([0.16, 0.10, 0.08]) + rng.uniform(-0.05, 0.05, 3), 0, 1)),
                   lips=tuple(np.clip(np.array([0.72, 0.26, 0.26]) + rng.uniform(-0.08, 0.08, 3), 0, 1)))


# --------------------------------------------------------------------------
# parametric curves in the canonical frontal frame; each returns (pts, depth)

def jaw(p, t):
    psi = math.pi + 0.15 - np.asarray(t) * (math.pi + 0.3)
    pts = np.stack([0.5 + 0.36 * p.jaw_width * np.cos(psi), 0.40 + 0.52 * np.sin(psi)], axis=-1)
    return pts, -0.05 + 0.15 * np.clip(np.sin(psi), 0, None)


def _brow_y(p, x):
    xl = np.where(x > 0.5, 1.0 - x, x)
    return 0.26 + p.brow_raise - 0.04 * (1.0 - ((xl - 0.315) / 0.125) ** 2)


def brow(p, t, side):
    t = np.asarray(t)
    x = 0.19 + 0.25 * t if side == "left" else 0.56 + 0.25 * t
    return np.stack([x, _brow_y(p, x)], axis=-1), np.full(t.shape, 0.08)


def nose_bridge(p, t):
    t = np.asarray(t)
    return np.stack([np.full(t.shape, 0.5), 0.35 + 0.20 * p.nose_length * t], axis=-1), 0.12 + 0.16 * t


def nose_base(p, t):
    x = 0.44 + 0.12 * np.asarray(t)
    q = ((x - 0.5) / 0.06) ** 2
    y = 0.35 + 0.20 * p.nose_length + 0.07 - 0.02 * q
    return np.stack([x, y], axis=-1), 0.20 - 0.05 * q


def eye(p, t, side):
    psi = math.pi + 2 * math.pi * np.asarray(t)
    cx = 0.35 if side == "left" else 0.65
    pts = np.stack([cx + 0.065 * p.eye_scale * np.cos(psi), 0.35 + 0.03 * p.eye_scale * np.sin(psi)], axis=-1)
    return pts, np.full(psi.shape, 0.05)


def _lip_depth(p, x):
    return 0.05 + 0.05 * (1.0 - ((x - 0.5) / (0.12 * p.mouth_width)) ** 2)


def mouth_outer(p, t):
    psi = math.pi + 2 * math.pi * np.asarray(t)
    s = np.sin(psi)
    s = np.where(np.abs(s) < 1e-12, 0.0, s)
    ry = np.where(s < 0, 0.045, 0.06)
    x = 0.5 + 0.12 * p.mouth_width * np.cos(psi)
    return np.stack([x, 0.72 + ry * s], axis=-1), _lip_depth(p, x)


def mouth_inner(p, t):
    psi = math.pi + 2 * math.pi * np.asarray(t)
    s = np.sin(psi)
    s = np.where(np.abs(s) < 1e-12, 0.0, s)
    x = 0.5 + 0.085 * p.mouth_width * np.cos(psi)
    return np.stack([x, 0.72 + (0.008 + p.mouth_open) * s], axis=-1), _lip_depth(p, x)


# (curve, kwargs, landmark parameter values)
LANDMARK_CURVES = [
    (jaw, {}, np.arange(17) / 16),
    (brow, {"side": "left"}, np.arange(5) / 4),
    (brow, {"side": "right"}, np.arange(5) / 4),
    (nose_bridge, {}, np.arange(4) / 3),
    (nose_base, {}, np.arange(5) / 4),
    (eye, {"side": "left"}, np.arange(6) / 6),
    (eye, {"side": "right"}, np.arange(6) / 6),
    (mouth_outer, {}, np.arange(12) / 12),
    (mouth_inner, {}, np.arange(8) / 8),
]


def frontal_points(p):
    """68 canonical landmarks plus per-point depth."""
    pts, depth = [], []
    for fn, kw, t in LANDMARK_CURVES:
        a, d = fn(p, t, **kw)
        pts.append(a)
        depth.append(d)
    return np.concatenate(pts), np.concatenate(depth)


def yaw(pts, depth, yaw_deg, side):
    """Depth-dependent horizontal shift; ``side`` is the view it produces."""
    th = math.radians(yaw_deg)
    x = 0.5 + (pts[..., 0] - 0.5) * math.cos(th) - depth * math.sin(th)
    out = np.stack([x, pts[..., 1]], axis=-1)
    if side == "right_profile":
        out[..., 0] = 1.0 - out[..., 0]
    return out


def view_points(p, view):
    """Native landmarks (68 or 39) and the five reference points in the canonical frame."""
    pts, depth = frontal_points(p)
    if view == "frontal":
        full = pts
    else:
        full = yaw(pts, depth, p.yaw_deg, view)
    eyes = full[36:42].mean(axis=0), full[42:48].mean(axis=0)
    five = np.array([eyes[0], eyes[1], full[30], full[48], full[54]])
    if view == "right_profile":
        five = five[[1, 0, 2, 4, 3]]
    native = full if view == "frontal" else full[PROFILE_SOURCE]
    return native, five


def mean_shapes():
    """Frontal 68 and left-profile 39 mean shapes in the canonical frame."""
    p = FaceParams()
    return view_points(p, "frontal")[0], view_points(p, "left_profile")[0]


# --------------------------------------------------------------------------
# raster primitives; ``U`` holds canonical coordinates of every pixel and
# ``px`` is the size of one pixel in canonical units

def _blend(img, alpha, color):
    if not np.any(alpha > 0):
        return
    a = alpha[None]
    img *= 1.0 - a
    img += a * np.asarray(color, dtype=np.float64)[:, None, None]


def _seg_distance(U, poly):
    """Distance from every pixel to a polyline, in canonical units."""
    a = poly[:-1]
    b = poly[1:]
    best = np.full(U.shape[:2], np.inf)
    for (ax, ay), (bx, by) in zip(a, b):
        dx, dy = bx - ax, by - ay
        ll = dx * dx + dy * dy
        if ll == 0:
            t = np.zeros(U.shape[:2])
        else:
            t = np.clip(((U[..., 0] - ax) * dx + (U[..., 1] - ay) * dy) / ll, 0.0, 1.0)
        ex = U[..., 0] - (ax + t * dx)
        ey = U[..., 1] - (ay + t * dy)
        np.minimum(best, ex * ex + ey * ey, out=best)
    return np.sqrt(best)


def _inside(U, poly):
    x, y = U[..., 0], U[..., 1]
    inside = np.zeros(U.shape[:2], dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if y0 == y1:
            continue
        cross = ((y0 > y) != (y1 > y)) & (x < (x1 - x0) * (y - y0) / (y1 - y0) + x0)
        inside ^= cross
    return inside


def _fill(img, U, poly, color, px):
    closed = np.vstack([poly, poly[:1]])
    d = _seg_distance(U, closed) / px
    sd = np.where(_inside(U, poly), -d, d)
    _blend(img, np.clip(0.5 - sd, 0.0, 1.0), color)


def _stroke(img, U, poly, width_px, color, px):
    d = _seg_distance(U, poly) / px
    _blend(img, np.clip(0.5 * width_px + 0.5 - d, 0.0, 1.0), color)


def _ellipse_poly(cx, cy, rx, ry, n=48):
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([cx + rx * np.cos(a), cy + ry * np.sin(a)], axis=1)


def background(rng, h, w, low=0.15, high=0.85, noise=0.02):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((3, h, w))
    for c in range(3):
        acc = np.full((h, w), rng.uniform(low, high))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, 2)
            ph = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.03, 0.12) * np.cos(2 * np.pi * (fx * xx + fy * yy) + ph)
        img[c] = acc
    img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def _pixel_grid(tform, h, w, box=None):
    """Canonical coordinates of image pixels, optionally within ``box`` only."""
    if box is None:
        y0, y1, x0, x1 = 0, h, 0, w
    else:
        x0 = max(int(math.floor(box[0])), 0)
        y0 = max(int(math.floor(box[1])), 0)
        x1 = min(int(math.ceil(box[2])) + 1, w)
        y1 = min(int(math.ceil(box[3])) + 1, h)
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    U = tform.inverse().apply(np.stack([xs, ys], axis=-1).reshape(-1, 2)).reshape(ys.shape + (2,))
    return U, (slice(y0, y1), slice(x0, x1))


def draw_face(img, tform, p, view):
    """Composite a face onto ``img`` (3,H,W) in place; ``tform`` maps canonical -> image."""
    h, w = img.shape[1:]
    corners = tform.apply(np.array([[-0.2, -0.3], [1.2, -0.3], [1.2, 1.1], [-0.2, 1.1]]))
    bb = (corners[:, 0].min() - 2, corners[:, 1].min() - 2, corners[:, 0].max() + 2, corners[:, 1].max() + 2)
    if bb[2] < 0 or bb[3] < 0 or bb[0] >= w or bb[1] >= h:
        return
    U, sl = _pixel_grid(tform, h, w, bb)
    if U.size == 0:
        return
    sub = img[:, sl[0], sl[1]]
    px = 1.0 / tform.scale
    shade = tuple(0.8 * np.asarray(p.skin))

    def curve(fn, t0=0.0, t1=1.0, n=40, **kw):
        pts, depth = fn(p, np.linspace(t0, t1, n), **kw)
        return pts if view == "frontal" else yaw(pts, depth, p.yaw_deg, view)

    line_w = max(1.2, 0.012 / px)
    if view == "frontal":
        head = _ellipse_poly(0.5, 0.40, 0.36 * p.jaw_width, 0.52, 64)
        _fill(sub, U, head, p.skin, px)
        _stroke(sub, U, curve(jaw, n=64), line_w, shade, px)
        _stroke(sub, U, curve(brow, side="left"), max(1.5, 0.022 / px), p.ink, px)
        _stroke(sub, U, curve(brow, side="right"), max(1.5, 0.022 / px), p.ink, px)
        _fill(sub, U, curve(eye, 0, 1, 32, side="left")[:-1], p.ink, px)
        _fill(sub, U, curve(eye, 0, 1, 32, side="right")[:-1], p.ink, px)
        _stroke(sub, U, curve(nose_bridge, n=8), line_w, shade, px)
        _stroke(sub, U, curve(nose_base, n=16), max(1.5, 0.018 / px), p.ink, px)
        _fill(sub, U, curve(mouth_outer, 0, 1, 48)[:-1], p.lips, px)
        _fill(sub, U, curve(mouth_inner, 0, 1, 32)[:-1], p.ink, px)
        return

    # profile: back of the head, visible half of the features, nose wedge
    sign = 1.0 if view == "left_profile" else -1.0
    cx = 0.5 + sign * 0.06
    head = _ellipse_poly(cx, 0.38, 0.36 * p.jaw_width, 0.54, 64)
    _fill(sub, U, head, p.skin, px)
    contour = curve(jaw, 5 / 16, 1.0, 48)
    _stroke(sub, U, contour, max(1.5, 0.018 / px), p.ink, px)
    _stroke(sub, U, curve(brow, side="right"), max(1.5, 0.022 / px), p.ink, px)
    _fill(sub, U, curve(eye, 0, 1, 32, side="right")[:-1], p.ink, px)
    bridge = curve(nose_bridge, n=8)
    base = curve(nose_base, n=16)
    tip = bridge[-1].copy()
    wedge = np.array([bridge[0], tip + np.array([-sign * 0.05, 0.0]), base[len(base) // 2], base[-1 if sign > 0 else 0]])
    _fill(sub, U, wedge, shade, px)
    _stroke(sub, U, np.vstack([bridge[0], tip + np.array([-sign * 0.05, 0.0]), base[len(base) // 2]]), line_w, p.ink, px)
    _stroke(sub, U, base, max(1.5, 0.018 / px), p.ink, px)
    outer = curve(mouth_outer, 0.25, 1.25, 48)
    inner = curve(mouth_inner, 0.25, 1.25, 32)
    if view == "right_profile":
        outer = curve(mouth_outer, -0.25, 0.75, 48)
        inner = curve(mouth_inner, -0.25, 0.75, 32)
    _fill(sub, U, outer, p.lips, px)
    _fill(sub, U, inner, p.ink, px)


# --------------------------------------------------------------------------
# samples, scenes, sequences

@dataclass
class Placement:
    """Where a canonical face lands in the image."""
    scale: float
    rotation: float
    center: tuple

    def transform(self):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        lin = self.scale * np.array([[c, -s], [s, c]])
        t = np.asarray(self.center) - lin @ np.array([0.5, 0.55])
        return SimilarityTransform(self.scale, self.rotation, t)


def face_box(points):
    """Square box around the landmarks, the convention for ground-truth faces."""
    return Box.from_points(points).square()


def render_face(view, params, placement, image=None, size=128, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    img = background(rng, size, size) if image is None else image
    tf = placement.transform()
    draw_face(img, tf, params, view)
    native, five = view_points(params, view)
    return img, tf.apply(native), tf.apply(five), tf


@dataclass
class SyntheticFace:
    image: np.ndarray
    points: np.ndarray
    five: np.ndarray
    view: str
    box: Box
    meta: dict = field(default_factory=dict)


def sample_face(rng, view, size=128, base_scale=None, rotation_deg=30.0, scale_range=(0.75, 1.25), shift_px=20.0):
    base = 0.55 * size if base_scale is None else base_scale
    params = FaceParams.random(rng)
    placement = Placement(scale=base * rng.uniform(*scale_range),
                          rotation=math.radians(rng.uniform(-rotation_deg, rotation_deg)),
                          center=(size / 2 + rng.uniform(-shift_px, shift_px), size / 2 + rng.uniform(-shift_px, shift_px)))
    img = background(rng, size, size)
    img, pts, five, tf = render_face(view, params, placement, img, size, rng)
    img += rng.normal(0.0, 0.01, img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    meta = {"params": asdict(params), "scale": placement.scale, "rotation": placement.rotation,
            "center": list(placement.center)}
    return SyntheticFace(img, pts, five, view, face_box(pts), meta)


def landmark_set(points, view):
    return LandmarkSet(points, None, "P68" if view == "frontal" else "P39")


@dataclass
class Scene:
    image: np.ndarray
    boxes: list
    fives: list
    points: list
    views: list


def _distractors(img, rng, count):
    h, w = img.shape[1:]
    ident = SimilarityTransform(1.0, 0.0, np.zeros(2))
    U, _ = _pixel_grid(ident, h, w)
    for _ in range(count):
        color = rng.uniform(0.0, 1.0, 3)
        if rng.random() < 0.5:
            c = rng.uniform(0, [w, h])
            r = rng.uniform(4, 18, 2)
            _fill(img, U, _ellipse_poly(c[0], c[1], r[0], r[1], 32), color, 1.0)
        else:
            pts = np.cumsum(rng.normal(0, 10, (5, 2)), axis=0) + rng.uniform(0, [w, h])
            _stroke(img, U, pts, rng.uniform(1.5, 4.0), color, 1.0)


def _layout(rng, size, n_faces, face_px, rotation_deg, views, attempts=200):
    """Non-overlapping face placements, or None when the page fills up first."""
    out, placed = [], []
    for _ in range(attempts):
        if len(out) == n_faces:
            break
        view = views[len(out)] if views is not None else VIEWS[rng.integers(3)]
        params = FaceParams.random(rng)
        face = rng.uniform(*face_px)
        placement = Placement(scale=face / 0.8, rotation=math.radians(rng.uniform(-rotation_deg, rotation_deg)),
                              center=tuple(rng.uniform(face * 0.6, size - face * 0.6, 2)))
        tf = placement.transform()
        native, five = view_points(params, view)
        pts = tf.apply(native)
        box = face_box(pts)
        grown = box.expand(0.15)
        if grown.x1 < 0 or grown.y1 < 0 or grown.x2 > size or grown.y2 > size:
            continue
        if any(min(grown.x2, q.x2) > max(grown.x1, q.x1) and min(grown.y2, q.y2) > max(grown.y1, q.y1) for q in placed):
            continue
        placed.append(grown)
        out.append((view, params, tf, box, tf.apply(five), pts))
    return out if len(out) == n_faces else None


def synthesize_scene(seed, size=160, n_faces=3, face_px=(32, 52), rotation_deg=15.0, views=None, distractors=6):
    """Image with ``n_faces`` non-overlapping faces on a cluttered background."""
    rng = np.random.default_rng(seed)
    img = background(rng, size, size)
    _distractors(img, rng, distractors)
    for _ in range(50):
        layout = _layout(rng, size, n_faces, face_px, rotation_deg, views)
        if layout is not None:
            break
    else:
        raise RuntimeError("could not place faces without overlap")
    for view, params, tf, *_ in layout:
        draw_face(img, tf, params, view)
    img += rng.normal(0.0, 0.01, img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    return Scene(img, [f[3] for f in layout], [f[4] for f in layout], [f[5] for f in layout], [f[0] for f in layout])


@dataclass
class Sequence:
    frames: list
    points: list
    fives: list
    boxes: list
    occluded: np.ndarray
    view: str


def synthesize_sequence(n_frames, seed, size=128, view="frontal", occlusion=None, amplitude=18.0, face_px=56.0):
    """Single face on a smooth trajectory over a static background.

    ``occlusion`` is ``(start, length)``: those frames get an opaque patch
    covering the whole face.
    """
    rng = np.random.default_rng(seed)
    params = FaceParams.random(rng)
    params.mouth_open = 0.01
    bg = background(rng, size, size)
    phase = rng.uniform(0, 2 * np.pi, 4)
    frames, pts_all, fives, boxes = [], [], [], []
    occluded = np.zeros(n_frames, dtype=bool)
    if occlusion is not None:
        occluded[occlusion[0]:occlusion[0] + occlusion[1]] = True
    for k in range(n_frames):
        s = k / max(n_frames - 1, 1)
        placement = Placement(
            scale=face_px / 0.8 * (1.0 + 0.08 * math.sin(2 * math.pi * s + phase[0])),
            rotation=math.radians(10.0 * math.sin(2 * math.pi * s + phase[1])),
            center=(size / 2 + amplitude * math.sin(2 * math.pi * s + phase[2]),
                    size / 2 + 0.6 * amplitude * math.sin(4 * math.pi * s + phase[3])))
        img = bg.copy()
        img, pts, five, tf = render_face(view, params, placement, img, size, rng)
        box = face_box(pts)
        if occluded[k]:
            occ = box.expand(0.3)
            ys, xs = np.mgrid[0:size, 0:size]
            m = (xs >= occ.x1) & (xs <= occ.x2) & (ys >= occ.y1) & (ys <= occ.y2)
            img[:, m] = 0.45 + 0.05 * rng.standard_normal((3, int(m.sum())))
        img = np.clip(img + rng.normal(0.0, 0.01, img.shape), 0.0, 1.0)
        frames.append(img)
        pts_all.append(pts)
        fives.append(five)
        boxes.append(box)
    return Sequence(frames, pts_all, fives, boxes, occluded, view)
