"""Training samples, manifest I/O, synthetic datasets and augmentation."""
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..geometry import SCHEMA_SIZES, Box, LandmarkSet, SimilarityTransform, read_landmarks, transform_landmarks, warp_image, \
    write_landmarks
from . import synthetic
from .schema import NATIVE_SCHEMA, VIEWS


class DatasetError(ValueError):
    """Raised with every malformed manifest entry listed by line number."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


@dataclass
class Sample:
    image: np.ndarray
    landmarks: LandmarkSet
    view: str
    box: Box
    five: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def check(self):
        """Return a list of invariant violations (empty when valid)."""
        problems = []
        if self.view not in VIEWS:
            problems.append(f"invalid view tag {self.view!r}")
            return problems
        want = NATIVE_SCHEMA[self.view]
        if self.landmarks.schema != want:
            problems.append(f"{len(self.landmarks)} points given but view {self.view} needs {SCHEMA_SIZES[want]}")
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[0] != 3:
            problems.append(f"image must be (3,H,W), got {img.shape}")
        pts = self.landmarks.visible()
        if len(pts):
            inside = ((pts[:, 0] >= self.box.x1) & (pts[:, 0] <= self.box.x2)
                      & (pts[:, 1] >= self.box.y1) & (pts[:, 1] <= self.box.y2))
            if inside.mean() < 0.9:
                problems.append(f"box holds only {inside.mean():.0%} of the landmarks")
        return problems


def view_for_index(i):
    """Half frontal, a quarter each profile side, interleaved."""
    return ("frontal", "left_profile", "frontal", "right_profile")[i % 4]


def synthesize_dataset(n, seed, image_size=128, views=None, **jitter):
    """``n`` synthetic faces; sample ``i`` depends only on ``(seed, i)``."""
    if n <= 0:
        raise ValueError("n must be positive")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        view = views[i % len(views)] if views else view_for_index(i)
        face = synthetic.sample_face(rng, view, size=image_size, **jitter)
        out.append(Sample(face.image, synthetic.landmark_set(face.points, view), view, face.box, face.five, face.meta))
    return out


# --------------------------------------------------------------------------
# manifest: one JSON object per line {image, landmarks, view, box[, five]}

def _read_image(path):
    if path.endswith(".npy"):
        img = np.load(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            img = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    return np.asarray(img, dtype=np.float64)


def write_dataset(root, samples, manifest="manifest.jsonl"):
    """Images as ``.npy`` (exact float64), landmarks as text files."""
    os.makedirs(root, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img_name = f"{i:05d}.npy"
        lm_name = f"{i:05d}.pts"
        np.save(os.path.join(root, img_name), np.asarray(s.image, dtype=np.float64))
        write_landmarks(os.path.join(root, lm_name), s.landmarks)
        entry = {"image": img_name, "landmarks": lm_name, "view": s.view, "box": s.box.to_list()}
        if s.five is not None:
            entry["five"] = np.asarray(s.five).tolist()
        if "occluded" in s.meta:
            entry["occluded"] = bool(s.meta["occluded"])
        lines.append(json.dumps(entry))
    path = os.path.join(root, manifest)
    with open(path, "w") as fh:
        fh.write("".join(ln + "\n" for ln in lines))
    return path


def load_dataset(root, manifest="manifest.jsonl"):
    path = manifest if os.path.isabs(manifest) else os.path.join(root, manifest)
    samples, problems = [], []
    with open(path) as fh:
        lines = fh.readlines()
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        where = f"{os.path.basename(path)} line {lineno}"
        try:
            entry = json.loads(raw)
            for key in ("image", "landmarks", "view", "box"):
                if key not in entry:
                    raise ValueError(f"missing key {key!r}")
            view = entry["view"]
            if view not in VIEWS:
                raise ValueError(f"invalid view tag {view!r}")
            img_path = os.path.join(root, entry["image"])
            lm_path = os.path.join(root, entry["landmarks"])
            for p in (img_path, lm_path):
                if not os.path.exists(p):
                    raise ValueError(f"missing file {p}")
            lms = read_landmarks(lm_path)
            if lms.schema != NATIVE_SCHEMA[view]:
                raise ValueError(f"point-count mismatch: {len(lms)} points for view {view} ({entry['landmarks']})")
            box = Box(*map(float, entry["box"]))
            five = np.array(entry["five"], dtype=np.float64) if "five" in entry else None
            meta = {"image": entry["image"]}
            if "occluded" in entry:
                meta["occluded"] = bool(entry["occluded"])
            s = Sample(_read_image(img_path), lms, view, box, five, meta)
            bad = s.check()
            if bad:
                raise ValueError("; ".join(bad))
            samples.append(s)
        except (ValueError, KeyError, TypeError, OSError) as exc:
            problems.append(f"{where}: {exc}")
    if problems:
        raise DatasetError(problems)
    return samples


# --------------------------------------------------------------------------
# augmentation

def sample_augmentation(rng, center, rotation_deg=30.0, scale_range=(0.75, 1.25), shift_px=20.0, magnitude=1.0):
    """Random similarity about ``center``: rotate, scale, then shift."""
    rot = math.radians(rng.uniform(-rotation_deg, rotation_deg)) * magnitude
    scale = 1.0 + (rng.uniform(*scale_range) - 1.0) * magnitude
    shift = rng.uniform(-shift_px, shift_px, 2) * magnitude
    c = np.asarray(center, dtype=np.float64)
    lin = SimilarityTransform(scale, rot, np.zeros(2)).linear
    return SimilarityTransform(scale, rot, c + shift - lin @ c)


def augment(sample, seed, magnitude=1.0, **ranges):
    """Apply one random similarity to image (bilinear) and landmarks alike."""
    rng = np.random.default_rng(seed)
    h, w = sample.image.shape[1:]
    tf = sample_augmentation(rng, ((w - 1) / 2, (h - 1) / 2), magnitude=magnitude, **ranges)
    img = warp_image(sample.image, tf, h, w)
    lms = transform_landmarks(sample.landmarks, tf)
    five = None if sample.five is None else tf.apply(sample.five)
    b = sample.box
    corners = tf.apply(np.array([[b.x1, b.y1], [b.x2, b.y1], [b.x2, b.y2], [b.x1, b.y2]]))
    box = Box.from_points(corners, b.score)
    meta = dict(sample.meta, augmentation={"scale": tf.scale, "rotation": tf.rotation,
                                           "translation": np.asarray(tf.translation).tolist()})
    return Sample(img, lms, sample.view, box, five, meta)


# --------------------------------------------------------------------------
# multi-face scenes: {image, boxes, fives, views} per line

@dataclass
class SceneRecord:
    image: np.ndarray
    boxes: list
    fives: list
    views: list
    name: str = ""


def write_scenes(root, scenes, manifest="scenes.jsonl"):
    os.makedirs(root, exist_ok=True)
    lines = []
    for i, sc in enumerate(scenes):
        name = f"scene{i:05d}.npy"
        np.save(os.path.join(root, name), np.asarray(sc.image, dtype=np.float64))
        lines.append(json.dumps({"image": name, "boxes": [b.to_list() for b in sc.boxes],
                                 "fives": [np.asarray(f).tolist() for f in sc.fives], "views": list(sc.views)}))
    path = os.path.join(root, manifest)
    with open(path, "w") as fh:
        fh.write("".join(ln + "\n" for ln in lines))
    return path


def load_scenes(root, manifest="scenes.jsonl"):
    path = os.path.join(root, manifest)
    out, problems = [], []
    with open(path) as fh:
        lines = fh.readlines()
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            e = json.loads(raw)
            boxes = [Box(*map(float, b)) for b in e["boxes"]]
            fives = [np.asarray(f, dtype=np.float64).reshape(5, 2) for f in e["fives"]]
            if len(fives) != len(boxes):
                raise ValueError("boxes and fives differ in length")
            out.append(SceneRecord(_read_image(os.path.join(root, e["image"])), boxes, fives,
                                   e.get("views", ["frontal"] * len(boxes)), e["image"]))
        except (ValueError, KeyError, TypeError, OSError) as exc:
            problems.append(f"{os.path.basename(path)} line {lineno}: {exc}")
    if problems:
        raise DatasetError(problems)
    return out


def sequence_samples(seq):
    """Frames of a synthetic sequence as samples, ready for :func:`write_dataset`."""
    return [Sample(f, synthetic.landmark_set(p, seq.view), seq.view, b, five, {"occluded": bool(o)})
            for f, p, five, b, o in zip(seq.frames, seq.points, seq.fives, seq.boxes, seq.occluded)]


def read_frames(root, manifest="manifest.jsonl"):
    """Frame images in manifest order, or sorted ``.npy``/``.png`` files when there is no manifest."""
    path = os.path.join(root, manifest)
    if os.path.exists(path):
        with open(path) as fh:
            names = [json.loads(ln)["image"] for ln in fh if ln.strip()]
    else:
        names = sorted(n for n in os.listdir(root) if n.endswith((".npy", ".png", ".jpg")))
    if not names:
        raise DatasetError([f"{root}: no frames"])
    return names, [_read_image(os.path.join(root, n)) for n in names]
