"""Union landmark sets joining the 68-point frontal and 39-point profile mark-ups.

Each profile landmark is matched to the nearest frontal landmark on mean
templates kept in ``data/templates.json``; editing the templates changes
the assignment without touching code.  In the 86-slot union a configured
set of nine profile landmarks per side skips the matching and gets its own
slots (68..76 for the left profile, 77..85 for the right).
"""
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from ..geometry import LandmarkSet

VIEWS = ("frontal", "left_profile", "right_profile")
NATIVE_SCHEMA = {"frontal": "P68", "left_profile": "P39", "right_profile": "P39"}


class SchemaError(ValueError):
    pass


@lru_cache(maxsize=None)
def _template_doc():
    with resources.files("mvalign").joinpath("data/templates.json").open() as fh:
        return json.load(fh)


def load_templates():
    """Frontal (68) and left-profile (39) templates plus the reference template."""
    doc = _template_doc()
    return {
        "frontal": LandmarkSet(np.array(doc["frontal68"]), None, "P68"),
        "profile": LandmarkSet(np.array(doc["profile39"]), None, "P39"),
        "five": np.array(doc["five_template"], dtype=np.float64),
        "flip68": np.array(doc["flip68"], dtype=np.int64),
        "u86_dissimilated": tuple(doc["u86_dissimilated"]),
    }


def five_point_template(size=1.0):
    return load_templates()["five"] * size


@dataclass(frozen=True)
class UnionSchema:
    kind: str
    size: int
    frontal_map: np.ndarray
    profile_left_map: np.ndarray
    profile_right_map: np.ndarray

    def view_map(self, view):
        if view == "frontal":
            return self.frontal_map
        if view == "left_profile":
            return self.profile_left_map
        if view == "right_profile":
            return self.profile_right_map
        raise SchemaError(f"unknown view {view!r}")

    def view_mask(self, view):
        m = np.zeros(self.size, dtype=bool)
        m[self.view_map(view)] = True
        return m


def nearest_assignment(profile_pts, frontal_pts):
    """Index of the nearest frontal point for every profile point; ties go to the lower index."""
    d = ((profile_pts[:, None, :] - frontal_pts[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def _mirror(pts):
    out = np.array(pts, dtype=np.float64)
    out[:, 0] = 1.0 - out[:, 0]
    return out


def build_union_schema(kind="U68", frontal_template=None, profile_template=None, dissimilated=None):
    """Assign profile landmarks to union slots by nearest frontal landmark.

    Templates must share one normalized frame; the right-profile template
    is the mirror image of the left one (x -> 1 - x).
    """
    if kind not in ("U68", "U86"):
        raise SchemaError(f"unknown union kind {kind!r}")
    tpl = load_templates()
    frontal = (frontal_template or tpl["frontal"]).points
    profile = (profile_template or tpl["profile"]).points
    if len(frontal) != 68 or len(profile) != 39:
        raise SchemaError("templates must hold 68 frontal and 39 profile points")
    frontal_map = np.arange(68)
    left = nearest_assignment(profile, frontal)
    right = nearest_assignment(_mirror(profile), frontal)
    size = 68
    if kind == "U86":
        dis = np.array(tpl["u86_dissimilated"] if dissimilated is None else dissimilated, dtype=np.int64)
        if len(dis) != 9 or len(set(dis.tolist())) != 9 or dis.min() < 0 or dis.max() >= 39:
            raise SchemaError("U86 needs 9 distinct profile indices")
        dis = np.sort(dis)
        left[dis] = 68 + np.arange(9)
        right[dis] = 77 + np.arange(9)
        size = 86
    for name, m in (("left", left), ("right", right)):
        if len(np.unique(m)) != len(m):
            vals, counts = np.unique(m, return_counts=True)
            raise SchemaError(f"{name} profile assignment is not injective; shared slots {vals[counts > 1].tolist()}")
    return UnionSchema(kind, size, frontal_map, left, right)


def to_union(lms, view, schema):
    """Scatter native landmarks into union slots; returns ``(LandmarkSet, mask)``."""
    if view not in VIEWS:
        raise SchemaError(f"unknown view {view!r}")
    if lms.schema != NATIVE_SCHEMA[view]:
        raise SchemaError(f"view {view} expects {NATIVE_SCHEMA[view]}, got {lms.schema}")
    idx = schema.view_map(view)
    pts = np.zeros((schema.size, 2))
    pts[idx] = lms.points
    mask = np.zeros(schema.size, dtype=bool)
    mask[idx] = True
    sel = mask.copy()
    sel[idx] = lms.mask
    return LandmarkSet(pts, sel, schema.kind), mask


def from_union(union, mask, view, schema):
    """Gather union slots back into the native ordering of ``view``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (schema.size,):
        raise SchemaError(f"mask must have {schema.size} entries")
    idx = schema.view_map(view)
    if not np.array_equal(mask, schema.view_mask(view)):
        raise SchemaError(f"mask does not match the {view} slots")
    return LandmarkSet(union.points[idx].copy(), union.mask[idx].copy(), NATIVE_SCHEMA[view])
