"""Test doubles and small geometry helpers shared across the suite."""
import numpy as np

from mvalign.alignment import normalize_face
from mvalign.geometry import SimilarityTransform, transform_landmarks
from mvalign.heatmap import render_heatmaps
from mvalign.landmarks import to_union


def rotate_about(angle, centre):
    c = np.asarray(centre, dtype=np.float64)
    lin = SimilarityTransform(1.0, angle, np.zeros(2))
    return SimilarityTransform(1.0, angle, c - lin.apply(c[None])[0])


class _Cfg:
    def __init__(self, size):
        self.input_size = size


class OracleModel:
    """Stands in for the hourglass: emits ground-truth maps for one known sample."""

    training = False

    def __init__(self, sample, schema, size):
        self.cfg = _Cfg(size)
        _, back = normalize_face(sample.image, sample.box, sample.five, size)
        local = transform_landmarks(sample.landmarks, back.inverse())
        union, _ = to_union(local, sample.view, schema)
        self.maps, _ = render_heatmaps(union.points, union.mask, size // 4, size // 4)

    def eval(self):
        return self

    def train(self, mode=True):
        return self

    def predict(self, x):
        from mvalign import tensor as T

        return T.Tensor(np.repeat(self.maps[None], x.shape[0], axis=0))

