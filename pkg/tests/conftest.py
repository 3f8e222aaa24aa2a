"""Session fixtures: the trained models are built once and shared.

Training the desk-scale models takes about fifteen minutes on one core.  Set
``MVALIGN_MODEL_CACHE`` to a directory to keep the weights between runs; an
empty or missing cache trains from scratch.
"""
import os
import time
from dataclasses import dataclass

import numpy as np
import pytest

from mvalign import serialize
from mvalign.landmarks import build_union_schema, synthesize_dataset
from mvalign.landmarks.synthetic import synthesize_scene
from mvalign.networks import CascadeStageNet, HourglassConfig, MultiViewHourglass, PatchClassifier
from mvalign.pipeline import Models
from mvalign.training import make_patch_data, prepare_heatmap_data, train_cascade, train_heatmap_model, \
    train_patch_classifier

MHM_CONFIG = HourglassConfig(2, 64, 64, 68)
MHM_STEPS = 2000
CASCADE_STEPS = 1500
CLASSIFIER_STEPS = 150

ACCEPTANCE = []


def record(criterion, passed, detail):
    """Note one acceptance line; all of them are repeated in the terminal summary."""
    line = f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def _cached(name, build, model):
    root = os.environ.get("MVALIGN_MODEL_CACHE")
    path = os.path.join(root, name) if root else None
    if path and os.path.exists(path):
        model.load_state_dict(serialize.load(path))
        model.eval()
        return model, None
    info = build(model)
    model.eval()
    if path:
        os.makedirs(root, exist_ok=True)
        serialize.save(path, model.state_dict())
    return model, info


@dataclass
class FaceData:
    train: list
    test: list


@dataclass
class Trained:
    model: object
    seconds: float    # None when loaded from the cache
    history: list


@pytest.fixture(scope="session")
def schema():
    return build_union_schema("U68")


@pytest.fixture(scope="session")
def face_data():
    return FaceData(synthesize_dataset(200, 1, image_size=128), synthesize_dataset(50, 2, image_size=128))


@pytest.fixture(scope="session")
def trained_mhm(face_data, schema):
    def build(model):
        data = prepare_heatmap_data(face_data.train, schema, MHM_CONFIG.input_size, copies=3, five_jitter=0.03)
        t0 = time.perf_counter()
        hist = train_heatmap_model(model, data, MHM_STEPS, batch_size=12, lr=3e-3)
        return time.perf_counter() - t0, hist

    model, info = _cached("mhm.mvaw", build, MultiViewHourglass(MHM_CONFIG))
    return Trained(model, *(info or (None, None)))


@pytest.fixture(scope="session")
def patch_classifier(face_data, schema):
    def build(model):
        patches, labels = make_patch_data(face_data.train, schema, np.random.default_rng(0))
        return train_patch_classifier(model, patches, labels, CLASSIFIER_STEPS, batch_size=16)

    return _cached("patch.mvaw", build, PatchClassifier())[0]


@pytest.fixture(scope="session")
def cascade():
    root = os.environ.get("MVALIGN_MODEL_CACHE")
    paths = [os.path.join(root, f"stage{k}.mvaw") for k in (1, 2, 3)] if root else []
    if paths and all(os.path.exists(p) for p in paths):
        nets = []
        for k, p in enumerate(paths, start=1):
            net = CascadeStageNet(k)
            net.load_state_dict(serialize.load(p))
            nets.append(net)
    else:
        scenes = [synthesize_scene(1000 + i) for i in range(60)]
        nets, _ = train_cascade(scenes, CASCADE_STEPS)
        for net, p in zip(nets, paths):
            os.makedirs(root, exist_ok=True)
            serialize.save(p, net.state_dict())
    for net in nets:
        net.eval()
    return nets


@pytest.fixture(scope="session")
def models(cascade, trained_mhm, patch_classifier, schema):
    return Models(cascade, trained_mhm.model, patch_classifier, schema)
