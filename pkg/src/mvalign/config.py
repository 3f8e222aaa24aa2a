"""Flat ``key = value`` configuration with typed, documented defaults.

Lines starting with ``#`` are comments.  Unknown keys are rejected so that
typos do not silently fall back to defaults.
"""
from dataclasses import dataclass


class ConfigKeyError(ValueError):
    pass


def _floats(text):
    return tuple(float(t) for t in str(text).replace(";", ",").split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in str(text).replace(";", ",").split(",") if t.strip())


def _points(text):
    vals = _floats(text)
    if len(vals) % 2:
        raise ValueError("point list needs an even number of values")
    return tuple(zip(vals[0::2], vals[1::2]))


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    default: object
    parse: object
    doc: str


KEYS = {
    # optimisation
    "seed": Key(0, int, "global random seed"),
    "optimizer": Key("sgd", str, "sgd (with optional momentum) or adam"),
    "lr": Key(1e-4, float, "learning rate"),
    "lr_schedule": Key("constant", str, "constant or cosine"),
    "momentum": Key(0.9, float, "SGD momentum"),
    "weight_decay": Key(0.0, float, "L2 penalty added to gradients"),
    "batch_size": Key(12, int, "training minibatch size"),
    "steps": Key(2000, int, "training steps (desk scale)"),
    # geometry
    "template": Key(((0.35, 0.35), (0.65, 0.35), (0.5, 0.55), (0.38, 0.72), (0.62, 0.72)), _points,
                    "five reference points as fractions of the crop side: eyes, nose, mouth corners"),
    # heatmaps
    "sigma": Key(1.0, float, "target Gaussian width in heatmap pixels"),
    "heatmap_copies": Key(3, int, "crops per training face; copies after the first jitter the five points"),
    "five_jitter": Key(0.03, float, "five-point noise for jittered copies, fraction of the face-box diagonal"),
    "decode_refine": Key("parabola", str, "sub-pixel step used when fitting: quarter or parabola"),
    # networks
    "input_size": Key(64, int, "normalised face crop side S; heatmaps are S/4"),
    "channels": Key(64, int, "hourglass feature channels"),
    "scales": Key(2, int, "hourglass scales n"),
    "two_stack": Key(False, _bool, "use two stacked hourglasses with intermediate supervision"),
    "union": Key("U68", str, "union landmark set: U68 or U86"),
    "u86_dissimilated": Key((15, 16, 5, 6, 7, 8, 9, 10, 11), _ints,
                            "profile indices that get their own U86 slots"),
    "lambda_box": Key(0.5, float, "weight of the box regression term"),
    "lambda_landmark": Key(0.5, float, "weight of the five-landmark term"),
    "cascade_steps": Key(1500, int, "training steps per cascade stage"),
    "classifier_steps": Key(600, int, "patch classifier training steps"),
    # synthetic data and augmentation
    "image_size": Key(128, int, "synthetic face image side"),
    "rotation_deg": Key(30.0, float, "augmentation rotation range (+/-)"),
    "scale_min": Key(0.75, float, "augmentation scale lower bound"),
    "scale_max": Key(1.25, float, "augmentation scale upper bound"),
    "shift_px": Key(20.0, float, "augmentation translation range (+/-)"),
    # pipeline
    "thresholds": Key((0.5, 0.5, 0.3, 0.7), _floats, "stage thresholds: proposal, CLS2, CLS3, CLS4"),
    "nms": Key((0.5, 0.7, 0.5, 0.5), _floats, "NMS IoU per stage"),
    "pyramid_factor": Key(0.709, float, "image pyramid scale step"),
    "min_face": Key(20.0, float, "smallest face searched, pixels"),
    "classifier_size": Key(128, int, "face crop side for shape-indexed patches"),
    "view_margin": Key(0.15, float, "profile contrast a view needs to beat frontal"),
    "track_margin": Key(0.2, float, "previous-box growth per side when tracking"),
    "failure_threshold": Key(0.7, float, "face probability below which a fit has failed"),
    "smooth": Key(False, _bool, "constant-velocity smoothing of tracked landmarks"),
    "process_var": Key(0.05, float, "smoother process noise"),
    "measurement_var": Key(1.0, float, "smoother measurement noise"),
    # evaluation
    "normalizer": Key("bbox_diagonal", str, "eye_centre, outer_eye_corner or bbox_diagonal"),
    "auc_threshold": Key(0.1, float, "CED cut-off for AUC and failure rate"),
}


class Config(dict):
    """Dictionary of parsed values with attribute access."""

    def __getattr__(self, key):
        try:
            return self[key]
        except KeyError:
            raise AttributeError(key) from None

    def to_text(self):
        lines = []
        for k, spec in KEYS.items():
            v = self[k]
            if isinstance(v, tuple) and v and isinstance(v[0], tuple):
                v = ";".join(",".join(repr(c) for c in p) for p in v)
            elif isinstance(v, tuple):
                v = ",".join(repr(c) for c in v)
            lines.append(f"# {spec.doc}\n{k} = {v}")
        return "\n".join(lines) + "\n"


def default_config():
    return Config({k: spec.default for k, spec in KEYS.items()})


def parse_config(text, base=None):
    cfg = Config(base or default_config())
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigKeyError(f"line {lineno}: unknown key {key!r}")
        try:
            cfg[key] = KEYS[key].parse(value)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path=None):
    if path is None:
        return default_config()
    with open(path) as fh:
        return parse_config(fh.read())
