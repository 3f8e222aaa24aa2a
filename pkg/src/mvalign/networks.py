"""Residual hourglass heatmap models, cascade stage nets and the patch classifier."""
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import serialize
from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Linear, Module


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# residual unit and hourglass

class ResidualUnit(Module):
    """``H(x) + F(x)``: F is three BN-ReLU-conv blocks (1x1, 3x3, 1x1) through a C'/2 bottleneck.

    No convolution here carries a bias: every path out of a residual unit
    reaches a batch normalisation, whose mean subtraction cancels any
    per-channel constant, so such biases would get exactly zero gradient.
    """

    def __init__(self, cin, cout, rng):
        super().__init__()
        mid = max(cout // 2, 1)
        self.bn1 = BatchNorm2d(cin)
        self.conv1 = Conv2d(cin, mid, 1, rng=rng, bias=False)
        self.bn2 = BatchNorm2d(mid)
        self.conv2 = Conv2d(mid, mid, 3, rng=rng, bias=False)
        self.bn3 = BatchNorm2d(mid)
        self.conv3 = Conv2d(mid, cout, 1, rng=rng, bias=False)
        self.skip = Conv2d(cin, cout, 1, rng=rng, bias=False) if cin != cout else None

    def forward(self, x):
        f = self.conv1(T.relu(self.bn1(x)))
        f = self.conv2(T.relu(self.bn2(f)))
        f = self.conv3(T.relu(self.bn3(f)))
        h = x if self.skip is None else self.skip(x)
        return h + f


class Hourglass(Module):
    """n-scale hourglass; spatial size in equals size out."""

    def __init__(self, n, channels, rng):
        super().__init__()
        if n < 1:
            raise ConfigError("hourglass needs at least one scale")
        self.n = n
        self.branch = ResidualUnit(channels, channels, rng)
        self.down = ResidualUnit(channels, channels, rng)
        self.inner = Hourglass(n - 1, channels, rng) if n > 1 else ResidualUnit(channels, channels, rng)
        self.out = ResidualUnit(channels, channels, rng)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % (1 << self.n) or w % (1 << self.n):
            raise T.ShapeError(f"{self.n}-scale hourglass needs sides divisible by {1 << self.n}, got {h}x{w}")
        branch = self.branch(x)
        inner = self.inner(self.down(T.maxpool2(x)))
        return self.out(branch + T.upsample2(inner))


@dataclass
class HourglassConfig:
    scales: int = 2
    channels: int = 64
    input_size: int = 64
    heatmap_channels: int = 68

    def __post_init__(self):
        if self.scales < 1 or self.channels < 2:
            raise ConfigError("scales must be >= 1 and channels >= 2")
        if self.input_size % (1 << (self.scales + 2)):
            raise ConfigError(f"input_size {self.input_size} is not divisible by 2^(scales+2) = {1 << (self.scales + 2)}")

    @property
    def heatmap_size(self):
        return self.input_size // 4


HEAD_INIT_SCALE = 0.01


class _Stem(Module):
    """7x7/2 conv, residual unit, 2x2 max-pool: S -> S/4."""

    def __init__(self, channels, rng):
        super().__init__()
        self.conv = Conv2d(3, channels, 7, stride=2, padding=3, rng=rng, bias=False)
        self.bn = BatchNorm2d(channels)
        self.res = ResidualUnit(channels, channels, rng)

    def forward(self, x):
        return T.maxpool2(self.res(T.relu(self.bn(self.conv(x)))))


class _Head(Module):
    def __init__(self, channels, out, rng):
        super().__init__()
        self.conv = Conv2d(channels, channels, 1, rng=rng, bias=False)
        self.bn = BatchNorm2d(channels)
        self.out = Conv2d(channels, out, 1, rng=rng)
        # start near all-zero maps so the first gradients are not dominated by the output scale
        self.out.weight.data *= HEAD_INIT_SCALE

    def features(self, x):
        return T.relu(self.bn(self.conv(x)))

    def forward(self, x):
        return self.out(self.features(x))


class MultiViewHourglass(Module):
    """One hourglass emitting a union stack of response maps at 1/4 resolution."""

    kind = "mhm"

    def __init__(self, cfg, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.stem = _Stem(cfg.channels, rng)
        self.hourglass = Hourglass(cfg.scales, cfg.channels, rng)
        self.head = _Head(cfg.channels, cfg.heatmap_channels, rng)

    def forward(self, x):
        return self.head(self.hourglass(self.stem(x)))

    def predict(self, x):
        """Response maps for the final stack."""
        return self.forward(x)

    def config(self):
        return asdict(self.cfg)


class TwoStackHourglass(Module):
    """Two hourglasses; the second sees the features plus remapped stack-1 outputs."""

    kind = "mhm2"

    def __init__(self, cfg, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        c = cfg.channels
        self.stem = _Stem(c, rng)
        self.hg1 = Hourglass(cfg.scales, c, rng)
        self.head1 = _Head(c, cfg.heatmap_channels, rng)
        self.remap_features = Conv2d(c, c, 1, rng=rng, bias=False)
        self.remap_maps = Conv2d(cfg.heatmap_channels, c, 1, rng=rng, bias=False)
        self.hg2 = Hourglass(cfg.scales, c, rng)
        self.head2 = _Head(c, cfg.heatmap_channels, rng)

    def forward(self, x):
        x = self.stem(x)
        f1 = self.head1.features(self.hg1(x))
        m1 = self.head1.out(f1)
        x2 = x + self.remap_features(f1) + self.remap_maps(m1)
        return m1, self.head2(self.hg2(x2))

    def predict(self, x):
        return self.forward(x)[1]

    def config(self):
        return asdict(self.cfg)


# --------------------------------------------------------------------------
# cascade stage nets: face probability, box offsets, five landmarks

STAGE_INPUT = {1: 12, 2: 24, 3: 48}


class CascadeStageNet(Module):
    """Stage 1 is fully convolutional (12-px window, stride 2); stages 2 and 3 take 24/48-px crops."""

    kind = "cascade"

    def __init__(self, stage, seed=0):
        super().__init__()
        if stage not in STAGE_INPUT:
            raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
        rng = np.random.default_rng(seed)
        self.stage = stage
        self.input_size = STAGE_INPUT[stage]
        if stage == 1:
            self.c1 = Conv2d(3, 10, 3, padding=0, rng=rng)
            self.c2 = Conv2d(10, 16, 3, padding=0, rng=rng)
            self.c3 = Conv2d(16, 32, 3, padding=0, rng=rng)
            self.cls = Conv2d(32, 2, 1, rng=rng)
            self.box = Conv2d(32, 4, 1, rng=rng)
            self.lmk = Conv2d(32, 10, 1, rng=rng)
            return
        widths = (16, 32, 64) if stage == 2 else (16, 32, 32, 64)
        cin = 3
        self.convs = []
        for i, c in enumerate(widths):
            last = i == len(widths) - 1
            conv = self.add_module(f"c{i + 1}", Conv2d(cin, c, 3, padding=0 if last else 1, rng=rng))
            self.convs.append(conv)
            cin = c
        side = self.input_size
        for _ in widths[:-1]:
            side //= 2
        side = (side - 2) // 2
        hidden = 64 if stage == 2 else 128
        self.fc = Linear(cin * side * side, hidden, rng=rng)
        self.cls = Linear(hidden, 2, rng=rng)
        self.box = Linear(hidden, 4, rng=rng)
        self.lmk = Linear(hidden, 10, rng=rng)

    def forward(self, x):
        """Returns ``(logits, box, landmarks)``; stage 1 returns spatial maps (N,C,h,w)."""
        if self.stage == 1:
            h = T.maxpool2(T.relu(self.c1(x)))
            h = T.relu(self.c3(T.relu(self.c2(h))))
            return self.cls(h), self.box(h), self.lmk(h)
        h = x
        for conv in self.convs:
            h = T.maxpool2(T.relu(conv(h)))
        h = T.relu(self.fc(T.reshape(h, (h.shape[0], -1))))
        return self.cls(h), self.box(h), self.lmk(h)

    def config(self):
        return {"stage": self.stage}


def cascade_multitask_loss(logits, box, lmk, labels, lam1=0.5, lam2=0.5):
    """Batch mean of ``CE + lam1 * p* * R(t - t*) + lam2 * p* * v* R(l - l*)``.

    ``labels`` holds ``p`` (N,) face flags, ``t`` (N,4), ``l`` (N,10) and
    ``v`` (N,10) per-coordinate validity.  Optional ``cls_mask`` drops rows
    from the classification term and ``box_mask`` replaces ``p`` as the box
    gate (partial-overlap samples train the box only).
    """
    if lam1 < 0 or lam2 < 0:
        raise ValueError("loss weights must be non-negative")
    p = np.asarray(labels["p"], dtype=np.int64)
    n = len(p)
    cls_w = np.asarray(labels.get("cls_mask", np.ones(n)), dtype=np.float64) / n
    box_w = np.asarray(labels.get("box_mask", p), dtype=np.float64)[:, None] * (lam1 / n)
    lmk_w = p[:, None] * np.asarray(labels.get("v", np.ones((n, 10))), dtype=np.float64) * (lam2 / n)
    total = T.tsum(T.cross_entropy(logits, p, cls_w))
    if lam1 > 0:
        r = T.smooth_l1(box - np.asarray(labels["t"], dtype=np.float64))
        total = total + T.tsum(r * box_w)
    if lam2 > 0:
        r = T.smooth_l1(lmk - np.asarray(labels["l"], dtype=np.float64))
        total = total + T.tsum(r * lmk_w)
    return total


def face_probability(logits):
    """P(face) from 2-way logits: (N,2) rows or (N,2,h,w) maps."""
    z = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    return 1.0 / (1.0 + np.exp(z[:, 0] - z[:, 1]))


# --------------------------------------------------------------------------
# shape-indexed patch classifier

class PatchClassifier(Module):
    """Shared conv trunk per 24x24 patch, concatenated features, 2-way output."""

    kind = "patch"

    def __init__(self, n_points=68, channels=3, patch=24, seed=0):
        super().__init__()
        if patch != 24:
            raise ConfigError("the patch trunk is laid out for 24x24 patches")
        rng = np.random.default_rng(seed)
        self.n_points = n_points
        self.channels = channels
        self.patch = patch
        self.c1 = Conv2d(channels, 8, 3, padding=1, rng=rng)
        self.c2 = Conv2d(8, 16, 3, padding=1, rng=rng)
        self.c3 = Conv2d(16, 16, 3, padding=0, rng=rng)
        self.fc = Linear(n_points * 16 * 2 * 2, 64, rng=rng)
        self.out = Linear(64, 2, rng=rng)

    def forward(self, patches):
        """``patches`` (B, N, C, 24, 24) or (N, C, 24, 24) -> logits (B, 2)."""
        if patches.ndim == 4:
            patches = T.reshape(patches, (1,) + patches.shape)
        b, n = patches.shape[:2]
        if n != self.n_points:
            raise T.ShapeError(f"expected {self.n_points} patches, got {n}")
        h = T.reshape(patches, (b * n,) + patches.shape[2:])
        h = T.maxpool2(T.relu(self.c1(h)))
        h = T.maxpool2(T.relu(self.c2(h)))
        h = T.maxpool2(T.relu(self.c3(h)))
        h = T.reshape(h, (b, -1))
        return self.out(T.relu(self.fc(h)))

    def probability(self, patches):
        with T.no_grad():
            return face_probability(self.forward(T.Tensor(patches)))

    def config(self):
        return {"n_points": self.n_points, "channels": self.channels, "patch": self.patch}


# --------------------------------------------------------------------------
# checkpoints: weight container plus a JSON sidecar naming the architecture

def _build(kind, config, seed=0):
    if kind in ("mhm", "mhm2"):
        cfg = HourglassConfig(**config)
        return (MultiViewHourglass if kind == "mhm" else TwoStackHourglass)(cfg, seed)
    if kind == "cascade":
        return CascadeStageNet(config["stage"], seed)
    if kind == "patch":
        return PatchClassifier(seed=seed, **config)
    raise ConfigError(f"unknown model kind {kind!r}")


def save_checkpoint(path, model, **extra):
    serialize.save(path, model.state_dict())
    side = {"kind": model.kind, "config": model.config()}
    side.update(extra)
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=1)


def load_checkpoint(path):
    """Rebuild the model named by the sidecar and load its weights; returns ``(model, sidecar)``."""
    with open(str(path) + ".json") as fh:
        side = json.load(fh)
    model = _build(side["kind"], side["config"])
    model.load_state_dict(serialize.load(path))
    model.eval()
    return model, side
