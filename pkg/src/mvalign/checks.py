"""Finite-difference gradient suite over every op and every assembled network."""
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gradcheck import gradcheck
from .heatmap import masked_mse_loss
from .networks import CascadeStageNet, Hourglass, HourglassConfig, MultiViewHourglass, PatchClassifier, \
    ResidualUnit, TwoStackHourglass, cascade_multitask_loss

TOLERANCE = 1e-4
# wide networks have many ReLU / max-pool kinks; a 1e-5 step crosses some of them
NETWORK_STEP = 1e-6


@dataclass
class CheckOutcome:
    name: str
    max_error: float
    seconds: float

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def _leaf(rng, *shape, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _projection(out, rng):
    """Random linear functional of one or more outputs, so every output entry gets a gradient."""
    outs = out if isinstance(out, tuple) else (out,)
    weights = [rng.standard_normal(o.shape) for o in outs]

    def loss(current):
        cur = current if isinstance(current, tuple) else (current,)
        total = T.tsum(cur[0] * weights[0])
        for o, w in zip(cur[1:], weights[1:]):
            total = total + T.tsum(o * w)
        return total

    return loss


def _op_cases(rng):
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 3, 4)
    row = _leaf(rng, 4)
    x = _leaf(rng, 2, 3, 6, 6)
    k = _leaf(rng, 4, 3, 3, 3, scale=0.3)
    kb = _leaf(rng, 4)
    w = _leaf(rng, 5, 4, scale=0.5)
    wb = _leaf(rng, 5)
    g = T.Tensor(1.0 + 0.1 * rng.standard_normal(3), requires_grad=True)
    beta = _leaf(rng, 3)
    logits = _leaf(rng, 6, 3)
    labels = rng.integers(0, 3, 6)
    cw = rng.uniform(0.5, 1.5, 6)
    coeff = rng.standard_normal((3, 4))
    pred = _leaf(rng, 2, 5, 4, 4)
    gt = rng.uniform(0, 1, (2, 5, 4, 4))
    mask = np.array([[True, False, True, True, False], [False, True, True, False, False]])
    big = _leaf(rng, 4, 3, scale=2.5)
    single = _leaf(rng, 3, 5, 5)
    w_big = rng.standard_normal(big.shape)
    w_up = rng.standard_normal((2, 3, 12, 12))
    w_bn = rng.standard_normal(x.shape)
    return [
        ("add_broadcast", lambda: T.tsum((a + row) * coeff), [a, row]),
        ("mul", lambda: T.tsum(a * b * coeff), [a, b]),
        ("square", lambda: T.tsum(T.square(a) * coeff), [a]),
        ("neg_sub", lambda: T.tsum((a - b) * coeff), [a, b]),
        ("sum_axes", lambda: T.tsum(T.sum_axes(a * b, (1,)) * coeff[:, 0]), [a, b]),
        ("reshape", lambda: T.tsum(T.reshape(a, (2, 6)) * coeff.reshape(2, 6)), [a]),
        ("concat", lambda: T.tsum(T.concat([a, b], axis=1) * np.hstack([coeff, -coeff])), [a, b]),
        ("relu", lambda: T.tsum(T.relu(a) * coeff), [a]),
        ("smooth_l1", lambda: T.tsum(T.smooth_l1(big) * w_big), [big]),
        ("fully_connected", lambda: T.tsum(T.fully_connected(a, w, wb) * coeff[:, :1]), [a, w, wb]),
        ("softmax", lambda: T.tsum(T.softmax(logits) * coeff[0, :3]), [logits]),
        ("log_softmax", lambda: T.tsum(T.log_softmax(logits) * coeff[1, :3]), [logits]),
        ("cross_entropy", lambda: T.tsum(T.cross_entropy(logits, labels, cw)), [logits]),
        ("conv2d", lambda: T.tsum(T.square(T.conv2d(x, k, kb, stride=1, padding=1))), [x, k, kb]),
        ("conv2d_stride2", lambda: T.tsum(T.square(T.conv2d(x, k, None, stride=2, padding=1))), [x, k]),
        ("conv2d_single_image", lambda: T.tsum(T.square(T.conv2d(single, k, kb))), [single, k, kb]),
        ("maxpool2", lambda: T.tsum(T.square(T.maxpool2(x))), [x]),
        ("upsample2", lambda: T.tsum(T.square(T.upsample2(x)) * w_up), [x]),
        ("batchnorm", lambda: T.tsum(T.square(T.batchnorm(x, g, beta)) * w_bn), [x, g, beta]),
        ("masked_square_error", lambda: masked_mse_loss(pred, gt, mask), [pred]),
    ]


def _network_case(name, model, x, rng, head=None):
    model.train()
    xt = T.Tensor(x, requires_grad=True)
    if head is None:
        head = _projection(model(xt), rng)
    return name, lambda: head(model(xt)), [xt] + model.parameters()


def _cascade_head(rng, n, spatial):
    cls = rng.integers(0, 3, n)
    labels = {"p": (cls == 1).astype(np.int64), "t": rng.normal(0, 0.2, (n, 4)), "l": rng.normal(0, 0.2, (n, 10)),
              "cls_mask": (cls != 2).astype(np.float64), "box_mask": (cls >= 1).astype(np.float64),
              "v": (rng.random((n, 10)) < 0.8).astype(np.float64)}

    def head(out):
        logits, box, lmk = out
        if spatial:
            logits, box, lmk = (T.reshape(a, (a.shape[0], -1)) for a in (logits, box, lmk))
        return cascade_multitask_loss(logits, box, lmk, labels, 0.5, 0.5)

    return head


def _network_cases(rng):
    cases = [
        _network_case("residual_unit", ResidualUnit(4, 6, rng), rng.standard_normal((2, 4, 6, 6)), rng),
        _network_case("residual_unit_identity", ResidualUnit(4, 4, rng), rng.standard_normal((2, 4, 6, 6)), rng),
        _network_case("hourglass_n1", Hourglass(1, 4, rng), rng.standard_normal((2, 4, 4, 4)), rng),
        _network_case("hourglass_n2", Hourglass(2, 4, rng), rng.standard_normal((2, 4, 8, 8)), rng),
        _network_case("mhm_desk", MultiViewHourglass(HourglassConfig(2, 64, 64, 68), seed=1),
                      rng.uniform(0, 1, (2, 3, 64, 64)), rng),
        _network_case("mhm_two_stack", TwoStackHourglass(HourglassConfig(1, 8, 16, 6), seed=2),
                      rng.uniform(0, 1, (2, 3, 16, 16)), rng),
    ]
    for stage, side in ((1, 12), (2, 24), (3, 48)):
        n = 4
        cases.append(_network_case(f"cascade_stage{stage}_loss", CascadeStageNet(stage, seed=stage),
                                   rng.uniform(0, 1, (n, 3, side, side)), rng, _cascade_head(rng, n, stage == 1)))
    labels = np.array([1, 0])
    cases.append(_network_case("patch_classifier", PatchClassifier(n_points=68, seed=4),
                               rng.uniform(0, 1, (2, 68, 3, 24, 24)), rng,
                               lambda logits: T.tsum(T.cross_entropy(logits, labels, np.full(2, 0.5)))))
    return cases


def run_suite(seed=0, samples=4, include_networks=True, names=None):
    """Run every gradient check; returns a list of :class:`CheckOutcome`.

    Networks perturb ``samples`` random entries per tensor plus one random
    direction through all tensors; small ops are checked entry by entry.
    """
    rng = np.random.default_rng(seed)
    cases = [(n, f, ts, None, 1e-5) for n, f, ts in _op_cases(rng)]
    if include_networks:
        cases += [(n, f, ts, samples, NETWORK_STEP) for n, f, ts in _network_cases(rng)]
    out = []
    for name, fn, tensors, k, h in cases:
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        res = gradcheck(fn, tensors, h=h, samples=k, rng=np.random.default_rng([seed, len(out)]))
        out.append(CheckOutcome(name, res.max_error, time.perf_counter() - t0))
    return out
