"""Training loops for the hourglass model, the cascade stage nets and the patch classifier."""
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .alignment import normalize_face
from .geometry import transform_landmarks
from .heatmap import masked_mse_loss, render_heatmaps
from .landmarks.schema import to_union
from .optim import make_optimizer

log = logging.getLogger(__name__)


@dataclass
class HeatmapData:
    crops: np.ndarray        # (B,3,S,S)
    maps: np.ndarray         # (B,Nu,S/4,S/4)
    mask: np.ndarray         # (B,Nu)
    crop_to_image: list
    views: list


def prepare_heatmap_data(samples, schema, size=64, sigma=1.0, template=None, copies=1, five_jitter=0.0, seed=0):
    """Normalise every sample by its five points and render union targets.

    With ``five_jitter > 0`` each of the ``copies`` crops (after the first,
    clean one) perturbs the five points by Gaussian noise of that fraction
    of the face-box diagonal, so the model learns to fit faces whose
    normalisation came from imperfect detector points.
    """
    rng = np.random.default_rng(seed)
    crops, maps, masks, backs, views = [], [], [], [], []
    for s in samples:
        diag = float(np.hypot(s.box.width, s.box.height))
        for c in range(copies):
            five = None if s.five is None else np.asarray(s.five, dtype=np.float64)
            if c and five_jitter > 0 and five is not None:
                five = five + rng.normal(0.0, five_jitter * diag, five.shape)
            crop, back = normalize_face(s.image, s.box, five, size, template)
            local = transform_landmarks(s.landmarks, back.inverse())
            union, _ = to_union(local, s.view, schema)
            m, sel = render_heatmaps(union.points, union.mask, size // 4, size // 4, sigma)
            crops.append(crop)
            maps.append(m)
            masks.append(sel)
            backs.append(back)
            views.append(s.view)
    return HeatmapData(np.stack(crops), np.stack(maps), np.stack(masks), backs, views)


def heatmap_loss(model, crops, maps, mask):
    """Masked loss summed over stacks (equal weights for intermediate supervision)."""
    out = model(T.Tensor(crops))
    outs = out if isinstance(out, tuple) else (out,)
    losses = [masked_mse_loss(o, maps, mask) for o in outs]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total, [l.item() for l in losses]


def cosine_lr(base, step, steps, floor=0.05):
    """Cosine decay from ``base`` down to ``floor * base``."""
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * step / max(steps, 1))))


def train_heatmap_model(model, data, steps, batch_size=12, lr=1e-3, optimizer="adam", momentum=0.9,
                        weight_decay=0.0, seed=0, log_every=0, schedule="constant", stop=None):
    """Minibatch training; returns per-step ``(total, per-stack losses)``.

    ``stop(step, history)`` is called after every step; a true result ends
    training early.
    """
    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer, model.parameters(), lr, momentum, weight_decay)
    n = len(data.crops)
    history = []
    model.train()
    perm = rng.permutation(n)
    pos = 0
    for step in range(steps):
        if batch_size >= n:
            idx = np.arange(n)
        else:
            if pos + batch_size > n:
                perm = rng.permutation(n)
                pos = 0
            idx = perm[pos:pos + batch_size]
            pos += batch_size
        if schedule == "cosine":
            opt.lr = cosine_lr(lr, step, steps)
        opt.zero_grad()
        loss, parts = heatmap_loss(model, data.crops[idx], data.maps[idx], data.mask[idx])
        loss.backward()
        opt.step()
        history.append((loss.item(), parts))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.6f", step, loss.item())
        if stop is not None and stop(step, history):
            break
    return history


# --------------------------------------------------------------------------
# cascade stage nets: windows labelled by overlap with the ground truth

@dataclass
class WindowData:
    crops: np.ndarray
    labels: dict


def _rand_windows(rng, box, n, shift, log_scale):
    cx, cy = box.center
    s = max(box.width, box.height)
    side = s * np.exp(rng.uniform(-log_scale, log_scale, n))
    dx = rng.uniform(-shift, shift, n) * s
    dy = rng.uniform(-shift, shift, n) * s
    return np.stack([cx + dx - side / 2, cy + dy - side / 2, cx + dx + side / 2, cy + dy + side / 2], axis=1)


def label_windows(windows, gt_boxes, gt_fives):
    """Overlap classes: face (IoU > 0.6), part (0.4-0.6), non-face (< 0.3); others get -1."""
    from .geometry import encode_box_targets, encode_landmark_targets, iou_matrix

    n = len(windows)
    cls = np.full(n, -1)
    t = np.zeros((n, 4))
    l = np.zeros((n, 10))
    if len(gt_boxes) == 0:
        cls[:] = 0
        return cls, t, l
    gts = np.array([b.as_array() for b in gt_boxes])
    ov = iou_matrix(windows, gts)
    best = ov.argmax(axis=1)
    top = ov[np.arange(n), best]
    cls[top < 0.3] = 0
    cls[top > 0.6] = 1
    cls[(top >= 0.4) & (top <= 0.6)] = 2
    pos = cls >= 1
    if pos.any():
        t[pos] = encode_box_targets(windows[pos], gts[best[pos]])
        fives = np.array(gt_fives)[best[pos]]
        l[pos] = encode_landmark_targets(windows[pos], gts[best[pos]], fives)
    return cls, t, l


def make_window_data(scenes, size, rng, n_pos=8, n_part=4, n_neg=24, extra_windows=None):
    """Windows around every scene face plus random and hard negatives, cropped to ``size``.

    ``extra_windows[i]`` optionally adds (n,4) windows for scene ``i``, such
    as the survivors of an earlier cascade stage.
    """
    from .pipeline import crop_windows

    crops, cls_all, t_all, l_all = [], [], [], []
    for i, sc in enumerate(scenes):
        h, w = sc.image.shape[1:]
        wins = []
        for b in sc.boxes:
            wins.append(_rand_windows(rng, b, 4 * n_pos, 0.1, 0.15))
            wins.append(_rand_windows(rng, b, 4 * n_part, 0.35, 0.25))
            wins.append(_rand_windows(rng, b, n_neg // 2, 1.0, 0.6))
        sides = [max(b.width, b.height) for b in sc.boxes] or [min(h, w) / 4]
        side = rng.uniform(0.5 * min(sides), 2.0 * max(sides), 2 * n_neg)
        x1 = rng.uniform(-0.2 * side, w - 0.8 * side)
        y1 = rng.uniform(-0.2 * side, h - 0.8 * side)
        wins.append(np.stack([x1, y1, x1 + side, y1 + side], axis=1))
        if extra_windows is not None and len(extra_windows[i]):
            wins.append(np.asarray(extra_windows[i])[:, :4])
        wins = np.vstack(wins)
        cls, t, l = label_windows(wins, sc.boxes, sc.fives)
        take = []
        for c, quota in ((1, n_pos * len(sc.boxes)), (2, n_part * len(sc.boxes)), (0, n_neg)):
            idx = np.flatnonzero(cls == c)
            take.append(idx[:quota])
        if extra_windows is not None and len(extra_windows[i]):
            base = len(wins) - len(extra_windows[i])
            hard = np.flatnonzero(cls[base:] == 0) + base
            take.append(hard[: n_neg])
        take = np.concatenate(take)
        crops.append(crop_windows(sc.image, wins[take], size))
        cls_all.append(cls[take])
        t_all.append(t[take])
        l_all.append(l[take])
    cls = np.concatenate(cls_all)
    labels = {"p": (cls == 1).astype(np.int64), "t": np.vstack(t_all), "l": np.vstack(l_all),
              "cls_mask": (cls != 2).astype(np.float64), "box_mask": (cls >= 1).astype(np.float64),
              "v": np.repeat((cls == 1)[:, None], 10, axis=1).astype(np.float64)}
    return WindowData(np.concatenate(crops), labels)


def train_cascade_stage(net, data, steps, batch_size=64, lr=1e-3, lam1=0.5, lam2=0.5, optimizer="adam", seed=0):
    from .networks import cascade_multitask_loss

    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer, net.parameters(), lr)
    n = len(data.crops)
    net.train()
    history = []
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        opt.zero_grad()
        logits, box, lmk = net(T.Tensor(data.crops[idx]))
        if logits.ndim == 4:
            logits, box, lmk = (T.reshape(a, (a.shape[0], -1)) for a in (logits, box, lmk))
        labels = {k: v[idx] for k, v in data.labels.items()}
        loss = cascade_multitask_loss(logits, box, lmk, labels, lam1, lam2)
        loss.backward()
        opt.step()
        history.append(loss.item())
    net.eval()
    return history


# --------------------------------------------------------------------------
# shape-indexed patch classifier: fitted faces against scrambled or non-face patches

def _patch_stack(crop, pts, valid, schema_size, patch=24):
    from . import kernels

    cy = np.ascontiguousarray(np.round(pts[:, 1]).astype(np.int64))
    cx = np.ascontiguousarray(np.round(pts[:, 0]).astype(np.int64))
    out = kernels.patches(np.ascontiguousarray(crop), cy, cx, patch)
    out[~valid] = 0.0
    return out


def make_patch_data(samples, schema, rng, crop_size=128, jitter=1.5, backgrounds=None, template=None):
    """Balanced face / non-face patch stacks.

    Faces use ground-truth landmarks plus Gaussian jitter.  Non-faces use
    either the right crop with scattered or shuffled landmarks, or a
    background crop (clutter or a flat occluder) with landmarks near the
    template shape.
    """
    from .landmarks.schema import load_templates
    from .landmarks.synthetic import background as make_background

    tpl = load_templates()
    tpl_pts = {"frontal": tpl["frontal"].points, "left_profile": tpl["profile"].points}
    right = tpl["profile"].points.copy()
    right[:, 0] = 1.0 - right[:, 0]
    tpl_pts["right_profile"] = right
    xs, ys = [], []
    for s in samples:
        crop, back = normalize_face(s.image, s.box, s.five, crop_size, template)
        slots = schema.view_map(s.view)
        local = back.inverse().apply(s.landmarks.points)
        valid = np.zeros(schema.size, dtype=bool)
        valid[slots] = True

        def stack(c, p):
            pts = np.zeros((schema.size, 2))
            pts[slots] = p
            return _patch_stack(c, pts, valid, schema.size)

        xs.append(stack(crop, local + rng.normal(0, jitter, local.shape)))
        ys.append(1)
        kind = rng.integers(4)
        if kind == 0:
            bad = rng.uniform(0, crop_size, local.shape)
        elif kind == 1:
            bad = local[rng.permutation(len(local))]
        elif kind == 2:
            ang = rng.uniform(0, 2 * np.pi)
            bad = local + rng.uniform(12, 30) * np.array([np.cos(ang), np.sin(ang)])
        else:
            bad = None
        if bad is not None:
            xs.append(stack(crop, bad))
        else:
            bg = make_background(rng, crop_size, crop_size)
            if rng.random() < 0.5:
                bg[:] = rng.uniform(0.2, 0.8) + rng.normal(0, 0.05, bg.shape)
            elif backgrounds is not None and len(backgrounds):
                bg = backgrounds[rng.integers(len(backgrounds))]
            pts = tpl_pts[s.view] * crop_size + rng.normal(0, 3.0, local.shape)
            xs.append(stack(np.clip(bg, 0, 1), pts))
        ys.append(0)
    return np.stack(xs), np.array(ys)


def train_patch_classifier(model, patches, labels, steps, batch_size=32, lr=1e-3, optimizer="adam", seed=0):
    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer, model.parameters(), lr)
    n = len(patches)
    history = []
    model.train()
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        opt.zero_grad()
        logits = model(T.Tensor(patches[idx]))
        loss = T.tsum(T.cross_entropy(logits, labels[idx], np.full(len(idx), 1.0 / len(idx))))
        loss.backward()
        opt.step()
        history.append(loss.item())
    model.eval()
    return history


def train_cascade(scenes, steps, cfg=None, seed=0, lr=1e-3, batch_size=64, lam1=0.5, lam2=0.5, optimizer="adam"):
    """Train the three stage nets in order; later stages also see the earlier stages' survivors.

    Returns ``(nets, histories)``.
    """
    from .networks import CascadeStageNet
    from .pipeline import CascadeConfig, propose, refine

    cfg = cfg or CascadeConfig()
    rng = np.random.default_rng(seed)
    nets, histories, extra = [], [], None
    for stage in (1, 2, 3):
        net = CascadeStageNet(stage, seed=seed + stage)
        data = make_window_data(scenes, net.input_size, rng, extra_windows=extra)
        histories.append(train_cascade_stage(net, data, steps, batch_size, lr, lam1, lam2, optimizer, seed + stage))
        nets.append(net)
        if stage < 3:
            extra = []
            for sc in scenes:
                boxes = propose(sc.image, nets[0], cfg)
                if stage == 2:
                    boxes, _ = refine(sc.image, boxes, nets[1], cfg.thresholds[1], cfg.nms[1])
                extra.append(boxes)
    return nets, histories
