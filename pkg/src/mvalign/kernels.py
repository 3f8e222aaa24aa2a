"""Hot inner loops, each with a numba kernel and a numpy fallback.

Both variants of a kernel return the same values; copies are bit-identical,
accumulating kernels (``col2im``) may differ in the last ulp because the
summation order differs.  The public names at the bottom are bound to one
implementation according to ``mvalign._accel.USE_NUMBA``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, pick


# --------------------------------------------------------------------------
# im2col / col2im

def _im2col_numpy(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


@njit
def _im2col_numba(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n * ho * wo, c * kh * kw))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                y0 = i * stride
                x0 = j * stride
                col = 0
                for ch in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            cols[row, col] = xp[b, ch, y0 + di, x0 + dj]
                            col += 1
    return cols


def _col2im_numpy(dcols, shape, kh, kw, stride):
    n, c, hp, wp = shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros(shape)
    for di in range(kh):
        for dj in range(kw):
            dxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += d[:, :, di, dj]
    return dxp


@njit
def _col2im_numba_impl(dcols, n, c, hp, wp, kh, kw, stride):
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    dxp = np.zeros((n, c, hp, wp))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                y0 = i * stride
                x0 = j * stride
                col = 0
                for ch in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            dxp[b, ch, y0 + di, x0 + dj] += dcols[row, col]
                            col += 1
    return dxp


def _col2im_numba(dcols, shape, kh, kw, stride):
    n, c, hp, wp = shape
    return _col2im_numba_impl(np.ascontiguousarray(dcols), n, c, hp, wp, kh, kw, stride)


# --------------------------------------------------------------------------
# 2x2 max pooling; ties go to the lowest row-major index inside the window

def _maxpool2_numpy(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int8)


@njit
def _maxpool2_numba(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2))
    arg = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    for b in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    best = x[b, ch, 2 * i, 2 * j]
                    k = 0
                    v = x[b, ch, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[b, ch, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        k = 2
                    v = x[b, ch, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = k
    return out, arg


def _maxpool2_backward_numpy(g, arg):
    n, c, ho, wo = g.shape
    onehot = (arg[..., None] == np.arange(4)) * g[..., None]
    return onehot.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)


@njit
def _maxpool2_backward_numba(g, arg):
    n, c, ho, wo = g.shape
    dx = np.zeros((n, c, 2 * ho, 2 * wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    k = arg[b, ch, i, j]
                    dx[b, ch, 2 * i + k // 2, 2 * j + k % 2] = g[b, ch, i, j]
    return dx


# --------------------------------------------------------------------------
# bilinear sampling with zeros outside the image

def _bilinear_numpy(img, xs, ys):
    c, h, w = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros((c,) + xs.shape)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            wgt = np.where(ok, wy * wx, 0.0)
            vals = img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += wgt * vals
    return out


@njit
def _bilinear_numba(img, xs, ys):
    c, h, w = img.shape
    ho, wo = xs.shape
    out = np.zeros((c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            x = xs[i, j]
            y = ys[i, j]
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            fx = x - x0
            fy = y - y0
            for dy in range(2):
                yy = y0 + dy
                if yy < 0 or yy >= h:
                    continue
                wy = fy if dy == 1 else 1.0 - fy
                for dx in range(2):
                    xx = x0 + dx
                    if xx < 0 or xx >= w:
                        continue
                    wx = fx if dx == 1 else 1.0 - fx
                    wgt = wy * wx
                    for ch in range(c):
                        out[ch, i, j] += wgt * img[ch, yy, xx]
    return out


# --------------------------------------------------------------------------
# greedy NMS over boxes already sorted by descending score

def _nms_sorted_numpy(boxes, thr):
    x1, y1, x2, y2 = boxes.T
    area = (x2 - x1) * (y2 - y1)
    alive = np.ones(len(boxes), dtype=bool)
    keep = []
    for i in range(len(boxes)):
        if not alive[i]:
            continue
        keep.append(i)
        iw = np.clip(np.minimum(x2[i], x2[i + 1:]) - np.maximum(x1[i], x1[i + 1:]), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2[i + 1:]) - np.maximum(y1[i], y1[i + 1:]), 0.0, None)
        inter = iw * ih
        ov = inter / (area[i] + area[i + 1:] - inter)
        alive[i + 1:] &= ov <= thr
    return np.array(keep, dtype=np.int64)


@njit
def _nms_sorted_numba(boxes, thr):
    n = boxes.shape[0]
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    nk = 0
    for i in range(n):
        if not alive[i]:
            continue
        keep[nk] = i
        nk += 1
        ai = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for j in range(i + 1, n):
            if not alive[j]:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            aj = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (ai + aj - inter) > thr:
                alive[j] = False
    return keep[:nk]


# --------------------------------------------------------------------------
# square patches around integer centres, zero padded

def _patches_numpy(img, cy, cx, size):
    c, h, w = img.shape
    half = size // 2
    pad = np.pad(img, ((0, 0), (size, size), (size, size)))
    out = np.empty((len(cy), c, size, size))
    for k in range(len(cy)):
        y0 = int(cy[k]) - half + size
        x0 = int(cx[k]) - half + size
        y0 = min(max(y0, 0), h + size)
        x0 = min(max(x0, 0), w + size)
        out[k] = pad[:, y0:y0 + size, x0:x0 + size]
    return out


@njit
def _patches_numba(img, cy, cx, size):
    c, h, w = img.shape
    half = size // 2
    out = np.zeros((cy.shape[0], c, size, size))
    for k in range(cy.shape[0]):
        y0 = cy[k] - half
        x0 = cx[k] - half
        for i in range(size):
            yy = y0 + i
            if yy < 0 or yy >= h:
                continue
            for j in range(size):
                xx = x0 + j
                if xx < 0 or xx >= w:
                    continue
                for ch in range(c):
                    out[k, ch, i, j] = img[ch, yy, xx]
    return out


# the strided-view copy beats the compiled loop (see benchmarks/bench_kernels.py)
im2col = _im2col_numpy
col2im = pick(_col2im_numba, _col2im_numpy)
maxpool2 = pick(_maxpool2_numba, _maxpool2_numpy)
maxpool2_backward = pick(_maxpool2_backward_numba, _maxpool2_backward_numpy)
bilinear = pick(_bilinear_numba, _bilinear_numpy)
nms_sorted = pick(_nms_sorted_numba, _nms_sorted_numpy)
patches = pick(_patches_numba, _patches_numpy)

IMPLEMENTATIONS = {
    "im2col": (_im2col_numba, _im2col_numpy),
    "col2im": (_col2im_numba, _col2im_numpy),
    "maxpool2": (_maxpool2_numba, _maxpool2_numpy),
    "maxpool2_backward": (_maxpool2_backward_numba, _maxpool2_backward_numpy),
    "bilinear": (_bilinear_numba, _bilinear_numpy),
    "nms_sorted": (_nms_sorted_numba, _nms_sorted_numpy),
    "patches": (_patches_numba, _patches_numpy),
}
