"""Hot numeric kernels.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version. The public names at the bottom of the module bind to
one or the other according to ``dadet._accel.USE_NUMBA``. Both versions are
importable directly so tests and the benchmark can compare them.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# conv2d (input already zero-padded; NCHW input, OIHW kernel)
# ---------------------------------------------------------------------------


@njit
def _im2col(xp, kh, kw, stride, out_h, out_w):
    n_batch, n_in, _, _ = xp.shape
    cols = np.empty((n_batch * out_h * out_w, n_in * kh * kw))
    r = 0
    for n in range(n_batch):
        for i in range(out_h):
            for j in range(out_w):
                k = 0
                for c in range(n_in):
                    for a in range(kh):
                        row = i * stride + a
                        for b in range(kw):
                            cols[r, k] = xp[n, c, row, j * stride + b]
                            k += 1
                r += 1
    return cols


@njit
def conv2d_forward_loops(xp, w, stride, out_h, out_w):
    n_batch = xp.shape[0]
    n_out, n_in, kh, kw = w.shape
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    flat = np.dot(cols, np.ascontiguousarray(w.reshape(n_out, n_in * kh * kw).T))
    out = np.empty((n_batch, n_out, out_h, out_w))
    r = 0
    for n in range(n_batch):
        for i in range(out_h):
            for j in range(out_w):
                for o in range(n_out):
                    out[n, o, i, j] = flat[r, o]
                r += 1
    return out


@njit
def conv2d_backward_loops(xp, w, grad_out, stride):
    """Return (grad wrt padded input, grad wrt kernel)."""
    n_batch = xp.shape[0]
    n_out, n_in, kh, kw = w.shape
    out_h = grad_out.shape[2]
    out_w = grad_out.shape[3]
    g2d = np.empty((n_batch * out_h * out_w, n_out))
    r = 0
    for n in range(n_batch):
        for i in range(out_h):
            for j in range(out_w):
                for o in range(n_out):
                    g2d[r, o] = grad_out[n, o, i, j]
                r += 1
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    w2d = np.ascontiguousarray(w.reshape(n_out, n_in * kh * kw))
    gw = np.dot(np.ascontiguousarray(g2d.T), cols).reshape(w.shape)
    dcols = np.dot(g2d, w2d)
    gx = np.zeros(xp.shape)
    r = 0
    for n in range(n_batch):
        for i in range(out_h):
            for j in range(out_w):
                k = 0
                for c in range(n_in):
                    for a in range(kh):
                        row = i * stride + a
                        for b in range(kw):
                            gx[n, c, row, j * stride + b] += dcols[r, k]
                            k += 1
                r += 1
    return gx, gw


def _windows(xp, kh, kw, stride):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward_numpy(xp, w, stride, out_h, out_w):
    kh, kw = w.shape[2:]
    win = _windows(xp, kh, kw, stride)[:, :, :out_h, :out_w]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_numpy(xp, w, grad_out, stride):
    kh, kw = w.shape[2:]
    out_h, out_w = grad_out.shape[2:]
    win = _windows(xp, kh, kw, stride)[:, :, :out_h, :out_w]
    gw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    cols = np.tensordot(grad_out, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    gx = np.zeros(xp.shape)
    for a in range(kh):
        for b in range(kw):
            gx[:, :, a:a + stride * out_h:stride, b:b + stride * out_w:stride] += (
                cols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            )
    return gx, gw


# ---------------------------------------------------------------------------
# boxes: (x_min, y_min, x_max, y_max)
# ---------------------------------------------------------------------------


@njit
def iou_matrix_loops(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        if area_a <= 0.0:
            continue
        for j in range(m):
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            if area_b <= 0.0:
                continue
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            out[i, j] = inter / (area_a + area_b - inter)
    return out


def iou_matrix_numpy(a, b):
    a = a[:, None, :]
    b = b[None, :, :]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    valid = (area_a > 0) & (area_b > 0) & (inter > 0)
    out = np.zeros(inter.shape)
    np.divide(inter, union, out=out, where=valid)
    return out


@njit
def nms_sorted_loops(boxes, iou_threshold):
    """Greedy suppression over boxes already sorted by descending score."""
    n = boxes.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    for i in range(n):
        if not keep[i]:
            continue
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for j in range(i + 1, n):
            if not keep[j]:
                continue
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0.0 or ih <= 0.0 or area_i <= 0.0 or area_j <= 0.0:
                continue
            inter = iw * ih
            if inter / (area_i + area_j - inter) > iou_threshold:
                keep[j] = False
    return keep


def nms_sorted_numpy(boxes, iou_threshold):
    n = boxes.shape[0]
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        if not keep[i]:
            continue
        rest = np.arange(i + 1, n)
        rest = rest[keep[rest]]
        if rest.size == 0:
            break
        ious = iou_matrix_numpy(boxes[i:i + 1], boxes[rest])[0]
        keep[rest[ious > iou_threshold]] = False
    return keep


# ---------------------------------------------------------------------------
# pixel rasterisation: a pixel belongs to a box iff its centre lies inside
# (inclusive on both edges)
# ---------------------------------------------------------------------------


def pixel_span(lo, hi, size):
    """Inclusive integer range [first, last] of pixel indices with centres in [lo, hi]."""
    first = int(np.ceil(lo - 0.5))
    last = int(np.floor(hi - 0.5))
    return max(first, 0), min(last, size - 1)


@njit
def box_pixel_counts_loops(boxes, mask):
    """Per box: (pixel area, mask pixels inside)."""
    h, w = mask.shape
    out = np.zeros((boxes.shape[0], 2), dtype=np.int64)
    for k in range(boxes.shape[0]):
        x0 = max(int(np.ceil(boxes[k, 0] - 0.5)), 0)
        x1 = min(int(np.floor(boxes[k, 2] - 0.5)), w - 1)
        y0 = max(int(np.ceil(boxes[k, 1] - 0.5)), 0)
        y1 = min(int(np.floor(boxes[k, 3] - 0.5)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        hits = 0
        for i in range(y0, y1 + 1):
            for j in range(x0, x1 + 1):
                if mask[i, j]:
                    hits += 1
        out[k, 0] = (x1 - x0 + 1) * (y1 - y0 + 1)
        out[k, 1] = hits
    return out


def box_pixel_counts_numpy(boxes, mask):
    h, w = mask.shape
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
    out = np.zeros((boxes.shape[0], 2), dtype=np.int64)
    for k, (bx0, by0, bx1, by1) in enumerate(boxes):
        x0, x1 = pixel_span(bx0, bx1, w)
        y0, y1 = pixel_span(by0, by1, h)
        if x1 < x0 or y1 < y0:
            continue
        out[k, 0] = (x1 - x0 + 1) * (y1 - y0 + 1)
        out[k, 1] = sat[y1 + 1, x1 + 1] - sat[y0, x1 + 1] - sat[y1 + 1, x0] + sat[y0, x0]
    return out


if USE_NUMBA:
    conv2d_forward = conv2d_forward_loops
    conv2d_backward = conv2d_backward_loops
    iou_matrix = iou_matrix_loops
    nms_sorted = nms_sorted_loops
    box_pixel_counts = box_pixel_counts_loops
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward = conv2d_backward_numpy
    iou_matrix = iou_matrix_numpy
    nms_sorted = nms_sorted_numpy
    box_pixel_counts = box_pixel_counts_numpy
