"""Axis-aligned box utilities: overlap, offset coding and greedy suppression.

Boxes are ``(x_min, y_min, x_max, y_max)`` in pixel units.
"""
import numpy as np

from . import kernels

# exp() argument cap when decoding predicted sizes
_LOG_SIZE_CLIP = np.log(1000.0)


def iou(a, b):
    """Intersection over union of two boxes; 0 when either has zero area."""
    return float(kernels.iou_matrix(np.asarray(a, float).reshape(1, 4), np.asarray(b, float).reshape(1, 4))[0, 0])


def iou_matrix(a, b):
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    return kernels.iou_matrix(a, b)


def _center_size(boxes):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode(anchors, gt):
    """Center/log-size offsets of ``gt`` relative to ``anchors`` (broadcasts over leading dims)."""
    anchors = np.asarray(anchors, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    acx, acy, aw, ah = _center_size(anchors)
    gcx, gcy, gw, gh = _center_size(gt)
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode(anchors, offsets):
    anchors = np.asarray(anchors, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    acx, acy, aw, ah = _center_size(anchors)
    cx = acx + offsets[..., 0] * aw
    cy = acy + offsets[..., 1] * ah
    w = aw * np.exp(np.clip(offsets[..., 2], -_LOG_SIZE_CLIP, _LOG_SIZE_CLIP))
    h = ah * np.exp(np.clip(offsets[..., 3], -_LOG_SIZE_CLIP, _LOG_SIZE_CLIP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


encode_box = encode
decode_box = decode


def clip_boxes(boxes, width, height):
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[..., 0::2] = np.clip(out[..., 0::2], 0.0, width)
    out[..., 1::2] = np.clip(out[..., 1::2], 0.0, height)
    return out


def score_order(scores):
    """Indices sorting by descending score, ties broken by ascending index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


def nms(boxes, scores, iou_threshold):
    """Greedy non-maximum suppression. Returns kept indices in descending-score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = score_order(scores)
    keep = kernels.nms_sorted(np.ascontiguousarray(boxes[order]), float(iou_threshold))
    return order[keep]
