"""Toy multi-scale single-shot detector.

A small strided conv trunk feeds 3x3 prediction branches on two feature maps.
Every cell of a detection map owns one anchor per aspect ratio and predicts
two class logits (background, smoke) and four box offsets per anchor. Optional
domain branches predict two domain logits per cell, shared by all anchors of
that cell.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import boxes as bx
from .numerics import Tensor, concat, conv2d, log_softmax, no_grad, smooth_l1

NEGATIVE, POSITIVE, IGNORED = 0, 1, -1


@dataclass(frozen=True)
class DetectorConfig:
    image_size: tuple = (64, 64)
    trunk_channels: tuple = (8, 16, 32)
    block_depth: int = 2
    detect_blocks: tuple = (2, 3)
    anchor_sizes: tuple = (16.0, 32.0)
    aspect_ratios: tuple = (1.0, 0.5, 2.0)  # width / height
    match_threshold: float = 0.5
    neg_pos_ratio: float = 3.0
    loc_weight: float = 1.0
    domain_blocks: tuple = (2, 3)
    subnet: bool = False
    nms_iou: float = 0.45

    def __post_init__(self):
        for name in ("image_size", "trunk_channels", "detect_blocks", "anchor_sizes",
                     "aspect_ratios", "domain_blocks"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n_blocks = len(self.trunk_channels)
        if not self.detect_blocks:
            raise ValueError("detect_blocks: at least one detection scale is required")
        if any(not 1 <= b <= n_blocks for b in self.detect_blocks):
            raise ValueError(f"detect_blocks: blocks must lie in 1..{n_blocks}")
        if list(self.detect_blocks) != sorted(set(self.detect_blocks)):
            raise ValueError("detect_blocks: must be strictly increasing")
        if len(self.anchor_sizes) != len(self.detect_blocks):
            raise ValueError("anchor_sizes: need one size per detection block")
        if not set(self.domain_blocks) <= set(self.detect_blocks):
            raise ValueError("domain_blocks: every adapted block must carry a detection branch")
        if self.neg_pos_ratio < 1:
            raise ValueError("neg_pos_ratio: must be >= 1")
        if not 0 < self.match_threshold < 1:
            raise ValueError("match_threshold: must lie in (0, 1)")
        if self.block_depth < 1:
            raise ValueError("block_depth: must be >= 1")

    def stride(self, block):
        return 2 ** (block + 1)

    @property
    def anchors_per_cell(self):
        return len(self.aspect_ratios)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------


@dataclass
class AnchorGrid:
    boxes: np.ndarray  # (A, 4)
    scale: np.ndarray  # (A,) index into detect_blocks
    cell: np.ndarray  # (A,) flat cell index within its scale
    shapes: tuple  # per scale (fh, fw)
    strides: tuple
    per_cell: int

    def __len__(self):
        return len(self.boxes)

    def scale_slice(self, s):
        start = sum(h * w for h, w in self.shapes[:s]) * self.per_cell
        h, w = self.shapes[s]
        return slice(start, start + h * w * self.per_cell)


def build_anchors(config, dims=None):
    h, w = dims if dims is not None else config.image_size
    boxes, scale, cell, shapes, strides = [], [], [], [], []
    for s, (block, size) in enumerate(zip(config.detect_blocks, config.anchor_sizes)):
        stride = config.stride(block)
        if h % stride or w % stride:
            raise ValueError(f"image {h}x{w} not divisible by stride {stride} of block {block}")
        fh, fw = h // stride, w // stride
        shapes.append((fh, fw))
        strides.append(stride)
        for i in range(fh):
            for j in range(fw):
                cx, cy = (j + 0.5) * stride, (i + 0.5) * stride
                for ratio in config.aspect_ratios:
                    aw, ah = size * np.sqrt(ratio), size / np.sqrt(ratio)
                    boxes.append((cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2))
                    scale.append(s)
                    cell.append(i * fw + j)
    return AnchorGrid(
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        scale=np.array(scale, dtype=np.int64),
        cell=np.array(cell, dtype=np.int64),
        shapes=tuple(shapes),
        strides=tuple(strides),
        per_cell=config.anchors_per_cell,
    )


# ---------------------------------------------------------------------------
# matching and sampling
# ---------------------------------------------------------------------------


@dataclass
class MatchAssignment:
    labels: np.ndarray  # (A,) int8: POSITIVE / NEGATIVE / IGNORED
    matched: np.ndarray  # (A,) gt index for positives, -1 elsewhere
    targets: np.ndarray  # (A, 4) encoded offsets, zero for non-positives

    @property
    def positives(self):
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self):
        return np.flatnonzero(self.labels == NEGATIVE)


def match_anchors(anchors, gt, threshold=0.5):
    """SSD matching: a forced best anchor per ground truth, plus every anchor whose
    best overlap exceeds ``threshold``.

    Ground truths claim forced anchors in list order; each takes its highest-IoU
    anchor not already claimed (lowest index on ties), so every ground truth ends
    up with at least one positive.
    """
    anchor_boxes = anchors.boxes if isinstance(anchors, AnchorGrid) else np.asarray(anchors, float)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    n = len(anchor_boxes)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    if len(gt) == 0:
        return MatchAssignment(labels, matched, targets)

    overlaps = bx.iou_matrix(anchor_boxes, gt)
    best_gt = np.argmax(overlaps, axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    above = best_iou > threshold
    labels[above] = POSITIVE
    matched[above] = best_gt[above]

    claimed = np.zeros(n, dtype=bool)
    for j in range(len(gt)):
        col = np.where(claimed, -np.inf, overlaps[:, j])
        a = int(np.argmax(col))
        claimed[a] = True
        labels[a] = POSITIVE
        matched[a] = j

    pos = labels == POSITIVE
    targets[pos] = bx.encode(anchor_boxes[pos], gt[matched[pos]])
    return MatchAssignment(labels, matched, targets)


def mining_quota(n_neg, n_pos, ratio):
    return min(int(n_neg), int(np.floor(ratio * max(1, int(n_pos)))))


def hard_negative_mining(neg_loss, assignment, ratio=3.0):
    """Indices of the highest-loss negatives, at most ``ratio * max(1, #positives)``.

    ``neg_loss`` holds a loss value per anchor; only negatives are eligible. Ties
    go to the lower anchor index.
    """
    labels = assignment.labels if isinstance(assignment, MatchAssignment) else np.asarray(assignment)
    neg = np.flatnonzero(labels == NEGATIVE)
    k = mining_quota(len(neg), np.count_nonzero(labels == POSITIVE), ratio)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((neg, -np.asarray(neg_loss)[neg]))
    return neg[order[:k]]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossTerms:
    """Decomposed loss. ``total == (conf + loc_weight*loc + domain_weight*domain) / norm``."""

    total: Tensor
    conf: float = 0.0
    loc: float = 0.0
    domain: float = 0.0
    loc_weight: float = 1.0
    domain_weight: float = 0.0
    norm: float = 1.0
    n_pos: int = 0
    n_neg: int = 0
    mined: list = field(default_factory=list)

    def recompose(self):
        return (self.conf + self.loc_weight * self.loc + self.domain_weight * self.domain) / self.norm


def _zero():
    return Tensor(0.0)


def multibox_loss(preds, assignments, alpha=1.0, neg_pos_ratio=3.0, mined=None):
    """``(L_conf + alpha * L_loc) / N`` over positives and mined negatives.

    ``preds`` carries ``cls_logits`` (B, A, 2) and ``loc`` (B, A, 4); a single
    image may be passed unbatched with one assignment. ``mined`` optionally fixes
    the per-image negative selection (as returned in ``LossTerms.mined``).
    """
    cls, loc = preds.cls_logits, preds.loc
    if cls.ndim == 2:
        cls = cls.reshape(1, *cls.shape)
        loc = loc.reshape(1, *loc.shape)
    if isinstance(assignments, MatchAssignment):
        assignments = [assignments]
    n_img, n_anchor = cls.shape[:2]
    if len(assignments) != n_img:
        raise ValueError(f"{len(assignments)} assignments for {n_img} images")

    logp = log_softmax(cls.reshape(n_img * n_anchor, 2), axis=1)
    pos_rows, neg_rows, targets, mined_out = [], [], [], []
    for b, asg in enumerate(assignments):
        pos = asg.positives
        if mined is None:
            neg = hard_negative_mining(-logp.data[b * n_anchor:(b + 1) * n_anchor, 0], asg, neg_pos_ratio)
        else:
            neg = np.asarray(mined[b], dtype=np.int64)
        mined_out.append(neg)
        pos_rows.append(pos + b * n_anchor)
        neg_rows.append(neg + b * n_anchor)
        targets.append(asg.targets[pos])
    pos_rows = np.concatenate(pos_rows)
    neg_rows = np.concatenate(neg_rows)
    n_pos, n_neg = len(pos_rows), len(neg_rows)
    if n_pos == 0:
        return LossTerms(_zero(), loc_weight=alpha, n_neg=n_neg, mined=mined_out)

    rows = np.concatenate([pos_rows, neg_rows])
    cols = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(n_neg, dtype=np.int64)])
    l_conf = -logp[rows, cols].sum()
    l_loc = smooth_l1(loc.reshape(n_img * n_anchor, 4)[pos_rows], np.concatenate(targets))
    total = (l_conf + alpha * l_loc) * (1.0 / n_pos)
    return LossTerms(
        total, conf=l_conf.item(), loc=l_loc.item(), loc_weight=alpha, norm=float(n_pos),
        n_pos=n_pos, n_neg=n_neg, mined=mined_out,
    )


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class PredictionSet:
    cls_logits: Tensor  # (B, A, 2)
    loc: Tensor  # (B, A, 4)
    domain_logits: dict = field(default_factory=dict)  # block -> (B, cells, 2)
    features: dict = field(default_factory=dict)  # block -> (B, C, h, w)
    sub_cls: Tensor = None
    sub_loc: Tensor = None
    sub_domain: Tensor = None


@dataclass
class Detection:
    box: np.ndarray
    score: float


PARAM_GROUPS = ("repre", "loc_conf", "domain", "subnet")
_PREFIX_GROUP = {"trunk": "repre", "head": "loc_conf", "domain": "domain", "subnet": "subnet"}


def param_group(name):
    return _PREFIX_GROUP[name.split(".", 1)[0]]


class Detector:
    def __init__(self, config=None, seed=0, rng=None):
        self.config = config or DetectorConfig()
        self.anchors = build_anchors(self.config)
        self.params = {}
        rng = rng if rng is not None else np.random.default_rng(seed)
        self._build(rng)

    # -- construction ---------------------------------------------------------

    def _conv(self, name, c_out, c_in, rng, std=None):
        fan_in = c_in * 9
        std = np.sqrt(2.0 / fan_in) if std is None else std
        self.params[name + ".w"] = Tensor(rng.normal(0.0, std, size=(c_out, c_in, 3, 3)), requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def trunk_layout(self):
        """List of (param name, c_in, c_out, stride) in execution order, with block ids."""
        cfg = self.config
        layout, c_in = [], 1
        for b, c_out in enumerate(cfg.trunk_channels, start=1):
            if b == 1:
                layout.append((b, "trunk.block1.stem", c_in, c_out, 2))
                c_in = c_out
            for k in range(cfg.block_depth):
                layout.append((b, f"trunk.block{b}.conv{k}", c_in, c_out, 2 if k == 0 else 1))
                c_in = c_out
        return layout

    def _build(self, rng):
        cfg = self.config
        for _, name, c_in, c_out, _ in self.trunk_layout():
            self._conv(name, c_out, c_in, rng)
        k = cfg.anchors_per_cell
        for block in cfg.detect_blocks:
            c = cfg.trunk_channels[block - 1]
            self._conv(f"head.b{block}.cls", 2 * k, c, rng, std=0.01)
            self._conv(f"head.b{block}.loc", 4 * k, c, rng, std=0.01)
        for block in cfg.domain_blocks:
            self._conv(f"domain.b{block}", 2, cfg.trunk_channels[block - 1], rng, std=0.01)
        if cfg.subnet:
            c = cfg.trunk_channels[cfg.detect_blocks[-1] - 1]
            self._conv("subnet.cls", 2 * k, c, rng, std=0.01)
            self._conv("subnet.loc", 4 * k, c, rng, std=0.01)
            self._conv("subnet.domain", 2, c, rng, std=0.01)

    # -- parameter bookkeeping --------------------------------------------------

    def names(self, group=None, prefix=None):
        out = []
        for name in self.params:
            if group is not None and param_group(name) != group:
                continue
            if prefix is not None and not name.startswith(prefix):
                continue
            out.append(name)
        return out

    def partition(self):
        parts = {g: [] for g in PARAM_GROUPS}
        for name in self.params:
            parts[param_group(name)].append(name)
        return {g: v for g, v in parts.items() if v}

    def copy(self):
        clone = Detector.__new__(Detector)
        clone.config = self.config
        clone.anchors = self.anchors
        clone.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return clone

    def state(self):
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- forward ----------------------------------------------------------------

    def _apply(self, name, x, stride=1):
        w, b = self.params[name + ".w"], self.params[name + ".b"]
        return conv2d(x, w, stride=stride, padding=1) + b.reshape(1, -1, 1, 1)

    @staticmethod
    def _per_anchor(t, n_img, width):
        return t.transpose(0, 2, 3, 1).reshape(n_img, -1, width)

    def forward(self, images, detach_domain=False):
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.shape[1:] != tuple(cfg.image_size):
            raise ValueError(f"image dims {images.shape[1:]} do not match config {cfg.image_size}")
        n_img = images.shape[0]
        x = Tensor(images[:, None])
        features = {}
        for block, name, _, _, stride in self.trunk_layout():
            x = self._apply(name, x, stride).relu()
            features[block] = x
        cls_parts, loc_parts, domain = [], [], {}
        for block in cfg.detect_blocks:
            f = features[block]
            cls_parts.append(self._per_anchor(self._apply(f"head.b{block}.cls", f), n_img, 2))
            loc_parts.append(self._per_anchor(self._apply(f"head.b{block}.loc", f), n_img, 4))
        for block in cfg.domain_blocks:
            f = features[block]
            if detach_domain:
                f = f.detach()
            domain[block] = self._per_anchor(self._apply(f"domain.b{block}", f), n_img, 2)
        preds = PredictionSet(
            cls_logits=concat(cls_parts, axis=1) if len(cls_parts) > 1 else cls_parts[0],
            loc=concat(loc_parts, axis=1) if len(loc_parts) > 1 else loc_parts[0],
            domain_logits=domain,
            features={b: features[b] for b in cfg.detect_blocks},
        )
        if cfg.subnet:
            f = features[cfg.detect_blocks[-1]]
            preds.sub_cls = self._per_anchor(self._apply("subnet.cls", f), n_img, 2)
            preds.sub_loc = self._per_anchor(self._apply("subnet.loc", f), n_img, 4)
            fd = f.detach() if detach_domain else f
            preds.sub_domain = self._per_anchor(self._apply("subnet.domain", fd), n_img, 2)
        return preds

    __call__ = forward

    # -- inference ------------------------------------------------------------------

    def candidates(self, images):
        """Per image: decoded, clipped (boxes, scores) for every anchor, sorted by
        descending score (ties by anchor index)."""
        cfg = self.config
        with no_grad():
            preds = self.forward(images)
        logits = preds.cls_logits.data
        z = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
        h, w = cfg.image_size
        out = []
        for b in range(logits.shape[0]):
            scores = probs[b, :, 1]
            order = bx.score_order(scores)
            decoded = bx.clip_boxes(bx.decode(self.anchors.boxes, preds.loc.data[b]), w, h)
            out.append((decoded[order], scores[order]))
        return out

    def infer(self, image, conf_threshold=0.5, nms_iou=None):
        nms_iou = self.config.nms_iou if nms_iou is None else nms_iou
        (boxes, scores), = self.candidates(np.asarray(image)[None] if np.ndim(image) == 2 else image)
        live = scores > conf_threshold
        boxes, scores = boxes[live], scores[live]
        keep = bx.nms(boxes, scores, nms_iou)
        return [Detection(boxes[i].copy(), float(scores[i])) for i in keep]


def forward(model, image):
    return model.forward(image)


def infer(model, image, conf_threshold=0.5, nms_iou=None):
    return model.infer(image, conf_threshold, nms_iou)
