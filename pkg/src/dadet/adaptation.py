"""Domain adaptation on detection-layer proposals.

A proposal is the feature vector at the grid cell of a matched anchor on the
anchor's own detection map. Proposals from source and target images are
grouped per detection block into a ``ProposalBatch``, which feeds both the
adversarial losses (through the domain branches) and the discrepancy losses.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .detector import NEGATIVE, POSITIVE, hard_negative_mining
from .numerics import Tensor, log_softmax, matmul

log = logging.getLogger(__name__)

KEEP_NEGATIVES = "keep_negatives"
ABANDON_NEGATIVES = "abandon_negatives"
DISCREPANCY_KINDS = ("mmd", "weighted_mmd", "euclidean", "coral")


class AdaptationError(ValueError):
    pass


@dataclass
class ProposalBatch:
    source: Tensor  # (N_S, d)
    target: Tensor  # (N_T, d)
    source_labels: np.ndarray  # 1 positive, 0 negative
    target_labels: np.ndarray
    source_conf: np.ndarray = None  # smoke probability, used for pairing
    target_conf: np.ndarray = None
    source_ids: np.ndarray = None  # global anchor id (image * A + anchor), tie-breaker
    target_ids: np.ndarray = None
    source_cells: np.ndarray = None  # flat (image * cells + cell) rows into the domain logits
    target_cells: np.ndarray = None
    block: int = None

    def __post_init__(self):
        if self.source.ndim != 2 or self.target.ndim != 2:
            raise AdaptationError("proposal features must be 2-d (rows, d)")
        if self.source.shape[1] != self.target.shape[1]:
            raise AdaptationError(
                f"feature width differs across domains: {self.source.shape[1]} vs {self.target.shape[1]}"
            )
        for side in ("source", "target"):
            n = getattr(self, side).shape[0]
            labels = getattr(self, side + "_labels")
            if labels is None:
                labels = np.ones(n, dtype=np.int64)
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (n,):
                raise AdaptationError(f"{side}_labels has {labels.shape[0]} entries for {n} rows")
            setattr(self, side + "_labels", labels)
            for attr, default in (("_conf", np.zeros(n)), ("_ids", np.arange(n))):
                if getattr(self, side + attr) is None:
                    setattr(self, side + attr, default)

    @classmethod
    def from_arrays(cls, xs, xt, ys=None, yt=None, cs=None, ct=None, ids_s=None, ids_t=None):
        return cls(
            Tensor(xs) if not isinstance(xs, Tensor) else xs,
            Tensor(xt) if not isinstance(xt, Tensor) else xt,
            ys, yt, cs, ct, ids_s, ids_t,
        )

    @property
    def dim(self):
        return self.source.shape[1]

    def counts(self):
        """(N_p source, N_n source, N_p target, N_n target)."""
        return (
            int(np.count_nonzero(self.source_labels == 1)),
            int(np.count_nonzero(self.source_labels == 0)),
            int(np.count_nonzero(self.target_labels == 1)),
            int(np.count_nonzero(self.target_labels == 0)),
        )


def _softmax_smoke(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., 1] / e.sum(axis=-1)


def collect_proposals(model, preds, assignments, domains, mode=KEEP_NEGATIVES,
                      neg_pos_ratio=3.0, mined=None, blocks=None):
    """Gather proposal features per detection block.

    Positive anchors always contribute a row. With ``keep_negatives`` the mined
    negatives contribute too (``mined`` per image, or re-mined here from the
    class logits with the same 3:1 quota the multibox loss uses).
    Returns ``{block: ProposalBatch}``.
    """
    if mode not in (KEEP_NEGATIVES, ABANDON_NEGATIVES):
        raise AdaptationError(f"unknown negatives mode {mode!r}")
    cfg = model.config
    anchors = model.anchors
    blocks = tuple(cfg.domain_blocks or cfg.detect_blocks) if blocks is None else tuple(blocks)
    domains = np.asarray(domains)
    n_img, n_anchor = preds.cls_logits.shape[:2]
    logits = preds.cls_logits.data
    smoke = _softmax_smoke(logits)

    per_image = []
    for b, asg in enumerate(assignments):
        pos = asg.positives
        if mode == KEEP_NEGATIVES:
            if mined is not None:
                neg = np.asarray(mined[b], dtype=np.int64)
            else:
                z = logits[b] - logits[b].max(axis=-1, keepdims=True)
                bg_loss = np.log(np.exp(z).sum(axis=-1)) - z[:, 0]
                neg = hard_negative_mining(bg_loss, asg, neg_pos_ratio)
        else:
            neg = np.zeros(0, dtype=np.int64)
        idx = np.concatenate([pos, neg])
        lab = np.concatenate([np.ones(len(pos), dtype=np.int64), np.zeros(len(neg), dtype=np.int64)])
        per_image.append((idx, lab))

    out = {}
    for block in blocks:
        s = cfg.detect_blocks.index(block)
        fh, fw = anchors.shapes[s]
        cells = fh * fw
        feat = preds.features[block]
        flat = feat.transpose(0, 2, 3, 1).reshape(n_img * cells, feat.shape[1])
        rows = {0: [], 1: []}
        for b, (idx, lab) in enumerate(per_image):
            keep = anchors.scale[idx] == s
            d = int(domains[b])
            for a, y in zip(idx[keep], lab[keep]):
                rows[d].append((b * cells + anchors.cell[a], y, smoke[b, a], b * n_anchor + a))
        parts = []
        for d in (0, 1):
            r = rows[d]
            cell_rows = np.array([t[0] for t in r], dtype=np.int64)
            parts.append((
                flat[cell_rows] if len(r) else Tensor(np.zeros((0, feat.shape[1]))),
                np.array([t[1] for t in r], dtype=np.int64),
                np.array([t[2] for t in r], dtype=np.float64),
                np.array([t[3] for t in r], dtype=np.int64),
                cell_rows,
            ))
        (xs, ys, cs, ids_s, cells_s), (xt, yt, ct, ids_t, cells_t) = parts
        out[block] = ProposalBatch(xs, xt, ys, yt, cs, ct, ids_s, ids_t, cells_s, cells_t, block)
    return out


def proposal_domain_logits(preds, batch, sub=False):
    """Domain logits at the batch's proposal cells, with domain labels (0 source, 1 target)."""
    logits = preds.sub_domain if sub else preds.domain_logits.get(batch.block)
    if logits is None:
        raise AdaptationError(f"no domain branch attached at block {batch.block}")
    flat = logits.reshape(-1, 2)
    rows = np.concatenate([batch.source_cells, batch.target_cells])
    labels = np.concatenate([np.zeros(len(batch.source_cells), dtype=np.int64),
                             np.ones(len(batch.target_cells), dtype=np.int64)])
    return flat[rows], labels


# ---------------------------------------------------------------------------
# adversarial losses
# ---------------------------------------------------------------------------


def domain_classifier_loss(logits, labels):
    """Sum over rows of -log softmax(logits)[true domain]."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return Tensor(0.0)
    logp = log_softmax(logits, axis=1)
    return -logp[np.arange(len(labels)), labels].sum()


def domain_confusion_loss(logits, reference=0):
    """Sum over rows of -(0.5 log p + 0.5 log(1 - p)), p the reference-domain probability."""
    if logits.shape[0] == 0:
        return Tensor(0.0)
    logp = log_softmax(logits, axis=1)
    return -(logp[:, reference] * 0.5 + logp[:, 1 - reference] * 0.5).sum()


# ---------------------------------------------------------------------------
# discrepancy losses (feature map Phi = identity)
# ---------------------------------------------------------------------------


def identity(x):
    return x


def _require_rows(batch, n, what):
    if batch.source.shape[0] < n or batch.target.shape[0] < n:
        raise AdaptationError(
            f"{what} needs >= {n} rows per domain, got {batch.source.shape[0]} / {batch.target.shape[0]}"
        )


def _sq_norm(v):
    return (v * v).sum()


def mmd_loss(batch, phi=identity):
    _require_rows(batch, 1, "mmd")
    diff = phi(batch.source).mean(axis=0) - phi(batch.target).mean(axis=0)
    return _sq_norm(diff)


def _class_means(x, labels):
    return x[np.flatnonzero(labels == POSITIVE)].mean(axis=0), x[np.flatnonzero(labels == NEGATIVE)].mean(axis=0)


def weighted_mmd_loss(batch, phi=identity, per_class=False):
    """Class-reweighted MMD: per domain, sum the positive-row mean and the
    negative-row mean, then take the squared distance between domains.

    ``per_class=True`` instead sums the per-class squared mean differences.
    Falls back to plain MMD when a domain lacks one of the classes.
    """
    _require_rows(batch, 1, "weighted_mmd")
    np_s, nn_s, np_t, nn_t = batch.counts()
    if min(np_s, nn_s, np_t, nn_t) == 0:
        log.warning("weighted_mmd: class missing in a domain (counts %s); using plain mmd",
                    (np_s, nn_s, np_t, nn_t))
        return mmd_loss(batch, phi)
    ps, ns = _class_means(phi(batch.source), batch.source_labels)
    pt, nt = _class_means(phi(batch.target), batch.target_labels)
    if per_class:
        return _sq_norm(ps - pt) + _sq_norm(ns - nt)
    return _sq_norm((ps + ns) - (pt + nt))


def pair_proposals(batch):
    """Rank each domain's positive rows by confidence (desc, ties by anchor id) and
    keep the top ``N = min(N_S, N_T)`` of each; row i pairs with row i."""
    order = []
    for side in ("source", "target"):
        labels = getattr(batch, side + "_labels")
        conf = getattr(batch, side + "_conf")
        ids = getattr(batch, side + "_ids")
        rows = np.flatnonzero(labels == POSITIVE)
        rows = rows[np.lexsort((ids[rows], -conf[rows]))]
        order.append(rows)
    n = min(len(order[0]), len(order[1]))
    if n == 0:
        raise AdaptationError("pairing needs at least one positive proposal per domain")
    return batch.source[order[0][:n]], batch.target[order[1][:n]]


def euclidean_loss(xs, xt):
    if xs.shape != xt.shape:
        raise AdaptationError(f"paired matrices differ in shape: {xs.shape} vs {xt.shape}")
    n = xs.shape[0]
    if n == 0:
        raise AdaptationError("euclidean loss needs N >= 1 pairs")
    return _sq_norm(xs - xt) * (1.0 / (2.0 * n))


def covariance(x):
    n = x.shape[0]
    centred = x - x.mean(axis=0, keepdims=True)
    return matmul(centred.T, centred) * (1.0 / (n - 1))


def coral_loss(batch):
    _require_rows(batch, 2, "coral")
    d = batch.dim
    diff = covariance(batch.source) - covariance(batch.target)
    return _sq_norm(diff) * (1.0 / (4.0 * d * d))


def discrepancy(kind, batch, per_class=False):
    if kind == "mmd":
        return mmd_loss(batch)
    if kind == "weighted_mmd":
        return weighted_mmd_loss(batch, per_class=per_class)
    if kind == "euclidean":
        return euclidean_loss(*pair_proposals(batch))
    if kind == "coral":
        return coral_loss(batch)
    raise AdaptationError(f"unknown discrepancy kind {kind!r}; expected one of {DISCREPANCY_KINDS}")
