"""Randomised gradient checks over every trainable loss.

Each registry entry builds one random instance: a zero-argument loss closure
and the tensors it differentiates. Hard-negative selections are drawn once per
instance and held fixed, so every closure is smooth in its inputs.
"""
from dataclasses import dataclass

import numpy as np

from . import adaptation as ad
from . import training as tr
from .detector import IGNORED, NEGATIVE, POSITIVE, MatchAssignment, PredictionSet, multibox_loss
from .numerics import Tensor, grad_check

TOLERANCE = 1e-4


def _assignment(rng, n_anchor, min_pos=1):
    labels = rng.choice([POSITIVE, NEGATIVE, NEGATIVE, NEGATIVE, IGNORED], size=n_anchor).astype(np.int8)
    labels[:min_pos] = POSITIVE
    pos = labels == POSITIVE
    targets = np.where(pos[:, None], rng.normal(0, 0.7, (n_anchor, 4)), 0.0)
    matched = np.where(pos, 0, -1)
    return MatchAssignment(labels, matched, targets)


def _mined(rng, asg, ratio=3.0):
    neg = asg.negatives
    k = min(len(neg), int(ratio * max(1, len(asg.positives))))
    return np.sort(rng.choice(neg, size=k, replace=False)) if k else np.zeros(0, np.int64)


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape))


def _multibox(rng):
    n_img, n_anchor = 2, int(rng.integers(4, 9))
    cls, loc = _t(rng, n_img, n_anchor, 2, scale=2.0), _t(rng, n_img, n_anchor, 4)
    asg = [_assignment(rng, n_anchor) for _ in range(n_img)]
    mined = [_mined(rng, a) for a in asg]
    alpha = float(rng.uniform(0.5, 2.0))

    def f():
        return multibox_loss(PredictionSet(cls, loc, {}, {}), asg, alpha, mined=mined).total

    return f, [cls, loc]


def _domain_classifier(rng):
    logits = _t(rng, int(rng.integers(1, 8)), 2, scale=2.0)
    labels = rng.integers(0, 2, logits.shape[0])
    return (lambda: ad.domain_classifier_loss(logits, labels)), [logits]


def _domain_confusion(rng):
    logits = _t(rng, int(rng.integers(1, 8)), 2, scale=2.0)
    return (lambda: ad.domain_confusion_loss(logits)), [logits]


def _batch(rng, ns=None, nt=None, d=None, labelled=False):
    ns = ns or int(rng.integers(3, 7))
    nt = nt or int(rng.integers(3, 7))
    d = d or int(rng.integers(1, 4))
    xs, xt = _t(rng, ns, d), _t(rng, nt, d)
    ys = yt = None
    if labelled:
        ys = np.r_[1, 0, rng.integers(0, 2, ns - 2)]
        yt = np.r_[1, 0, rng.integers(0, 2, nt - 2)]
    return ad.ProposalBatch(xs, xt, ys, yt, rng.random(ns), rng.random(nt)), [xs, xt]


def _mmd(rng):
    b, params = _batch(rng)
    return (lambda: ad.mmd_loss(b)), params


def _weighted_mmd(rng):
    b, params = _batch(rng, labelled=True)
    per_class = bool(rng.integers(0, 2))
    return (lambda: ad.weighted_mmd_loss(b, per_class=per_class)), params


def _euclidean(rng):
    n, d = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    xs, xt = _t(rng, n, d), _t(rng, n, d)
    return (lambda: ad.euclidean_loss(xs, xt)), [xs, xt]


def _coral(rng):
    b, params = _batch(rng)
    return (lambda: ad.coral_loss(b)), params


def _reweighted(rng):
    n = int(rng.integers(1, 10))
    logits = _t(rng, n, 2, scale=2.0)
    labels = rng.integers(0, 2, n)
    return (lambda: tr.reweighted_cls_loss(logits, labels)), [logits]


def _branch_instance(rng, max_anchor=8, n_img=2):
    n_anchor = int(rng.integers(2, max_anchor + 1))
    cls, loc = _t(rng, n_img, n_anchor, 2, scale=2.0), _t(rng, n_img, n_anchor, 4)
    dom = _t(rng, n_img * n_anchor, 2, scale=2.0)
    asg = [_assignment(rng, n_anchor) for _ in range(n_img)]
    mined = [_mined(rng, a) for a in asg]
    rows = np.concatenate([a.positives + b * n_anchor for b, a in enumerate(asg)])
    labels = rng.integers(0, 2, len(rows))
    confuse = bool(rng.integers(0, 2))
    lam, eta = float(rng.uniform(0, 2)), float(rng.uniform(0, 1))

    def domain_term():
        lg = dom[rows]
        loss = ad.domain_confusion_loss(lg) if confuse else ad.domain_classifier_loss(lg, labels)
        return loss * (1.0 / len(rows))

    def terms():
        return tr.mscnn_branch_loss(cls, loc, asg, lam, eta, domain_term, mined=mined)

    return terms, [cls, loc, dom]


def _mscnn_branch(rng):
    terms, params = _branch_instance(rng, 6)
    return (lambda: terms().total), params


def _mscnn_total(rng):
    # three branches per instance, so keep each one small
    t1, p1 = _branch_instance(rng, 4, 1)
    t2, p2 = _branch_instance(rng, 4, 1)
    sub, p3 = _branch_instance(rng, 3, 1)
    sub_dom = _t(rng, 3, 2)
    alphas = rng.uniform(0, 2, 2)
    w_sub, w_dom = rng.uniform(0, 2, 2)

    def f():
        return tr.mscnn_total_loss([t1(), t2()], alphas, sub(), w_sub, ad.domain_confusion_loss(sub_dom), w_dom)[0]

    return f, p1 + p2 + p3 + [sub_dom]


REGISTRY = {
    "multibox": _multibox,
    "domain_classifier": _domain_classifier,
    "domain_confusion": _domain_confusion,
    "mmd": _mmd,
    "weighted_mmd": _weighted_mmd,
    "euclidean": _euclidean,
    "coral": _coral,
    "reweighted_cls": _reweighted,
    "mscnn_branch": _mscnn_branch,
    "mscnn_total": _mscnn_total,
}


@dataclass
class LossCheck:
    name: str
    instances: int
    max_rel_error: float
    nonfinite: int

    @property
    def ok(self):
        return bool(self.nonfinite == 0 and self.max_rel_error < TOLERANCE)


def check_loss(name, builder, instances=100, seed=0):
    rng = np.random.default_rng([seed, sum(name.encode())])
    worst, bad = 0.0, 0
    for _ in range(instances):
        f, params = builder(rng)
        report = grad_check(f, params)
        worst = max(worst, report.max_rel_error)
        bad += len(report.nonfinite)
    return LossCheck(name, instances, worst, bad)


def run_suite(instances=100, seed=0, registry=None):
    registry = REGISTRY if registry is None else registry
    return [check_loss(name, b, instances, seed) for name, b in registry.items()]
