"""Optimisation and training schedules.

Three procedures build on a mixed-domain pretrained detector:

* ``adversarial_schedule``: domain classifier / domain mixer alternation on
  detection-layer proposals, then detection retraining of the heads.
* ``mscnn_three_stage``: per-branch sampling with reweighted classification,
  gated localisation and domain terms, stages 1/2 iterated, then a sub-network
  head trained on the fixed trunk.
* ``discrepancy_joint_train``: multibox loss plus a weighted discrepancy loss
  over all parameters.

Freezing is enforced twice: frozen tensors stop requiring grad for the phase,
and ``sgd_step`` skips them, so their bytes never change.
"""
import csv
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import adaptation as ad
from .datagen import Domain
from .detector import NEGATIVE, POSITIVE, MatchAssignment, hard_negative_mining, match_anchors, multibox_loss
from .detector import LossTerms, PredictionSet
from .numerics import Tensor, log_softmax, no_grad, smooth_l1

log = logging.getLogger(__name__)

LOG_FIELDS = (
    "step", "phase", "L_conf", "L_loc", "L_domain",
    "N_pos_source", "N_neg_source", "N_pos_target", "N_neg_target",
    "feat_norm_source", "feat_norm_target",
)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    buffers: dict = field(default_factory=dict)
    clip_norm: float = None  # rescale the joint gradient to at most this L2 norm


def sgd_step(params, grads, state, frozen=()):
    """Momentum SGD: ``v <- mu*v + g; p <- p - lr*v`` for every non-frozen name."""
    frozen = set(frozen)
    scale = 1.0
    if state.clip_norm is not None:
        live = [g for k, g in grads.items() if k not in frozen and g is not None and k in params]
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in live)))
        if norm > state.clip_norm:
            scale = state.clip_norm / norm
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads.get(name)
        if g is None:
            continue
        v = state.buffers.get(name)
        if v is None:
            v = state.buffers[name] = np.zeros_like(p.data)
        if v.shape != p.data.shape:
            raise ValueError(f"momentum buffer for {name} has shape {v.shape}, param {p.data.shape}")
        v *= state.momentum
        v += g if scale == 1.0 else g * scale
        p.data -= state.lr * v


def _grads(model):
    return {k: p.grad for k, p in model.params.items() if p.requires_grad}


@contextmanager
def frozen(model, names):
    """Stop the named tensors from requiring grad for the duration of the block."""
    names = set(names)
    saved = {k: p.requires_grad for k, p in model.params.items()}
    for k in names:
        model.params[k].requires_grad_(False)
    try:
        yield names
    finally:
        for k, flag in saved.items():
            model.params[k].requires_grad_(flag)


def snapshot(model, names=None):
    names = model.params.keys() if names is None else names
    return {k: model.params[k].data.tobytes() for k in names}


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray
    assignments: list
    domains: np.ndarray
    scenes: list


class TrainData:
    """Scenes of both domains with cached anchor assignments."""

    def __init__(self, model, source=(), target=()):
        self.source = list(source)
        self.target = list(target)
        thr = model.config.match_threshold
        self._cache = {}
        for s in self.source + self.target:
            self._cache[id(s)] = match_anchors(model.anchors, s.boxes, thr)

    def assignment(self, scene):
        return self._cache[id(scene)]

    def __len__(self):
        return len(self.source) + len(self.target)

    def batch_from(self, scenes):
        return Batch(
            images=np.stack([s.image for s in scenes]),
            assignments=[self._cache[id(s)] for s in scenes],
            domains=np.array([int(s.domain) for s in scenes], dtype=np.int64),
            scenes=list(scenes),
        )

    def sample(self, rng, n_source, n_target):
        picked = []
        for pool, k in ((self.source, n_source), (self.target, n_target)):
            if k == 0 or not pool:
                continue
            idx = rng.choice(len(pool), size=k, replace=len(pool) < k)
            picked.extend(pool[i] for i in idx)
        return self.batch_from(picked)


def batch_split(data, batch_size):
    """Source/target scenes per batch: half and half, or all from the one present domain."""
    if data.source and data.target:
        return batch_size // 2, batch_size - batch_size // 2
    if data.source:
        return batch_size, 0
    return 0, batch_size


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------


class TrainLog:
    def __init__(self, path=None):
        self.rows = []
        self.path = path
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(LOG_FIELDS)

    def record(self, **row):
        row = {k: row.get(k, 0) for k in LOG_FIELDS}
        row["step"] = len(self.rows)
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow([_fmt(row[k]) for k in LOG_FIELDS])

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _domain_counts(batch, mined):
    out = {}
    for d, tag in ((0, "source"), (1, "target")):
        sel = np.flatnonzero(batch.domains == d)
        out[f"N_pos_{tag}"] = int(sum(len(batch.assignments[i].positives) for i in sel))
        out[f"N_neg_{tag}"] = int(sum(len(mined[i]) for i in sel)) if mined else 0
    return out


def _feature_norms(model, preds, batch):
    blocks = model.config.domain_blocks or model.config.detect_blocks
    props = ad.collect_proposals(model, preds, batch.assignments, batch.domains,
                                 ad.ABANDON_NEGATIVES, blocks=blocks)
    out = {}
    for side in ("source", "target"):
        norms = [np.linalg.norm(getattr(p, side).data, axis=1) for p in props.values()]
        norms = np.concatenate(norms) if norms else np.zeros(0)
        out[f"feat_norm_{side}"] = float(norms.mean()) if norms.size else 0.0
    return out


def check_mining_ratio(assignments, mined, ratio):
    """Per image, mined negatives never exceed ``ratio`` times the positives."""
    for asg, neg in zip(assignments, mined):
        n_pos = len(asg.positives)
        if len(neg) > ratio * max(n_pos, 1):
            raise AssertionError(f"mined {len(neg)} negatives for {n_pos} positives")


def _record(tlog, phase, model, preds, batch, terms=None, domain=0.0):
    if tlog is None:
        return
    mined = terms.mined if terms is not None else None
    if terms is not None:
        check_mining_ratio(batch.assignments, terms.mined, model.config.neg_pos_ratio)
    tlog.record(
        phase=phase,
        L_conf=float(terms.conf) if terms is not None else 0.0,
        L_loc=float(terms.loc) if terms is not None else 0.0,
        L_domain=float(domain),
        **_domain_counts(batch, mined),
        **_feature_norms(model, preds, batch),
    )


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class TrainSettings:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    clip_norm: float = None


def _step(model, loss, state, frozen_names=()):
    model.zero_grad()
    loss.backward()
    sgd_step(model.params, _grads(model), state, frozen_names)


def _group_names(model, *groups):
    names = []
    for g in groups:
        names.extend(model.names(group=g))
    return names


def pretrain(model, data, steps, rng, settings=None, tlog=None, state=None):
    """Plain multibox training over every detection parameter (domain heads frozen)."""
    settings = settings or TrainSettings()
    if len(data) == 0:
        raise ValueError("pretrain needs a non-empty dataset")
    state = state or OptimizerState(settings.lr, settings.momentum, clip_norm=settings.clip_norm)
    cfg = model.config
    n_s, n_t = batch_split(data, settings.batch_size)
    idle = _group_names(model, "domain", "subnet")
    with frozen(model, idle):
        for _ in range(steps):
            batch = data.sample(rng, n_s, n_t)
            preds = model(batch.images)
            terms = multibox_loss(preds, batch.assignments, cfg.loc_weight, cfg.neg_pos_ratio)
            _step(model, terms.total, state, idle)
            _record(tlog, "pretrain", model, preds, batch, terms)
    return model


def evaluate_multibox(model, data, scenes=None):
    """Multibox loss of the model over the given scenes (default: all training scenes)."""
    scenes = (data.source + data.target) if scenes is None else scenes
    batch = data.batch_from(scenes)
    with no_grad():
        preds = model(batch.images)
        return multibox_loss(preds, batch.assignments, model.config.loc_weight,
                             model.config.neg_pos_ratio).total.item()


# ---------------------------------------------------------------------------
# adversarial schedule
# ---------------------------------------------------------------------------


@dataclass
class PhaseSchedule:
    rounds: int = 5
    classifier_steps: int = 50
    mixer_steps: int = 50
    retrain_steps: int = 200
    classifier_lr: float = 0.02
    mixer_lr: float = 0.01
    retrain_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    negatives: str = ad.KEEP_NEGATIVES
    retrain_repre: bool = True  # phase C also updates the trunk
    mixer_clip: float = 3.0  # gradient-norm cap for phase B
    retrain_clip: float = None

    def __post_init__(self):
        for name in ("rounds", "classifier_steps", "mixer_steps", "retrain_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _adversarial_logits(model, preds, batch, mode):
    cfg = model.config
    props = ad.collect_proposals(model, preds, batch.assignments, batch.domains, mode,
                                 cfg.neg_pos_ratio, blocks=cfg.domain_blocks)
    parts, labels = [], []
    for p in props.values():
        lg, lb = ad.proposal_domain_logits(preds, p)
        parts.append(lg)
        labels.append(lb)
    from .numerics import concat

    return concat(parts, axis=0), np.concatenate(labels)


def domain_accuracy(model, source_scenes, target_scenes, mode=ad.KEEP_NEGATIVES):
    """Domain-classifier accuracy on proposals of held-out scenes, balanced by
    truncating each domain's proposal list to the smaller count."""
    cfg = model.config
    scenes = list(source_scenes) + list(target_scenes)
    assignments = [match_anchors(model.anchors, s.boxes, cfg.match_threshold) for s in scenes]
    domains = np.array([int(s.domain) for s in scenes])
    with no_grad():
        preds = model(np.stack([s.image for s in scenes]))
        logits, labels = _adversarial_logits(model, preds, _Holder(assignments, domains), mode)
    pred = np.argmax(logits.data, axis=1)
    src, tgt = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
    n = min(len(src), len(tgt))
    if n == 0:
        return float("nan")
    rows = np.concatenate([src[:n], tgt[:n]])
    return float(np.mean(pred[rows] == labels[rows]))


@dataclass
class _Holder:
    assignments: list
    domains: np.ndarray


@dataclass
class AdversarialHistory:
    accuracy: list = field(default_factory=list)  # (phase label, accuracy)
    frozen_ok: list = field(default_factory=list)  # (phase label, bool)


def adversarial_schedule(model, data, schedule, rng, tlog=None, heldout=None, check_frozen=False):
    """Classifier (A) / mixer (B) alternation for ``rounds`` rounds, then retrain (C).

    A: domain branches learn on fixed features.
    B: the trunk learns to confuse the fixed domain branches.
    C: class/box heads retrain on the final representation.
    ``heldout`` is an optional (source scenes, target scenes) pair; domain
    accuracy on it is recorded after every phase.
    """
    cfg = model.config
    if not cfg.domain_blocks or not model.names(group="domain"):
        raise ValueError("adversarial schedule needs domain branches (config.domain_blocks)")
    history = AdversarialHistory()
    n_s, n_t = batch_split(data, schedule.batch_size)
    if n_s == 0 or n_t == 0:
        raise ValueError("adversarial schedule needs scenes from both domains")
    states = {
        "classifier": OptimizerState(schedule.classifier_lr, schedule.momentum),
        "mixer": OptimizerState(schedule.mixer_lr, schedule.momentum, clip_norm=schedule.mixer_clip),
        "retrain": OptimizerState(schedule.retrain_lr, schedule.momentum, clip_norm=schedule.retrain_clip),
    }
    everything = set(model.params)
    trainable = {
        "classifier": set(_group_names(model, "domain")),
        "mixer": set(_group_names(model, "repre")),
        "retrain": set(_group_names(model, "loc_conf", *(["repre"] if schedule.retrain_repre else []))),
    }

    def run(phase, steps, label):
        fixed = everything - trainable[phase]
        before = snapshot(model, fixed) if check_frozen else None
        with frozen(model, fixed):
            for _ in range(steps):
                batch = data.sample(rng, n_s, n_t)
                preds = model(batch.images)
                if phase == "retrain":
                    terms = multibox_loss(preds, batch.assignments, cfg.loc_weight, cfg.neg_pos_ratio)
                    _step(model, terms.total, states[phase], fixed)
                    _record(tlog, phase, model, preds, batch, terms)
                    continue
                logits, labels = _adversarial_logits(model, preds, batch, schedule.negatives)
                if phase == "classifier":
                    loss = ad.domain_classifier_loss(logits, labels)
                else:
                    loss = ad.domain_confusion_loss(logits)
                # summed losses are stepped per proposal, like the multibox 1/N
                loss = loss * (1.0 / max(len(labels), 1))
                if loss.requires_grad:
                    _step(model, loss, states[phase], fixed)
                _record(tlog, phase, model, preds, batch, None, loss.item())
        if check_frozen:
            history.frozen_ok.append((label, snapshot(model, fixed) == before))
        if heldout is not None:
            history.accuracy.append((label, domain_accuracy(model, *heldout, schedule.negatives)))

    for r in range(schedule.rounds):
        run("classifier", schedule.classifier_steps, f"A{r}")
        run("mixer", schedule.mixer_steps, f"B{r}")
    run("retrain", schedule.retrain_steps, "C")
    return model, history


# ---------------------------------------------------------------------------
# multi-branch (three-stage) schedule
# ---------------------------------------------------------------------------


def reweighted_cls_loss(logits, labels):
    """Class-balanced cross-entropy, ``(1/N) sum_i w_i CE_i`` with
    ``w_pos = N/(2 N_pos)`` and ``w_neg = N/(2 N_neg)``; a class that is absent
    leaves the other with weight 1."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        return Tensor(0.0)
    n_pos = int(np.count_nonzero(labels == POSITIVE))
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        w = np.ones(n)
    else:
        w = np.where(labels == POSITIVE, n / (2.0 * n_pos), n / (2.0 * n_neg))
    logp = log_softmax(logits, axis=1)
    return -(logp[np.arange(n), labels] * (w / n)).sum()


def mscnn_branch_loss(cls, loc, assignments, lam=1.0, eta=0.5, domain_term=None,
                      neg_pos_ratio=3.0, mined=None):
    """``L_cls + lam [y>=1] L_loc + eta [y>=1] L_domain`` for one detection branch.

    ``cls`` (B, A_m, 2) and ``loc`` (B, A_m, 4) cover this branch's anchors only;
    ``assignments`` are matched against those anchors alone. ``L_loc`` is the mean
    smooth-L1 over positives. ``domain_term`` is a callable returning the domain
    loss on this branch's positive proposals (or None); it is skipped when the
    branch has no positives.
    """
    if cls.ndim == 2:
        cls = cls.reshape(1, *cls.shape)
        loc = loc.reshape(1, *loc.shape)
    if isinstance(assignments, MatchAssignment):
        assignments = [assignments]
    n_img, n_anchor = cls.shape[:2]
    flat_cls = cls.reshape(n_img * n_anchor, 2)
    z = flat_cls.data - flat_cls.data.max(axis=1, keepdims=True)
    bg_loss = (np.log(np.exp(z).sum(axis=1)) - z[:, 0]).reshape(n_img, n_anchor)
    rows, labels, pos_rows, targets, mined_out = [], [], [], [], []
    for b, asg in enumerate(assignments):
        pos = asg.positives
        neg = hard_negative_mining(bg_loss[b], asg, neg_pos_ratio) if mined is None else np.asarray(mined[b])
        mined_out.append(neg)
        rows.append(np.concatenate([pos, neg]) + b * n_anchor)
        labels.append(np.concatenate([np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)]))
        pos_rows.append(pos + b * n_anchor)
        targets.append(asg.targets[pos])
    rows, labels, pos_rows = np.concatenate(rows), np.concatenate(labels), np.concatenate(pos_rows)
    n_pos = len(pos_rows)

    l_cls = reweighted_cls_loss(flat_cls[rows], labels)
    total = l_cls
    l_loc_v = l_dom_v = 0.0
    if n_pos > 0:
        if lam:
            l_loc = smooth_l1(loc.reshape(n_img * n_anchor, 4)[pos_rows], np.concatenate(targets)) * (1.0 / n_pos)
            total = total + lam * l_loc
            l_loc_v = l_loc.item()
        if eta and domain_term is not None:
            l_dom = domain_term()
            total = total + eta * l_dom
            l_dom_v = l_dom.item()
    return LossTerms(total, conf=l_cls.item(), loc=l_loc_v, domain=l_dom_v, loc_weight=lam,
                     domain_weight=eta, norm=1.0, n_pos=n_pos, n_neg=len(rows) - n_pos, mined=mined_out)


def mscnn_total_loss(branch_terms, alphas, sub_terms=None, sub_weight=1.0, sub_domain=None,
                     sub_domain_weight=1.0):
    """Weighted sum over branches plus the sub-network loss and its domain term.

    Returns ``(total Tensor, recomposed float)``; the float rebuilds the total
    from the stored decomposed parts.
    """
    if len(branch_terms) != len(alphas):
        raise ValueError(f"{len(alphas)} weights for {len(branch_terms)} branches")
    total = Tensor(0.0)
    recomposed = 0.0
    for terms, a in zip(branch_terms, alphas):
        total = total + a * terms.total
        recomposed += a * terms.recompose()
    if sub_terms is not None:
        total = total + sub_weight * sub_terms.total
        recomposed += sub_weight * sub_terms.recompose()
    if sub_domain is not None:
        total = total + sub_domain_weight * sub_domain
        recomposed += sub_domain_weight * sub_domain.item()
    return total, recomposed


@dataclass
class ThreeStageSchedule:
    rounds: int = 1
    stage1_steps: int = 200
    stage2_steps: int = 200
    stage3_steps: int = 100
    stage1_lam: float = 0.1
    lam: float = 1.0
    eta: float = 0.5
    alphas: tuple = None  # per detection branch; default all 1
    sub_weight: float = 1.0
    sub_domain_weight: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8

    def __post_init__(self):
        for name in ("rounds", "stage1_steps", "stage2_steps", "stage3_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class BranchData:
    """Per-branch assignments: each branch matches ground truth against its own anchors."""

    def __init__(self, model, data):
        self.slices = [model.anchors.scale_slice(s) for s in range(len(model.config.detect_blocks))]
        thr = model.config.match_threshold
        self._cache = {}
        for s in data.source + data.target:
            self._cache[id(s)] = [match_anchors(model.anchors.boxes[sl], s.boxes, thr) for sl in self.slices]

    def assignments(self, scenes, branch):
        return [self._cache[id(s)][branch] for s in scenes]


def evaluate_branch_multibox(model, data, bdata=None, scenes=None):
    """Sum over detection branches of the multibox loss under branch-local matching."""
    bdata = bdata or BranchData(model, data)
    scenes = (data.source + data.target) if scenes is None else scenes
    images = np.stack([s.image for s in scenes])
    cfg = model.config
    with no_grad():
        preds = model(images)
        total = 0.0
        for m, sl in enumerate(bdata.slices):
            branch = PredictionSet(preds.cls_logits[:, sl], preds.loc[:, sl])
            total += multibox_loss(branch, bdata.assignments(scenes, m), cfg.loc_weight,
                                   cfg.neg_pos_ratio).total.item()
    return total


def _branch_losses(model, preds, batch, bdata, lam, eta, domain_mode):
    cfg = model.config
    terms = []
    for m, block in enumerate(cfg.detect_blocks):
        sl = bdata.slices[m]
        asg = bdata.assignments(batch.scenes, m)
        domain_term = None
        if block in preds.domain_logits and domain_mode is not None:
            domain_term = _branch_domain_term(model, preds, block, sl, asg, batch.domains, domain_mode)
        terms.append(mscnn_branch_loss(preds.cls_logits[:, sl], preds.loc[:, sl], asg, lam, eta,
                                       domain_term, cfg.neg_pos_ratio))
    return terms


def _branch_domain_term(model, preds, block, sl, assignments, domains, mode, sub=False):
    """Mean domain loss over the branch's positive proposals."""
    anchors = model.anchors
    s = model.config.detect_blocks.index(block)
    fh, fw = anchors.shapes[s]
    cells = anchors.cell[sl]
    rows, labels = [], []
    for b, asg in enumerate(assignments):
        for a in asg.positives:
            rows.append(b * fh * fw + cells[a])
            labels.append(int(domains[b]))
    if not rows:
        return None

    def term():
        logits = (preds.sub_domain if sub else preds.domain_logits[block]).reshape(-1, 2)[np.array(rows)]
        if mode == "classifier":
            return ad.domain_classifier_loss(logits, labels) * (1.0 / len(rows))
        return ad.domain_confusion_loss(logits) * (1.0 / len(rows))

    return term


def mscnn_three_stage(model, data, schedule, rng, tlog=None, check_frozen=False, recompose_log=None):
    """Stage 1: first trunk block fixed, branches train with a small loc weight while
    domain branches learn as classifiers on detached features. Stage 2: whole trunk
    trains against fixed domain branches (confusion). Stages 1-2 alternate for
    ``rounds``. Stage 3: only the sub-network head trains, trunk fixed.
    """
    cfg = model.config
    if not cfg.subnet:
        raise ValueError("three-stage schedule needs a model built with subnet=True")
    alphas = schedule.alphas or (1.0,) * len(cfg.detect_blocks)
    if len(alphas) != len(cfg.detect_blocks):
        raise ValueError("alphas: need one weight per detection branch")
    bdata = BranchData(model, data)
    state = OptimizerState(schedule.lr, schedule.momentum)
    n_s, n_t = batch_split(data, schedule.batch_size)
    everything = set(model.params)
    first_block = set(model.names(prefix="trunk.block1."))
    deepest = len(cfg.detect_blocks) - 1
    frozen_report = []

    stages = {
        1: everything - first_block - set(_group_names(model, "subnet")),
        2: set(_group_names(model, "repre", "loc_conf")),
        3: set(_group_names(model, "subnet")),
    }

    def run(stage, steps):
        fixed = everything - stages[stage]
        before = snapshot(model, fixed) if check_frozen else None
        with frozen(model, fixed):
            for _ in range(steps):
                batch = data.sample(rng, n_s, n_t)
                preds = model.forward(batch.images, detach_domain=(stage != 2))
                if stage in (1, 2):
                    lam = schedule.stage1_lam if stage == 1 else schedule.lam
                    mode = "classifier" if stage == 1 else "confusion"
                    terms = _branch_losses(model, preds, batch, bdata, lam, schedule.eta, mode)
                    total, recomposed = mscnn_total_loss(terms, alphas)
                    conf = sum(t.conf for t in terms)
                    loc = sum(t.loc for t in terms)
                    dom = sum(t.domain for t in terms)
                    checks = [(bdata.assignments(batch.scenes, m), t.mined) for m, t in enumerate(terms)]
                else:
                    asg = bdata.assignments(batch.scenes, deepest)
                    sub = mscnn_branch_loss(preds.sub_cls, preds.sub_loc, asg, schedule.lam, 0.0,
                                            None, cfg.neg_pos_ratio)
                    dom_fn = _branch_domain_term(model, preds, cfg.detect_blocks[-1], bdata.slices[deepest],
                                                 asg, batch.domains, "classifier", sub=True)
                    dom_t = dom_fn() if dom_fn is not None else None
                    total, recomposed = mscnn_total_loss([], [], sub, schedule.sub_weight, dom_t,
                                                         schedule.sub_domain_weight)
                    conf, loc, dom = sub.conf, sub.loc, (dom_t.item() if dom_t is not None else 0.0)
                    checks = [(asg, sub.mined)]
                if recompose_log is not None:
                    recompose_log.append((total.item(), recomposed))
                if total.requires_grad:
                    _step(model, total, state, fixed)
                if tlog is not None:
                    for asg_m, mined_m in checks:
                        check_mining_ratio(asg_m, mined_m, cfg.neg_pos_ratio)
                    # counts are summed over branches (each branch matches independently)
                    counts = {k: 0 for k in LOG_FIELDS if k.startswith("N_")}
                    for asg_m, mined_m in checks:
                        for d, tag in ((0, "source"), (1, "target")):
                            sel = np.flatnonzero(batch.domains == d)
                            counts[f"N_pos_{tag}"] += int(sum(len(asg_m[i].positives) for i in sel))
                            counts[f"N_neg_{tag}"] += int(sum(len(mined_m[i]) for i in sel))
                    tlog.record(phase=f"stage{stage}", L_conf=conf, L_loc=loc, L_domain=dom,
                                **counts, **_feature_norms(model, preds, batch))
        if check_frozen:
            frozen_report.append((f"stage{stage}", snapshot(model, fixed) == before))

    for _ in range(schedule.rounds):
        run(1, schedule.stage1_steps)
        run(2, schedule.stage2_steps)
    run(3, schedule.stage3_steps)
    return model, frozen_report


# ---------------------------------------------------------------------------
# discrepancy joint training
# ---------------------------------------------------------------------------


@dataclass
class JointSchedule:
    steps: int = 200
    kind: str = "coral"
    weight: float = 0.1
    negatives: str = ad.KEEP_NEGATIVES
    per_class: bool = False
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8

    def __post_init__(self):
        if self.kind not in ad.DISCREPANCY_KINDS:
            raise ValueError(f"kind must be one of {ad.DISCREPANCY_KINDS}")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


@dataclass
class JointResult:
    skipped: int = 0  # batches with no usable block
    dropped_blocks: int = 0  # block terms left out of otherwise usable batches
    discrepancy: list = field(default_factory=list)


def batch_discrepancy(model, preds, batch, kind, mode, mined=None, per_class=False):
    """Sum of the discrepancy loss over adapted blocks.

    Blocks whose proposals violate the loss's row requirements are left out;
    returns ``(total or None, number of blocks left out)``. When every block is
    left out the last AdaptationError is raised.
    """
    cfg = model.config
    blocks = cfg.domain_blocks or cfg.detect_blocks
    props = ad.collect_proposals(model, preds, batch.assignments, batch.domains, mode,
                                 cfg.neg_pos_ratio, mined=mined, blocks=blocks)
    total, dropped, error = None, 0, None
    for p in props.values():
        try:
            term = ad.discrepancy(kind, p, per_class=per_class)
        except ad.AdaptationError as exc:
            dropped += 1
            error = exc
            continue
        total = term if total is None else total + term
    if total is None:
        raise error
    return total, dropped


def discrepancy_joint_train(model, data, schedule, rng, tlog=None, state=None):
    """Multibox loss plus ``weight`` times the discrepancy loss, all detection
    parameters trainable. A block whose proposals violate the loss's row
    requirements drops out of that batch's term; a batch with no usable block
    is counted in ``skipped`` and trains on the multibox loss alone."""
    cfg = model.config
    state = state or OptimizerState(schedule.lr, schedule.momentum)
    n_s, n_t = batch_split(data, schedule.batch_size)
    result = JointResult()
    idle = _group_names(model, "domain", "subnet")
    with frozen(model, idle):
        for _ in range(schedule.steps):
            batch = data.sample(rng, n_s, n_t)
            preds = model(batch.images)
            terms = multibox_loss(preds, batch.assignments, cfg.loc_weight, cfg.neg_pos_ratio)
            total = terms.total
            dval = 0.0
            if schedule.weight > 0:
                try:
                    disc, dropped = batch_discrepancy(model, preds, batch, schedule.kind, schedule.negatives,
                                                      terms.mined, schedule.per_class)
                except ad.AdaptationError as exc:
                    result.skipped += 1
                    log.info("discrepancy term skipped: %s", exc)
                else:
                    result.dropped_blocks += dropped
                    total = total + schedule.weight * disc
                    dval = disc.item()
            result.discrepancy.append(dval)
            if total.requires_grad:
                _step(model, total, state, idle)
            _record(tlog, "joint", model, preds, batch, terms, dval)
    return model, result


def training_domains(scenes):
    src = [s for s in scenes if s.domain == Domain.SOURCE]
    tgt = [s for s in scenes if s.domain == Domain.TARGET]
    return src, tgt


__all__ = [
    "OptimizerState", "sgd_step", "frozen", "snapshot", "TrainData", "TrainLog", "TrainSettings",
    "pretrain", "evaluate_multibox", "PhaseSchedule", "adversarial_schedule", "domain_accuracy",
    "evaluate_branch_multibox", "reweighted_cls_loss", "mscnn_branch_loss", "mscnn_total_loss", "ThreeStageSchedule",
    "mscnn_three_stage", "JointSchedule", "discrepancy_joint_train", "batch_discrepancy",
    "NEGATIVE", "POSITIVE",
]
