"""Experiment orchestration shared by the CLI commands.

Randomness comes from named sub-streams of the root seed: ``data`` for the
dataset, ``init`` for parameters, ``sampling`` (per phase) for mini-batches.
A replicate index extends every stream, so replicate 0 of ``compare`` is the
run ``train`` performs.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluation as ev
from . import training as tr
from .config import subseed, substream
from .datagen import generate_split
from .detector import Detector

PRETRAIN, ADAPT = 0, 1


def make_dataset(cfg):
    d = cfg.data
    return generate_split(subseed(cfg.seed, "data"), d.counts(), d.source.params(), d.target.params(),
                          tuple(d.image_size))


def _settings(cfg):
    t = cfg.train
    return tr.TrainSettings(lr=t.lr, momentum=t.momentum, batch_size=t.batch_size, clip_norm=t.clip_norm)


def init_model(cfg, adapted=True, replicate=0):
    return Detector(cfg.detector_config(adapted), rng=substream(cfg.seed, "init", replicate))


def adaptation_steps(cfg):
    """Detection-loss steps the configured adaptation schedule performs after pretraining."""
    a = cfg.adaptation
    if a.mode == "none":
        return 0
    if a.schedule == "ssd_adversarial":
        return cfg.adversarial.retrain_steps
    if a.schedule == "mscnn_three_stage":
        s = cfg.three_stage
        return s.rounds * (s.stage1_steps + s.stage2_steps) + s.stage3_steps
    return cfg.discrepancy.steps


@dataclass
class TrainOutcome:
    model: Detector
    timings: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)


def adapt(cfg, model, data, heldout=None, tlog=None, replicate=0, check_frozen=False):
    """Apply the configured adaptation schedule to a pretrained model (in place)."""
    a = cfg.adaptation
    rng = substream(cfg.seed, "sampling", ADAPT, replicate)
    t = cfg.train
    details = {}
    if a.mode == "none":
        return model, details
    if a.schedule == "ssd_adversarial":
        s = cfg.adversarial
        schedule = tr.PhaseSchedule(
            rounds=s.rounds, classifier_steps=s.classifier_steps, mixer_steps=s.mixer_steps,
            retrain_steps=s.retrain_steps, classifier_lr=s.classifier_lr, mixer_lr=s.mixer_lr,
            retrain_lr=s.retrain_lr, momentum=t.momentum, batch_size=t.batch_size,
            negatives=cfg.negatives_mode, retrain_repre=s.retrain_repre,
            mixer_clip=s.mixer_clip, retrain_clip=s.retrain_clip,
        )
        model, history = tr.adversarial_schedule(model, data, schedule, rng, tlog, heldout, check_frozen)
        details["domain_accuracy"] = history.accuracy
        details["frozen_ok"] = history.frozen_ok
    elif a.schedule == "mscnn_three_stage":
        s = cfg.three_stage
        schedule = tr.ThreeStageSchedule(
            rounds=s.rounds, stage1_steps=s.stage1_steps, stage2_steps=s.stage2_steps,
            stage3_steps=s.stage3_steps, stage1_lam=s.stage1_lam, lam=s.lam, eta=s.eta,
            alphas=tuple(s.alphas) if s.alphas else None, sub_weight=s.sub_weight,
            sub_domain_weight=s.sub_domain_weight, lr=s.lr, momentum=t.momentum, batch_size=t.batch_size,
        )
        model, frozen = tr.mscnn_three_stage(model, data, schedule, rng, tlog, check_frozen)
        details["frozen_ok"] = frozen
    else:
        s = cfg.discrepancy
        schedule = tr.JointSchedule(steps=s.steps, kind=a.mode, weight=s.weight, negatives=cfg.negatives_mode,
                                    per_class=a.per_class, lr=s.lr, momentum=t.momentum, batch_size=t.batch_size)
        model, result = tr.discrepancy_joint_train(model, data, schedule, rng, tlog)
        details["skipped"] = result.skipped
    return model, details


def train(cfg, dataset, tlog=None, replicate=0, check_frozen=False):
    """Pretrain on both training splits, then run the configured adaptation."""
    timings = {}
    model = init_model(cfg, replicate=replicate)
    data = tr.TrainData(model, dataset.splits["source_train"], dataset.splits["target_train"])
    if len(data) == 0:
        raise ValueError("training splits are empty")
    t0 = time.perf_counter()
    tr.pretrain(model, data, cfg.train.pretrain_steps, substream(cfg.seed, "sampling", PRETRAIN, replicate),
                _settings(cfg), tlog)
    timings["pretrain_s"] = time.perf_counter() - t0
    heldout = None
    if dataset.splits["source_test"] and dataset.splits["target_test"]:
        heldout = (dataset.splits["source_test"], dataset.splits["target_test"])
    t0 = time.perf_counter()
    model, details = adapt(cfg, model, data, heldout, tlog, replicate, check_frozen)
    timings["adapt_s"] = time.perf_counter() - t0
    return TrainOutcome(model, timings, details)


# ---------------------------------------------------------------------------
# three-arm comparison
# ---------------------------------------------------------------------------

ARMS = ("target_only", "mixed", "adapted")


def run_arm(cfg, dataset, arm, replicate=0):
    """Train one arm of the comparison and return its model.

    All arms take the same number of detection-loss steps: the pretraining
    budget plus the steps the adaptation schedule spends on detection. The
    mixed and adapted arms share the pretrained model bit for bit.
    """
    steps = cfg.train.pretrain_steps + adaptation_steps(cfg)
    settings = _settings(cfg)
    pre_rng = substream(cfg.seed, "sampling", PRETRAIN, replicate)
    if arm == "target_only":
        model = init_model(cfg, adapted=False, replicate=replicate)
        data = tr.TrainData(model, [], dataset.splits["target_train"][:cfg.compare.target_only_train])
        if len(data) == 0:
            raise ValueError("target_only arm has no target training scenes")
        return tr.pretrain(model, data, steps, pre_rng, settings)
    model = init_model(cfg, replicate=replicate)
    data = tr.TrainData(model, dataset.splits["source_train"], dataset.splits["target_train"])
    if len(data) == 0:
        raise ValueError("training splits are empty")
    state = tr.OptimizerState(settings.lr, settings.momentum, clip_norm=settings.clip_norm)
    tr.pretrain(model, data, cfg.train.pretrain_steps, pre_rng, settings, state=state)
    if arm == "mixed":
        return tr.pretrain(model, data, adaptation_steps(cfg), substream(cfg.seed, "sampling", ADAPT, replicate),
                           settings, state=state)
    if arm == "adapted":
        return adapt(cfg, model, data, replicate=replicate)[0]
    raise ValueError(f"unknown arm {arm!r}")


def arm_curve(cfg, dataset, arm):
    """Sweep curve of one arm, averaged over ``compare.replicates`` training runs."""
    test = dataset.splits["target_test"]
    curves = []
    for r in range(cfg.compare.replicates):
        model = run_arm(cfg, dataset, arm, r)
        curves.append(ev.threshold_sweep(model, test, cfg.eval.grid, cfg.eval.union))
    return curves


def mean_curve(curves):
    """Per-threshold mean of ``mean_alpha_our`` across replicate curves (nan-aware)."""
    stack = np.array([c.mean_alpha for c in curves])
    with np.errstate(invalid="ignore"):
        valid = ~np.isnan(stack)
        total = np.where(valid, stack, 0.0).sum(axis=0)
        count = valid.sum(axis=0)
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


def peak(thresholds, values):
    if np.all(np.isnan(values)):
        return float("nan"), float("nan")
    i = int(np.nanargmax(values))
    return float(values[i]), float(thresholds[i])


PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


def ordering_verdict(peaks, margin, trained=True):
    """Pairwise verdicts for adapted > mixed and mixed > target_only.

    A pair passes when the better arm leads by at least ``margin``, fails when
    it trails by at least ``margin``, and is inconclusive in between or when
    nothing was trained.
    """
    out = {}
    for hi, lo in (("adapted", "mixed"), ("mixed", "target_only")):
        diff = peaks[hi] - peaks[lo]
        if not trained or not np.isfinite(diff):
            out[f"{hi}>{lo}"] = (INCONCLUSIVE, diff)
        elif diff >= margin:
            out[f"{hi}>{lo}"] = (PASS, diff)
        elif diff <= -margin:
            out[f"{hi}>{lo}"] = (FAIL, diff)
        else:
            out[f"{hi}>{lo}"] = (INCONCLUSIVE, diff)
    return out
