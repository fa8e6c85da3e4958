import numpy as np
import pytest

from dadet import adaptation as ad
from dadet import checkpoint
from dadet import training as tr
from dadet.detector import Detector, DetectorConfig, match_anchors
from dadet.numerics import Tensor, grad_check


def _smoothed(values, window=20):
    v = np.asarray(values, dtype=float)
    return v[:window].mean(), v[-window:].mean()


@pytest.fixture(scope="module")
def toy(small_dataset):
    return small_dataset["source_train"][:20], small_dataset["target_train"][:20]


# -- optimiser ----------------------------------------------------------------


def test_sgd_hand_step():
    p = {"p": Tensor(np.array([1.0]))}
    tr.sgd_step(p, {"p": 2 * p["p"].data}, tr.OptimizerState(0.1, 0.0))
    assert p["p"].data[0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_momentum_accumulates():
    p = {"p": Tensor(np.array([0.0]))}
    state = tr.OptimizerState(1.0, 0.5)
    tr.sgd_step(p, {"p": np.array([1.0])}, state)
    tr.sgd_step(p, {"p": np.array([1.0])}, state)
    assert p["p"].data[0] == -2.5  # v = 1 then 1.5


def test_sgd_clip_rescales_joint_norm():
    p = {"a": Tensor(np.zeros(1)), "b": Tensor(np.zeros(1)), "c": Tensor(np.zeros(1))}
    grads = {"a": np.array([3.0]), "b": np.array([4.0]), "c": np.array([100.0])}
    # c is frozen, so only (3, 4) counts: norm 5 scaled to 1
    tr.sgd_step(p, grads, tr.OptimizerState(1.0, 0.0, clip_norm=1.0), frozen=("c",))
    assert p["a"].data[0] == pytest.approx(-0.6) and p["b"].data[0] == pytest.approx(-0.8)
    assert p["c"].data[0] == 0.0
    tr.sgd_step(p, {"a": np.array([0.3])}, tr.OptimizerState(1.0, 0.0, clip_norm=1.0))
    assert p["a"].data[0] == pytest.approx(-0.9)  # under the cap: untouched


@pytest.mark.parametrize("lr,frozen", [(0.0, ()), (0.1, ("a", "b"))])
def test_sgd_no_change(lr, frozen):
    p = {"a": Tensor(np.ones(3)), "b": Tensor(np.ones(2))}
    before = {k: v.data.tobytes() for k, v in p.items()}
    tr.sgd_step(p, {"a": np.ones(3), "b": np.ones(2)}, tr.OptimizerState(lr, 0.9), frozen)
    assert {k: v.data.tobytes() for k, v in p.items()} == before


def test_frozen_context_restores_flags(model):
    names = model.names(group="repre")
    with tr.frozen(model, names):
        assert not any(model.params[n].requires_grad for n in names)
    assert all(model.params[n].requires_grad for n in names)


# -- pretraining --------------------------------------------------------------


def test_pretrain_zero_steps_is_identity(toy):
    m = Detector(DetectorConfig(), seed=4)
    before = checkpoint.dumps(m)
    tr.pretrain(m, tr.TrainData(m, *toy), 0, np.random.default_rng(0))
    assert checkpoint.dumps(m) == before


def test_pretrain_empty_rejected(model):
    with pytest.raises(ValueError, match="non-empty"):
        tr.pretrain(model, tr.TrainData(model), 1, np.random.default_rng(0))


def test_pretrain_deterministic(toy):
    out = []
    for _ in range(2):
        m = Detector(DetectorConfig(), seed=4)
        tr.pretrain(m, tr.TrainData(m, *toy), 15, np.random.default_rng(8))
        out.append(checkpoint.dumps(m))
    assert out[0] == out[1]


def test_pretrain_loss_drops_30_percent(small_dataset):
    source, target = small_dataset["source_train"][:20], small_dataset["target_train"][:20]
    m = Detector(DetectorConfig(), seed=0)
    log = tr.TrainLog()
    tr.pretrain(m, tr.TrainData(m, source, target), 200, np.random.default_rng(0), tlog=log)
    totals = [(r["L_conf"] + r["L_loc"]) / max(r["N_pos_source"] + r["N_pos_target"], 1) for r in log.rows]
    first, last = _smoothed(totals)
    assert last <= 0.7 * first


def test_train_log_schema(tmp_path, toy):
    m = Detector(DetectorConfig(), seed=1)
    log = tr.TrainLog(tmp_path / "log.csv")
    tr.pretrain(m, tr.TrainData(m, *toy), 3, np.random.default_rng(0), tlog=log)
    log.close()
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].split(",") == list(tr.LOG_FIELDS)
    assert len(lines) == 4 and lines[1].startswith("0,pretrain,")


def test_mining_ratio_check_raises():
    anchors = np.array([[10.0 * i, 0, 10.0 * i + 4, 4] for i in range(10)])
    asg = match_anchors(anchors, anchors[:1])
    batch = tr.Batch(None, [asg], np.array([0]), [])
    tr.check_mining_ratio(batch.assignments, [np.arange(3)], 3.0)
    with pytest.raises(AssertionError, match="negatives"):
        tr.check_mining_ratio(batch.assignments, [np.arange(4)], 3.0)


# -- adversarial schedule -----------------------------------------------------


def _short_schedule(**kw):
    base = dict(rounds=1, classifier_steps=8, mixer_steps=8, retrain_steps=8)
    base.update(kw)
    return tr.PhaseSchedule(**base)


def test_adversarial_freezing_contract(toy):
    m = Detector(DetectorConfig(), seed=5)
    _, hist = tr.adversarial_schedule(m, tr.TrainData(m, *toy), _short_schedule(), np.random.default_rng(0),
                                      check_frozen=True)
    assert [label for label, _ in hist.frozen_ok] == ["A0", "B0", "C"]
    assert all(ok for _, ok in hist.frozen_ok)


def test_adversarial_phases_touch_only_their_group(toy):
    m = Detector(DetectorConfig(), seed=5)
    data = tr.TrainData(m, *toy)
    before = tr.snapshot(m)
    tr.adversarial_schedule(m, data, _short_schedule(mixer_steps=0, retrain_steps=0), np.random.default_rng(0))
    after = tr.snapshot(m)
    changed = {k for k in before if before[k] != after[k]}
    assert changed and changed <= set(m.names(group="domain"))


def test_adversarial_zero_schedule_is_identity(toy):
    m = Detector(DetectorConfig(), seed=5)
    before = checkpoint.dumps(m)
    tr.adversarial_schedule(m, tr.TrainData(m, *toy), _short_schedule(rounds=0, retrain_steps=0),
                            np.random.default_rng(0))
    assert checkpoint.dumps(m) == before


def test_adversarial_requires_heads(toy):
    m = Detector(DetectorConfig(domain_blocks=()), seed=5)
    with pytest.raises(ValueError, match="domain branches"):
        tr.adversarial_schedule(m, tr.TrainData(m, *toy), _short_schedule(), np.random.default_rng(0))


def test_retrain_repre_flag_freezes_trunk(toy):
    m = Detector(DetectorConfig(), seed=5)
    trunk = tr.snapshot(m, m.names(group="repre"))
    tr.adversarial_schedule(m, tr.TrainData(m, *toy), _short_schedule(rounds=0, retrain_repre=False),
                            np.random.default_rng(0))
    assert tr.snapshot(m, m.names(group="repre")) == trunk


def test_domain_accuracy_bounds(toy, small_dataset):
    m = Detector(DetectorConfig(), seed=5)
    acc = tr.domain_accuracy(m, small_dataset["source_test"], small_dataset["target_test"])
    assert 0.0 <= acc <= 1.0


# -- three-stage schedule -----------------------------------------------------


def test_reweighted_balanced_equals_plain_ce():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(6, 2))
    y = np.array([1, 0, 1, 0, 1, 0])
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    assert tr.reweighted_cls_loss(Tensor(z), y).item() == pytest.approx(-logp[np.arange(6), y].mean(), abs=1e-14)


def test_reweighted_hand_example():
    p = np.array([0.8, 0.3, 0.6, 0.9])  # probability of the true class
    # row 0 positive, rows 1-3 negative: w_pos = 4/2, w_neg = 4/6
    logits = np.stack([np.zeros(4), np.log(p / (1 - p))], 1)
    logits[1:] = logits[1:, ::-1]
    y = np.array([1, 0, 0, 0])
    hand = (2.0 * -np.log(0.8) + (4 / 6) * -(np.log(0.3) + np.log(0.6) + np.log(0.9))) / 4
    assert tr.reweighted_cls_loss(Tensor(logits), y).item() == pytest.approx(hand, abs=1e-12)


def test_reweighted_guards():
    assert np.isfinite(tr.reweighted_cls_loss(Tensor(np.zeros((3, 2))), [0, 0, 0]).item())
    assert tr.reweighted_cls_loss(Tensor(np.zeros((0, 2))), []).item() == 0.0


def _branch_inputs(rng, n_pos):
    anchors = np.array([[0, 0, 8, 8], [8, 8, 16, 16], [0, 8, 8, 16], [8, 0, 16, 8], [4, 4, 12, 12.0]])
    gt = anchors[:n_pos] if n_pos else np.zeros((0, 4))
    asg = [match_anchors(anchors, gt)]
    return Tensor(rng.normal(size=(1, 5, 2))), Tensor(rng.normal(size=(1, 5, 4))), asg


def test_branch_all_negative_only_cls():
    cls, loc, asg = _branch_inputs(np.random.default_rng(0), 0)
    terms = tr.mscnn_branch_loss(cls, loc, asg, 1.0, 0.5, lambda: Tensor(3.0))
    assert terms.conf > 0 and terms.loc == 0 and terms.domain == 0
    assert terms.total.item() == pytest.approx(terms.conf, abs=1e-15)


def test_branch_reduces_to_reweighted_ce():
    cls, loc, asg = _branch_inputs(np.random.default_rng(1), 2)
    terms = tr.mscnn_branch_loss(cls, loc, asg, 0.0, 0.0, lambda: Tensor(3.0))
    rows = np.concatenate([asg[0].positives, terms.mined[0]])
    labels = np.r_[np.ones(len(asg[0].positives), int), np.zeros(len(terms.mined[0]), int)]
    ref = tr.reweighted_cls_loss(cls.reshape(5, 2)[rows], labels).item()
    assert terms.total.item() == pytest.approx(ref, abs=1e-15)


def test_branch_gradient_and_recompose():
    rng = np.random.default_rng(2)
    cls, loc, asg = _branch_inputs(rng, 2)
    dom = Tensor(rng.normal(size=(2, 2)))
    mined = tr.mscnn_branch_loss(cls, loc, asg).mined

    def f():
        return tr.mscnn_branch_loss(cls, loc, asg, 1.0, 0.5, lambda: ad.domain_confusion_loss(dom), mined=mined)

    terms = f()
    assert terms.total.item() == pytest.approx(terms.recompose(), abs=1e-12)
    assert grad_check(lambda: f().total, [cls, loc, dom]).max_rel_error < 1e-4


def _terms(value, conf):
    from dadet.detector import LossTerms
    return LossTerms(Tensor(value), conf=conf, loc=(value - conf), loc_weight=1.0)


def test_total_loss_examples():
    a, b = _terms(2.0, 1.5), _terms(5.0, 1.0)
    total, rec = tr.mscnn_total_loss([a], [1.0])
    assert total.item() == 2.0 == rec
    total, rec = tr.mscnn_total_loss([a, b], [0.0, 0.0])
    assert total.item() == 0.0
    total, rec = tr.mscnn_total_loss([a, b], [0.5, 2.0], _terms(1.0, 1.0), 3.0, Tensor(0.25), 4.0)
    assert total.item() == 0.5 * 2 + 2 * 5 + 3 * 1 + 4 * 0.25 == rec
    with pytest.raises(ValueError, match="weights"):
        tr.mscnn_total_loss([a, b], [1.0])


@pytest.fixture(scope="module")
def subnet_run(toy):
    m = Detector(DetectorConfig(subnet=True), seed=6)
    data = tr.TrainData(m, *toy)
    before = tr.evaluate_branch_multibox(m, data)
    init_block1 = tr.snapshot(m, m.names(prefix="trunk.block1."))
    recompose = []
    sched = tr.ThreeStageSchedule()  # 200 / 200 / 100
    _, report = tr.mscnn_three_stage(m, data, sched, np.random.default_rng(3), check_frozen=True,
                                     recompose_log=recompose)
    return m, data, before, report, recompose, init_block1


def test_three_stage_freezing(subnet_run):
    _, _, _, report, _, _ = subnet_run
    assert [s for s, _ in report] == ["stage1", "stage2", "stage3"]
    assert all(ok for _, ok in report)


def test_three_stage_recomposition(subnet_run):
    recompose = subnet_run[4]
    assert len(recompose) == 500
    assert max(abs(a - b) for a, b in recompose) < 1e-12


def test_three_stage_loss_drops_30_percent(subnet_run):
    m, data, before = subnet_run[:3]
    assert tr.evaluate_branch_multibox(m, data) <= 0.7 * before


def test_three_stage_zero_steps_identity(toy):
    m = Detector(DetectorConfig(subnet=True), seed=6)
    before = checkpoint.dumps(m)
    tr.mscnn_three_stage(m, tr.TrainData(m, *toy), tr.ThreeStageSchedule(0, 0, 0, 0), np.random.default_rng(0))
    assert checkpoint.dumps(m) == before


def test_three_stage_needs_subnet(toy, model):
    with pytest.raises(ValueError, match="subnet"):
        tr.mscnn_three_stage(model, tr.TrainData(model, *toy), tr.ThreeStageSchedule(), np.random.default_rng(0))


# -- discrepancy joint training ----------------------------------------------


def test_joint_weight_zero_matches_pretrain(toy):
    runs = []
    for joint in (True, False):
        m = Detector(DetectorConfig(domain_blocks=()), seed=7)
        data = tr.TrainData(m, *toy)
        if joint:
            tr.discrepancy_joint_train(m, data, tr.JointSchedule(steps=10, weight=0.0), np.random.default_rng(1))
        else:
            tr.pretrain(m, data, 10, np.random.default_rng(1))
        runs.append(checkpoint.dumps(m))
    assert runs[0] == runs[1]


def _fixed_coral(m, data):
    from dadet.detector import multibox_loss
    from dadet.numerics import no_grad

    b = data.batch_from(data.source + data.target)
    with no_grad():
        p = m(b.images)
        mined = multibox_loss(p, b.assignments).mined
        return tr.batch_discrepancy(m, p, b, "coral", ad.KEEP_NEGATIVES, mined)[0].item()


@pytest.fixture(scope="module")
def pretrained_plain(toy):
    m = Detector(DetectorConfig(domain_blocks=()), seed=7)
    tr.pretrain(m, tr.TrainData(m, *toy), 150, np.random.default_rng(1))
    return m


def _continue(base, toy, weight):
    m = base.copy()
    data = tr.TrainData(m, *toy)
    if weight is None:
        tr.pretrain(m, data, 100, np.random.default_rng(2))
        return m, data, None
    _, res = tr.discrepancy_joint_train(m, data, tr.JointSchedule(steps=100, kind="coral", weight=weight),
                                        np.random.default_rng(2))
    return m, data, res


def test_joint_coral_decreases(pretrained_plain, toy):
    start = _fixed_coral(pretrained_plain, tr.TrainData(pretrained_plain, *toy))
    m, data, res = _continue(pretrained_plain, toy, 1.0)
    assert res.skipped == 0
    assert _fixed_coral(m, data) < start


def test_joint_coral_restrains_drift(pretrained_plain, toy):
    plain = _fixed_coral(*_continue(pretrained_plain, toy, None)[:2])
    joint = _fixed_coral(*_continue(pretrained_plain, toy, 0.1)[:2])
    assert joint < plain


@pytest.mark.parametrize("kind", ad.DISCREPANCY_KINDS)
def test_joint_all_kinds_run(toy, kind):
    m = Detector(DetectorConfig(domain_blocks=()), seed=7)
    _, res = tr.discrepancy_joint_train(m, tr.TrainData(m, *toy), tr.JointSchedule(steps=3, kind=kind),
                                        np.random.default_rng(0))
    assert len(res.discrepancy) == 3 and res.skipped == 0


def test_joint_skips_bad_batches(toy):
    m = Detector(DetectorConfig(domain_blocks=()), seed=7)
    # one scene per domain and abandon mode: coral needs two rows per domain at each block
    src = [s for s in toy[0] if len(s.boxes) == 1][:1]
    tgt = [s for s in toy[1] if len(s.boxes) == 1][:1]
    data = tr.TrainData(m, src, tgt)
    _, res = tr.discrepancy_joint_train(m, data, tr.JointSchedule(steps=4, kind="coral", batch_size=2,
                                                                  negatives=ad.ABANDON_NEGATIVES),
                                        np.random.default_rng(0))
    assert res.skipped > 0
