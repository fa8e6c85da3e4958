import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dadet import boxes as bx
from dadet.detector import (
    NEGATIVE, POSITIVE, Detector, DetectorConfig, PredictionSet, build_anchors, hard_negative_mining,
    match_anchors, mining_quota, multibox_loss,
)
from dadet.numerics import Tensor, backward, grad_check

from conftest import brute_iou, random_boxes
from oracles import match_oracle, mining_oracle, nms_oracle, raster_iou


# -- anchors ------------------------------------------------------------------


def test_default_anchor_count():
    assert len(build_anchors(DetectorConfig())) == 8 * 8 * 3 + 4 * 4 * 3 == 240


def test_single_centered_anchor():
    cfg = DetectorConfig(image_size=(8, 8), trunk_channels=(4, 4), detect_blocks=(2,), anchor_sizes=(6.0,),
                         aspect_ratios=(1.0,), domain_blocks=())
    grid = build_anchors(cfg)
    assert len(grid) == 1
    assert np.allclose(grid.boxes[0], [1, 1, 7, 7])


@pytest.mark.parametrize("blocks,ratios", [((1,), (1.0,)), ((1, 3), (1.0, 2.0)), ((2, 3), (1.0, 0.5, 2.0))])
def test_anchor_count_recount(blocks, ratios):
    cfg = DetectorConfig(detect_blocks=blocks, anchor_sizes=tuple(8.0 * b for b in blocks), aspect_ratios=ratios,
                         domain_blocks=())
    grid = build_anchors(cfg)
    count, centres = 0, []
    for b in blocks:
        stride = 2 ** (b + 1)
        for i in range(64 // stride):
            for j in range(64 // stride):
                for _ in ratios:
                    count += 1
                    centres.append(((j + 0.5) * stride, (i + 0.5) * stride))
    assert len(grid) == count
    got = np.stack([(grid.boxes[:, 0] + grid.boxes[:, 2]) / 2, (grid.boxes[:, 1] + grid.boxes[:, 3]) / 2], 1)
    assert np.allclose(got, centres)


def test_indivisible_dims_rejected():
    with pytest.raises(ValueError, match="divisible"):
        build_anchors(DetectorConfig(), dims=(60, 64))


@pytest.mark.parametrize("kwargs,field", [
    ({"detect_blocks": ()}, "detect_blocks"),
    ({"neg_pos_ratio": 0.5}, "neg_pos_ratio"),
    ({"match_threshold": 1.0}, "match_threshold"),
    ({"domain_blocks": (1,)}, "domain_blocks"),
])
def test_config_invariants(kwargs, field):
    with pytest.raises(ValueError, match=field):
        DetectorConfig(**kwargs)


# -- iou ----------------------------------------------------------------------


def test_iou_examples():
    assert bx.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert bx.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert bx.iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert abs(raster_iou((0, 0, 2, 2), (1, 1, 3, 3), 0.002) - 1 / 7) < 1e-6


def test_iou_degenerate_is_zero():
    assert bx.iou((1, 1, 1, 4), (0, 0, 5, 5)) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_boxes(rng, 5), random_boxes(rng, 7)
    m = bx.iou_matrix(a, b)
    assert np.array_equal(m, bx.iou_matrix(b, a).T)
    assert np.all((m >= 0) & (m <= 1))
    assert np.allclose(np.diag(bx.iou_matrix(a, a)), 1.0)


# -- encode / decode ----------------------------------------------------------


def test_encode_identity_and_shift():
    a = np.array([10.0, 10.0, 26.0, 18.0])
    assert np.array_equal(bx.encode(a, a), np.zeros(4))
    off = bx.encode(a, a + [1, 0, 1, 0])
    assert np.allclose(off, [1 / 16, 0, 0, 0], atol=1e-15)


def test_round_trip_1000_pairs():
    rng = np.random.default_rng(0)
    anchors, gt = random_boxes(rng, 1000, min_wh=2), random_boxes(rng, 1000, min_wh=2)
    back = bx.decode(anchors, bx.encode(anchors, gt))
    assert np.max(np.abs(back - gt)) < 1e-10


# -- matching -----------------------------------------------------------------


def test_identical_anchor_is_positive():
    grid = build_anchors(DetectorConfig())
    asg = match_anchors(grid, grid.boxes[17:18])
    assert asg.labels[17] == POSITIVE and asg.matched[17] == 0


def test_empty_gt_all_negative():
    asg = match_anchors(build_anchors(DetectorConfig()), np.zeros((0, 4)))
    assert np.all(asg.labels == NEGATIVE) and len(asg.positives) == 0


@pytest.mark.parametrize("seed", range(5))
def test_match_against_double_loop(seed):
    rng = np.random.default_rng(seed)
    anchors, gt = random_boxes(rng, 50, max_wh=25), random_boxes(rng, 3, max_wh=25)
    asg = match_anchors(anchors, gt, 0.5)
    labels, matched = match_oracle(anchors, gt, 0.5)
    assert np.array_equal(asg.labels, labels)
    assert np.array_equal(asg.matched, matched)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_every_gt_has_a_positive(seed, n_gt):
    rng = np.random.default_rng(seed)
    anchors = random_boxes(rng, 30)
    asg = match_anchors(anchors, random_boxes(rng, n_gt), 0.5)
    assert set(asg.matched[asg.positives]) == set(range(n_gt))
    assert not np.any((asg.labels == POSITIVE) & (asg.labels == NEGATIVE))


# -- mining -------------------------------------------------------------------


def test_mining_five_positives():
    labels = np.array([POSITIVE] * 5 + [NEGATIVE] * 100, dtype=np.int8)
    losses = np.random.default_rng(0).random(105)
    assert len(hard_negative_mining(losses, labels, 3.0)) == 15


def test_mining_zero_positives_floor():
    labels = np.full(20, NEGATIVE, dtype=np.int8)
    assert len(hard_negative_mining(np.ones(20), labels, 3.0)) == 3
    assert mining_quota(2, 0, 3.0) == 2


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.0, 5.0))
def test_mining_matches_full_sort(seed, ratio):
    rng = np.random.default_rng(seed)
    labels = rng.choice([POSITIVE, NEGATIVE, NEGATIVE, NEGATIVE, -1], size=40).astype(np.int8)
    losses = rng.integers(0, 5, 40).astype(float)  # many ties
    got = hard_negative_mining(losses, labels, ratio)
    assert sorted(got.tolist()) == mining_oracle(losses, labels, ratio)
    assert len(got) <= ratio * max(1, np.count_nonzero(labels == POSITIVE))


# -- multibox -----------------------------------------------------------------


def _batch(rng, n_img=2):
    grid = build_anchors(DetectorConfig())
    asg = [match_anchors(grid, random_boxes(rng, 2, min_wh=10)) for _ in range(n_img)]
    cls = Tensor(rng.normal(size=(n_img, len(grid), 2)))
    loc = Tensor(rng.normal(0, 0.3, size=(n_img, len(grid), 4)))
    return cls, loc, asg


def test_multibox_no_positives_is_zero():
    grid = build_anchors(DetectorConfig())
    cls = Tensor(np.random.default_rng(0).normal(size=(1, len(grid), 2)), requires_grad=True)
    loc = Tensor(np.zeros((1, len(grid), 4)), requires_grad=True)
    terms = multibox_loss(PredictionSet(cls, loc), [match_anchors(grid, np.zeros((0, 4)))])
    backward(terms.total)
    assert terms.total.item() == 0.0 and terms.n_pos == 0
    assert not cls.grad.any() and not loc.grad.any()


def test_multibox_perfect_predictions_vanish():
    rng = np.random.default_rng(1)
    cls, loc, asg = _batch(rng, 1)
    logits = np.zeros(cls.shape)
    logits[0, :, 0] = 40.0
    logits[0, asg[0].positives, 0] = 0.0
    logits[0, asg[0].positives, 1] = 40.0
    terms = multibox_loss(PredictionSet(Tensor(logits), Tensor(asg[0].targets[None])), asg)
    assert terms.total.item() < 1e-12


def test_multibox_decomposition_and_ratio():
    cls, loc, asg = _batch(np.random.default_rng(2))
    terms = multibox_loss(PredictionSet(cls, loc), asg, alpha=0.7)
    assert terms.total.item() == pytest.approx(terms.recompose(), rel=1e-12)
    assert terms.norm == sum(len(a.positives) for a in asg)
    for a, m in zip(asg, terms.mined):
        assert len(m) <= 3 * max(1, len(a.positives))
        assert set(m) <= set(a.negatives)


def test_multibox_gradient_fixed_batch():
    rng = np.random.default_rng(3)
    grid = build_anchors(DetectorConfig(detect_blocks=(3,), anchor_sizes=(32.0,), domain_blocks=()))
    asg = [match_anchors(grid, random_boxes(rng, 1, min_wh=20)) for _ in range(2)]
    cls = Tensor(rng.normal(size=(2, len(grid), 2)))
    loc = Tensor(rng.normal(0, 0.3, size=(2, len(grid), 4)))
    mined = multibox_loss(PredictionSet(cls, loc), asg).mined
    report = grad_check(lambda: multibox_loss(PredictionSet(cls, loc), asg, mined=mined).total, [cls, loc])
    assert report.ok and report.max_rel_error < 1e-4


# -- inference ----------------------------------------------------------------


def test_infer_threshold_one_is_empty(model):
    img = np.random.default_rng(0).random((64, 64))
    assert model.infer(img, conf_threshold=1.0) == []


def test_infer_deterministic_and_clipped(model):
    img = np.random.default_rng(0).random((64, 64))
    a, b = model.infer(img, 0.3), model.infer(img, 0.3)
    assert [(d.box.tolist(), d.score) for d in a] == [(d.box.tolist(), d.score) for d in b]
    for d in a:
        assert 0 <= d.box[0] <= d.box[2] <= 64 and 0 <= d.box[1] <= d.box[3] <= 64
        assert 0.3 < d.score <= 1


def test_infer_dim_mismatch(model):
    with pytest.raises(ValueError, match="dims"):
        model.infer(np.zeros((32, 32)))


def test_nms_single_box_unchanged():
    assert bx.nms(np.array([[1.0, 2, 3, 4]]), np.array([0.7]), 0.45).tolist() == [0]


@pytest.mark.parametrize("seed", range(10))
def test_nms_matches_quadratic_reference(seed):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, 10, size=30.0, min_wh=4, max_wh=16)
    scores = rng.random(10)
    assert bx.nms(boxes, scores, 0.45).tolist() == nms_oracle(boxes, scores, 0.45)


def test_forward_shapes(model):
    preds = model.forward(np.zeros((3, 64, 64)))
    assert preds.cls_logits.shape == (3, 240, 2)
    assert preds.loc.shape == (3, 240, 4)
    assert {b: d.shape for b, d in preds.domain_logits.items()} == {2: (3, 64, 2), 3: (3, 16, 2)}


def test_parameter_groups():
    m = Detector(DetectorConfig(subnet=True), seed=0)
    assert set(m.partition()) == {"repre", "loc_conf", "domain", "subnet"}
    assert all(n.startswith("trunk.") for n in m.names("repre"))
