import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdebench.losses import (
    LossConfig,
    depth_region_loss,
    global_only,
    loss_grad_check,
    make_fixture,
    seg_loss,
    to_disparity,
    total_objective,
)
from fdebench.metrics import AlignmentParams
from fdebench.oracles import central_difference, relative_error


def test_to_disparity():
    out = to_disparity(np.array([2.0, 0.0, -1.0, 1e-4, np.nan]))
    assert out[0] == 0.5 and out[1] == out[2] == out[3] == 1000.0 and math.isnan(out[4])
    assert to_disparity(np.array([0.5]), floor=1.0)[0] == 1.0
    with pytest.raises(ValueError):
        to_disparity(np.ones(2), floor=0.0)


def test_depth_loss_zero_for_equal_inputs(rng):
    gt = rng.uniform(1, 3, size=(6, 6))
    value, grad = depth_region_loss(gt, gt, np.ones((6, 6), bool))
    assert value == 0.0 and np.all(grad == 0)


def test_constant_offset_gives_squared_offset():
    gt = np.arange(12.0).reshape(3, 4)
    region = np.ones((3, 4), bool)
    value, _ = depth_region_loss(gt + 0.3, gt, region, LossConfig(grad_weight=0.0))
    assert value == pytest.approx(0.09, abs=1e-15)
    # a constant residual has zero forward differences
    value, _ = depth_region_loss(gt + 0.3, gt, region, LossConfig(grad_weight=0.5))
    assert value == pytest.approx(0.09, abs=1e-15)


def test_hand_computed_2x2():
    pred = np.array([[1.0, 2.0], [3.0, 5.0]])
    # residual [[0,1],[2,4]]: MSE 21/4, pair diffs 1,2 (x) and 2,3 (y) -> mean 2
    value, _ = depth_region_loss(pred, np.ones((2, 2)), np.ones((2, 2), bool), LossConfig(grad_weight=0.5))
    assert value == pytest.approx(6.25, abs=1e-15)


def test_depth_loss_gradient_matches_finite_differences(rng):
    pred = rng.uniform(1, 3, size=(7, 7))
    gt = rng.uniform(1, 3, size=(7, 7))
    region = rng.random((7, 7)) < 0.6
    cfg = LossConfig(grad_weight=0.7)
    _, grad = depth_region_loss(pred, gt, region, cfg)
    x = pred.astype(np.longdouble)
    for idx in np.ndindex(x.shape):
        fd = central_difference(lambda: depth_region_loss(x, gt, region, cfg)[0], x, idx, 1e-7)
        assert relative_error(float(grad[idx]), float(fd)) < 1e-6 or abs(grad[idx] - fd) < 1e-12
    assert np.all(grad[~region] == 0)


def test_pairs_only_within_region():
    pred = np.array([[0.0, 10.0, 0.0]])
    gt = np.zeros((1, 3))
    region = np.array([[True, False, True]])
    value, grad = depth_region_loss(pred, gt, region, LossConfig(grad_weight=1.0))
    assert value == 0.0 and grad[0, 1] == 0.0


def test_empty_region():
    value, grad = depth_region_loss(np.ones((3, 3)), np.ones((3, 3)), np.zeros((3, 3), bool))
    assert value == 0.0 and not grad.any()


def test_seg_loss_examples():
    m = np.array([[1, 1], [0, 0]], bool)
    value, _ = seg_loss(1.0 - m.astype(float), m)
    assert value == pytest.approx(-math.log(1e-7) + 0.8, rel=1e-6)
    perfect, _ = seg_loss(m.astype(float), m)
    assert perfect < 1e-6
    half, _ = seg_loss(np.full((2, 2), 0.5), m)
    assert half == pytest.approx(math.log(2) + 1 - 3 / 5, abs=1e-12)
    with pytest.raises(ValueError, match="probabilities"):
        seg_loss(np.full((2, 2), 1.5), m)


def test_total_is_exact_sum_and_flags():
    pred, pm, gt, gm, valid = make_fixture(1)
    out = total_objective(pred, pm, gt, gm, valid)
    assert out.total == out.l_glb + out.l_fg + out.l_bd + out.l_seg
    assert out.counts["glb"] == valid.sum() and out.counts["fg"] == (gm & valid).sum()
    g = total_objective(pred, pm, gt, gm, valid, global_only())
    assert g.total == g.l_glb == out.l_glb
    assert g.l_fg == g.l_bd == g.l_seg == 0.0


def test_perfect_prediction_is_near_zero():
    _, _, gt, gm, valid = make_fixture(2)
    out = total_objective(np.nan_to_num(gt, nan=1.0), gm.astype(float), gt, gm, valid)
    assert out.total < 1e-4
    assert out.alignment.a == pytest.approx(1) and out.alignment.b == pytest.approx(0, abs=1e-12)


def test_gradient_zero_outside_valid():
    pred, pm, gt, gm, valid = make_fixture(3)
    out = total_objective(pred, pm, gt, gm, valid)
    assert np.all(out.grad_depth[~valid] == 0)


def test_grad_weight_and_disparity_change_totals():
    pred, pm, gt, gm, valid = make_fixture(4)
    base = total_objective(pred, pm, gt, gm, valid)
    assert total_objective(pred, pm, gt, gm, valid, LossConfig(grad_weight=0.0)).total < base.total
    disp = total_objective(pred, pm, gt, gm, valid, LossConfig(disparity_space=True))
    assert disp.total != base.total and disp.l_seg == base.l_seg


def test_pinned_alignment_is_used():
    pred, pm, gt, gm, valid = make_fixture(5)
    pinned = AlignmentParams(2.0, -1.0)
    assert total_objective(pred, pm, gt, gm, valid, alignment=pinned).alignment is pinned


@pytest.mark.parametrize("disparity", [False, True])
@pytest.mark.parametrize("seed", [0, 1])
def test_loss_grad_check(seed, disparity):
    report = loss_grad_check(seed=seed, config=LossConfig(disparity_space=disparity))
    assert report["passed"], report["max_rel_err"]
    assert set(report["max_rel_err"]) == {"l_glb", "l_fg", "l_bd", "l_seg", "total.depth", "total.mask"}


def test_shape_and_validity_errors():
    pred, pm, gt, gm, valid = make_fixture(0)
    with pytest.raises(ValueError, match="dimensions"):
        total_objective(pred[:-1], pm, gt, gm, valid)
    with pytest.raises(ValueError, match="no valid"):
        total_objective(pred, pm, gt, gm, np.zeros_like(valid))
    with pytest.raises(ValueError):
        LossConfig(grad_weight=-1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_losses_nonnegative(seed, weight):
    pred, pm, gt, gm, valid = make_fixture(seed, 10)
    out = total_objective(pred, pm, gt, gm, valid, LossConfig(grad_weight=weight, radius=2))
    assert min(out.l_glb, out.l_fg, out.l_bd, out.l_seg) >= 0.0
