import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cxgan.core import BinaryMask, ContractError, Image, MetricError, RangeTag
from cxgan.metrics import dice, gaussian_window, iou, masked_ssim, ncc, non_resemblance, ssim

from oracles import (
    count_dice,
    count_iou,
    loop_masked_ssim,
    loop_ncc,
    loop_nonres,
    loop_ssim,
    rel_err,
)

N_INSTANCES = 200
TOL = 1e-9


def _random_mask(rng, shape=(8, 8)):
    return rng.random(shape) < rng.uniform(0.1, 0.9)


def _split_mask(rng, shape=(8, 8)):
    while True:
        m = _random_mask(rng, shape)
        if m.any() and not m.all():
            return m


def test_iou_examples():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    b = np.zeros((4, 4), bool)
    b[0, 2:4] = True
    b[1, 0:2] = True
    assert iou(a, b) == pytest.approx(2 / 6)
    assert iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 1.0


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[0] = True
    b = np.zeros((4, 4), bool)
    b[0, 2:] = True
    b[1, :2] = True
    assert dice(a, a) == 1.0
    assert dice(a, b) == pytest.approx(0.5)
    assert dice(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0


def test_mask_shape_mismatch():
    with pytest.raises(ContractError):
        iou(np.zeros((2, 2), bool), np.zeros((3, 2), bool))
    with pytest.raises(ContractError):
        dice(BinaryMask(np.zeros((2, 2), bool)), BinaryMask(np.zeros((2, 3), bool)))


def test_iou_dice_match_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(N_INSTANCES):
        a, b = _random_mask(rng), _random_mask(rng)
        assert rel_err(iou(a, b), count_iou(a.tolist(), b.tolist())) <= TOL
        assert rel_err(dice(a, b), count_dice(a.tolist(), b.tolist())) <= TOL


def test_dice_iou_identity_on_1000_pairs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a, b = _random_mask(rng, (6, 7)), _random_mask(rng, (6, 7))
        j = iou(a, b)
        assert dice(a, b) == pytest.approx(2 * j / (1 + j), abs=1e-12)
        assert j <= dice(a, b) + 1e-15


def test_ncc_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(N_INSTANCES):
        a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        assert rel_err(ncc(a, b), loop_ncc(a.tolist(), b.tolist())) <= TOL


def test_ncc_examples():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(8, 8))
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, -a) == pytest.approx(-1.0)
    assert ncc(a, 3 * a + 7) == pytest.approx(1.0)


def test_ncc_zero_variance_is_error():
    with pytest.raises(MetricError):
        ncc(np.ones((4, 4)), np.arange(16.0).reshape(4, 4))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(-10, 10)),
       arrays(np.float64, (5, 5), elements=st.floats(-10, 10)),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_ncc_properties(a, b, scale, shift):
    if a.std() < 1e-3 or b.std() < 1e-3:
        return
    r = ncc(a, b)
    assert -1.0 <= r <= 1.0
    assert ncc(b, a) == pytest.approx(r, abs=1e-9)
    assert ncc(scale * a + shift, b) == pytest.approx(r, abs=1e-6)
    assert ncc(-a, b) == pytest.approx(-r, abs=1e-9)


def test_non_resemblance_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(N_INSTANCES):
        x, ci, gt = rng.random((8, 8)), rng.random((8, 8)), _split_mask(rng)
        for literal in (False, True):
            got = non_resemblance(x, ci, gt, mode="literal" if literal else "absolute")
            want = loop_nonres(x.tolist(), ci.tolist(), gt.tolist(), literal)
            for g, w in zip(got, want):
                assert rel_err(g, w) <= TOL


def test_non_resemblance_examples():
    rng = np.random.default_rng(5)
    x = rng.random((6, 6)) * 0.5
    gt = np.zeros((6, 6), bool)
    gt[1:3, 1:3] = True
    assert non_resemblance(x, x, gt) == (0.0, 0.0, 0.0)
    assert non_resemblance(x, x, gt, mode="literal") == (1.0, 1.0, 1.0)
    ci = x + 0.2 * gt
    les, nor, tot = non_resemblance(x, ci, gt)
    assert (les, nor, tot) == pytest.approx((0.2, 0.0, 0.1))


def test_non_resemblance_total_relation_on_printed_values():
    # the total column is the mean of the two region scores: (0.67 + 0.33) / 2 = 0.50
    assert (0.67 + 0.33) / 2 == pytest.approx(0.50, abs=1e-12)


def test_non_resemblance_model11_images_are_scored_in_storage_units():
    x = np.full((4, 4), 0.25)
    ci = x.copy()
    gt = np.zeros((4, 4), bool)
    gt[0, 0] = True
    ci[0, 0] = 0.75
    xi = Image(2 * x - 1, RangeTag.MODEL11)
    ci_i = Image(2 * ci - 1, RangeTag.MODEL11)
    assert non_resemblance(xi, ci_i, gt) == pytest.approx(non_resemblance(x, ci, gt))


def test_non_resemblance_errors():
    x = np.zeros((3, 3))
    with pytest.raises(MetricError):
        non_resemblance(x, x, np.zeros((3, 3), bool))
    with pytest.raises(MetricError):
        non_resemblance(x, x, np.ones((3, 3), bool))
    with pytest.raises(ContractError):
        non_resemblance(x, np.zeros((3, 4)), np.ones((3, 3), bool))


def test_gaussian_window_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0)
    assert w[5, 5] == w.max()


def test_ssim_matches_loop_oracle_on_8x8():
    # an 11 px window does not fit 8x8 grids; the formula is checked with a 7 px window there
    rng = np.random.default_rng(6)
    for _ in range(N_INSTANCES):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        got = ssim(a, b, window=7)
        assert rel_err(got, loop_ssim(a.tolist(), b.tolist(), window=7)) <= TOL
        gt = _split_mask(rng)
        got = masked_ssim(a, b, gt, window=7)
        assert rel_err(got, loop_masked_ssim(a.tolist(), b.tolist(), gt.tolist(), window=7)) <= TOL


def test_ssim_matches_loop_oracle_default_window():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a, b = rng.random((14, 13)), rng.random((14, 13))
        assert rel_err(ssim(a, b), loop_ssim(a.tolist(), b.tolist())) <= TOL


def test_ssim_examples():
    rng = np.random.default_rng(8)
    a = rng.random((32, 32))
    assert ssim(a, a) == pytest.approx(1.0)
    checker = (np.indices((32, 32)).sum(0) % 2).astype(float)
    assert ssim(checker, 1 - checker) < 0.5
    vals = [ssim(rng.random((32, 32)), rng.random((32, 32))) for _ in range(100)]
    assert abs(np.mean(vals)) < 0.1


def test_ssim_window_larger_than_image():
    with pytest.raises(MetricError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_masked_ssim_examples():
    rng = np.random.default_rng(9)
    x = rng.random((24, 24))
    gt = np.zeros((24, 24), bool)
    gt[5:10, 5:10] = True
    assert masked_ssim(x, x, gt) == pytest.approx(1.0)
    y = x.copy()
    y[gt] = rng.random(gt.sum())
    assert masked_ssim(x, y, gt) == pytest.approx(1.0)


def test_masked_ssim_depends_only_on_outside_pixels():
    rng = np.random.default_rng(10)
    x, y = rng.random((20, 20)), rng.random((20, 20))
    gt = _split_mask(rng, (20, 20))
    base = masked_ssim(x, y, gt)
    x2, y2 = x.copy(), y.copy()
    x2[gt] = rng.random(gt.sum())
    y2[gt] = rng.random(gt.sum())
    assert masked_ssim(x2, y2, gt) == base
    assert math.isfinite(base)
