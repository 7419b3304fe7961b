import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cxgan.core import (
    AttributionMap,
    BinaryMask,
    ConfigError,
    ContractError,
    DatasetSplit,
    Image,
    Label,
    LabeledSample,
    LossWeights,
    RangeTag,
    from_model_range,
    to_luminance,
    to_model_range,
)


def _const(v, tag=RangeTag.STORAGE01):
    return Image(np.full((2, 2), v), tag)


@pytest.mark.parametrize("value, expected", [(0.0, -1.0), (1.0, 1.0), (0.25, -0.5)])
def test_to_model_range_examples(value, expected):
    out = to_model_range(_const(value))
    assert out.range_tag is RangeTag.MODEL11
    assert np.all(out.data == expected)


@pytest.mark.parametrize("value, expected", [(-1.0, 0.0), (1.0, 1.0), (-0.5, 0.25)])
def test_from_model_range_examples(value, expected):
    out = from_model_range(_const(value, RangeTag.MODEL11))
    assert out.range_tag is RangeTag.STORAGE01
    assert np.all(out.data == expected)


def test_wrong_tag_rejected():
    with pytest.raises(ContractError):
        to_model_range(_const(0.0, RangeTag.MODEL11))
    with pytest.raises(ContractError):
        from_model_range(_const(0.5))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.floats(0.0, 1.0)))
def test_round_trip(x):
    back = from_model_range(to_model_range(Image(x)))
    assert np.max(np.abs(back.data - x)) <= 1e-7


def test_image_invariants():
    with pytest.raises(ContractError):
        Image(np.array([[0.0, 1.5]]))
    with pytest.raises(ContractError):
        Image(np.array([[np.nan]]))
    with pytest.raises(ContractError):
        Image(np.zeros((0, 3)))
    with pytest.raises(ContractError):
        Image(np.zeros(4))
    # model11 admits negatives
    assert Image(np.array([[-1.0, 1.0]]), RangeTag.MODEL11).shape == (1, 2)


def test_image_is_immutable():
    src = np.zeros((2, 2))
    img = Image(src)
    src[0, 0] = 1.0
    assert img.data[0, 0] == 0.0
    with pytest.raises(ValueError):
        img.data[0, 0] = 1.0


def test_rgb_becomes_luminance():
    rgb = np.zeros((3, 3, 3))
    rgb[..., 1] = 1.0
    img = Image(rgb)
    assert img.shape == (3, 3)
    assert np.allclose(img.data, 0.587)
    assert np.allclose(to_luminance(np.ones((1, 1, 4))), 1.0)


def test_attribution_map_bounds():
    AttributionMap(np.full((2, 2), 2.0))
    AttributionMap(np.full((2, 2), -2.0))
    with pytest.raises(ContractError):
        AttributionMap(np.full((2, 2), 2.1))


def test_binary_mask_casts_to_bool():
    m = BinaryMask(np.array([[0, 3], [0.5, 0]]))
    assert m.data.dtype == bool
    assert m.data.tolist() == [[False, True], [True, False]]


def test_sample_gt_shape_checked():
    img = Image(np.zeros((4, 4)))
    with pytest.raises(ContractError):
        LabeledSample(img, Label.POSITIVE, AttributionMap(np.zeros((3, 4))))
    s = LabeledSample(img, "positive", AttributionMap(np.eye(4) * 0.5))
    assert s.label is Label.POSITIVE
    assert s.gt_mask().sum() == 4


def test_split_disjoint():
    img = Image(np.zeros((2, 2)))
    a = LabeledSample(img, Label.NEGATIVE, sample_id="a")
    b = LabeledSample(img, Label.POSITIVE, sample_id="b")
    split = DatasetSplit([a], [b])
    assert split.by_label("train", Label.NEGATIVE) == [a]
    with pytest.raises(ContractError):
        DatasetSplit([a], [a])


def test_loss_weights_validated():
    assert LossWeights().lambda_cc == 10.0
    assert LossWeights(0, 0).lambda_l1 == 0.0
    for bad in (-1.0, float("inf"), float("nan")):
        with pytest.raises(ConfigError):
            LossWeights(lambda_cc=bad)
