"""Shared value types, range conventions and error classes.

Images live in one of two value ranges: ``storage01`` ([0, 1], what is read
from and written to disk) and ``model11`` ([-1, 1], what networks and losses
see). Attribution maps are differences of two model11 images and so live in
[-2, 2].
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import numpy as np

# float32 round-off of tanh outputs and resampled pixels
RANGE_TOL = 1e-6


class CxError(Exception):
    """Base class for every error raised by this package."""


class ContractError(CxError, ValueError):
    """A precondition on shapes, range tags or arguments was violated."""


class ConfigError(CxError, ValueError):
    pass


class DataError(CxError):
    """Input data could not be read or is inconsistent."""


class StateError(CxError):
    pass


class CheckpointError(StateError):
    pass


class SchemeError(StateError):
    """The model bundle does not provide what the caller asked for."""


class DomainError(ContractError):
    """Probabilities outside the open interval (0, 1) were passed to a log-loss."""


class MetricError(CxError, ValueError):
    """A metric is undefined for the given inputs (e.g. zero variance)."""


class RangeTag(str, enum.Enum):
    STORAGE01 = "storage01"
    MODEL11 = "model11"

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 1.0) if self is RangeTag.STORAGE01 else (-1.0, 1.0)


class Label(str, enum.Enum):
    POSITIVE = "positive"  # abnormal, c+
    NEGATIVE = "negative"  # normal, c-


def _frozen_array(data: Any, dtype=None) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image:
    """Single-channel 2D intensity grid tagged with its value range."""

    data: np.ndarray
    range_tag: RangeTag = RangeTag.STORAGE01

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 3 and arr.shape[-1] in (3, 4):
            arr = to_luminance(arr)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractError(f"image must be a non-empty 2D grid, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError("image contains non-finite values")
        tag = RangeTag(self.range_tag)
        lo, hi = tag.bounds
        if arr.min() < lo - RANGE_TOL or arr.max() > hi + RANGE_TOL:
            raise ContractError(
                f"{tag.value} image has values in [{arr.min():.6g}, {arr.max():.6g}]"
            )
        object.__setattr__(self, "data", _frozen_array(arr))
        object.__setattr__(self, "range_tag", tag)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class AttributionMap:
    """Signed additive discrepancy M(x+) in model11 units, values in [-2, 2]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim != 2:
            raise ContractError(f"attribution map must be 2D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("attribution map contains non-finite values")
        if arr.size and np.abs(arr).max() > 2.0 + RANGE_TOL:
            raise ContractError(f"attribution map values must lie in [-2, 2], max |M| = {np.abs(arr).max()}")
        object.__setattr__(self, "data", _frozen_array(arr))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ContractError(f"mask must be 2D, got shape {arr.shape}")
        object.__setattr__(self, "data", _frozen_array(arr != 0, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


GroundTruth = Union[AttributionMap, BinaryMask]


@dataclass(frozen=True)
class LabeledSample:
    image: Image
    label: Label
    ground_truth: Optional[GroundTruth] = None
    sample_id: str = ""
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        if self.ground_truth is not None and self.ground_truth.shape != self.image.shape:
            raise ContractError(
                f"ground truth shape {self.ground_truth.shape} != image shape {self.image.shape}"
            )

    def gt_mask(self) -> Optional[np.ndarray]:
        """Ground truth as a boolean support mask (nonzero effect = lesion)."""
        if self.ground_truth is None:
            return None
        return np.asarray(self.ground_truth.data) != 0


@dataclass(frozen=True)
class DatasetSplit:
    """Immutable train/test partition.

    ``transform``, when set, is applied per draw at training time
    (``transform(sample, rng) -> LabeledSample``) for augmented pipelines.
    """

    train: Sequence[LabeledSample]
    test: Sequence[LabeledSample]
    seed: int = 0
    transform: Optional[Callable[[LabeledSample, np.random.Generator], LabeledSample]] = None

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        train_ids = {s.sample_id for s in self.train}
        if train_ids & {s.sample_id for s in self.test}:
            raise ContractError("train and test splits share sample ids")

    def by_label(self, which: str, label: Label) -> list[LabeledSample]:
        return [s for s in getattr(self, which) if s.label is Label(label)]


@dataclass(frozen=True)
class LossWeights:
    lambda_cc: float = 10.0
    lambda_l1: float = 100.0

    def __post_init__(self):
        for name in ("lambda_cc", "lambda_l1"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


def to_luminance(arr: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of an (H, W, 3|4) array; alpha is dropped."""
    arr = np.asarray(arr, dtype=np.float64)
    return arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114


def to_model_range(img: Image) -> Image:
    if img.range_tag is not RangeTag.STORAGE01:
        raise ContractError(f"to_model_range expects storage01, got {img.range_tag.value}")
    return Image(np.clip(2.0 * img.data - 1.0, -1.0, 1.0), RangeTag.MODEL11)


def from_model_range(img: Image) -> Image:
    if img.range_tag is not RangeTag.MODEL11:
        raise ContractError(f"from_model_range expects model11, got {img.range_tag.value}")
    return Image(np.clip((img.data + 1.0) / 2.0, 0.0, 1.0), RangeTag.STORAGE01)


def require_model11(img: Image) -> Image:
    if img.range_tag is not RangeTag.MODEL11:
        raise ContractError(f"expected a model11 image, got {img.range_tag.value}")
    return img
