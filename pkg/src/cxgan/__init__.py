"""Counterfactual explanation maps from cycle-consistent GANs."""

from .core import (
    AttributionMap,
    BinaryMask,
    DatasetSplit,
    Image,
    Label,
    LabeledSample,
    LossWeights,
    RangeTag,
)
from .nets import ModelBundle, Scheme

__version__ = "0.1.0"

__all__ = [
    "AttributionMap",
    "BinaryMask",
    "DatasetSplit",
    "Image",
    "Label",
    "LabeledSample",
    "LossWeights",
    "ModelBundle",
    "RangeTag",
    "Scheme",
]
