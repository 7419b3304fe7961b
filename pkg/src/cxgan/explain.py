"""Inference: attribution maps, counterfactual instances and binary masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
import torch

from .core import (
    AttributionMap,
    BinaryMask,
    ContractError,
    Image,
    Label,
    RangeTag,
    SchemeError,
    require_model11,
)
from .nets import ModelBundle, Scheme

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class Explanation:
    source: Image
    map: AttributionMap
    counterfactual: Image
    counterfactual_unclipped: np.ndarray
    mask: BinaryMask
    threshold_fraction: float
    meta: dict = field(default_factory=dict)


def _device_of(net) -> torch.device:
    return next(net.parameters()).device


def _batch(images: Sequence[Image]) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(require_model11(im).data, dtype=np.float32)
                                      for im in images]))[:, None]


def attribution_maps(bundle: ModelBundle, images: Sequence[Image], batch_size: int = 64) -> list[AttributionMap]:
    """M(x+) for a list of model11 images, via the bundle's map generator."""
    if not bundle.has_map_generator:
        raise SchemeError(
            "cascaded_ci bundles have no map generator; derive a map by subtraction "
            "(subtraction_maps) or train the residual phase"
        )
    G = bundle.forward_generator
    for im in images:
        if tuple(im.shape) != (bundle.input_size, bundle.input_size):
            raise ContractError(f"bundle expects {bundle.input_size}x{bundle.input_size} inputs, got {im.shape}")
    was_training = G.training
    G.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                m = G(_batch(images[i:i + batch_size]).to(_device_of(G)))[:, 0].double().cpu().numpy()
                out.extend(AttributionMap(a) for a in m)
    finally:
        G.train(was_training)
    return out


def attribution_map(bundle: ModelBundle, x_pos: Image) -> AttributionMap:
    return attribution_maps(bundle, [x_pos])[0]


def subtraction_maps(bundle: ModelBundle, images: Sequence[Image], batch_size: int = 64) -> list[AttributionMap]:
    """G^{c+->c-}(x+) - x+ for a cascaded_ci bundle (thresholding left to the caller)."""
    if bundle.scheme is not Scheme.CASCADED_CI:
        raise SchemeError(f"subtraction maps need a cascaded_ci bundle, got {bundle.scheme.value}")
    G = bundle.forward_generator
    was_training = G.training
    G.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                x = _batch(images[i:i + batch_size]).to(_device_of(G))
                out.extend(AttributionMap(a) for a in (G(x) - x)[:, 0].double().cpu().numpy())
    finally:
        G.train(was_training)
    return out


def maps_for(bundle: ModelBundle, images: Sequence[Image]) -> list[AttributionMap]:
    if bundle.has_map_generator:
        return attribution_maps(bundle, images)
    return subtraction_maps(bundle, images)


def exact_map(source: np.ndarray, map_: np.ndarray) -> np.ndarray:
    """Round ``map_`` to fl((source + map_) - source).

    The rounded map differs from the input by at most one ulp of the sum and
    satisfies (source + m) - source == m bit-exactly, so the unclipped
    counterfactual carries the map without loss.
    """
    return (source + map_) - source


def counterfactual(x_pos: Image, map_: AttributionMap) -> tuple[Image, np.ndarray]:
    """x- = x+ + M(x+); returns (clipped model11 Image, exact unclipped sum)."""
    require_model11(x_pos)
    if x_pos.shape != map_.shape:
        raise ContractError(f"image shape {x_pos.shape} != map shape {map_.shape}")
    unclipped = x_pos.data + map_.data
    return Image(np.clip(unclipped, -1.0, 1.0), RangeTag.MODEL11), unclipped


def binarize(map_: AttributionMap, threshold_fraction: float = DEFAULT_THRESHOLD,
             absolute: bool = True) -> BinaryMask:
    """Pixels reaching ``threshold_fraction`` of the map's peak.

    With ``absolute`` (default) the rule is |M| >= t * max|M|; otherwise the
    signed map is compared against t * max(M).
    """
    if not 0 < threshold_fraction <= 1:
        raise ContractError(f"threshold_fraction must lie in (0, 1], got {threshold_fraction}")
    m = np.asarray(map_.data if hasattr(map_, "data") else map_, dtype=np.float64)
    v = np.abs(m) if absolute else m
    peak = v.max()
    if peak <= 0:
        return BinaryMask(np.zeros(m.shape, dtype=bool))
    return BinaryMask(v >= threshold_fraction * peak)


def explain(bundle: ModelBundle, x_pos: Image, threshold_fraction: float = DEFAULT_THRESHOLD,
            label: Optional[Label] = None, absolute: bool = True) -> Explanation:
    """Map, counterfactual and mask for one model11 image.

    ``label`` is informational only: a negative-class input still gets a map,
    flagged as off-label in ``meta``.
    """
    m = maps_for(bundle, [x_pos])[0]
    return _assemble(x_pos, m, threshold_fraction, label, absolute, bundle.scheme)


def explain_many(bundle: ModelBundle, images: Sequence[Image], threshold_fraction: float = DEFAULT_THRESHOLD,
                 labels: Optional[Sequence[Optional[Label]]] = None, absolute: bool = True) -> list[Explanation]:
    maps = maps_for(bundle, images)
    labels = labels or [None] * len(images)
    return [_assemble(x, m, threshold_fraction, lab, absolute, bundle.scheme)
            for x, m, lab in zip(images, maps, labels)]


def _assemble(x_pos: Image, m: AttributionMap, t: float, label, absolute: bool, scheme: Scheme) -> Explanation:
    m = AttributionMap(exact_map(x_pos.data, m.data))
    cf, unclipped = counterfactual(x_pos, m)
    meta: dict[str, Any] = {"scheme": scheme.value, "absolute_threshold": absolute}
    if label is not None and Label(label) is Label.NEGATIVE:
        meta["off_label"] = True
    if scheme is Scheme.CASCADED_CI:
        meta["map_source"] = "subtraction"
    return Explanation(x_pos, m, cf, unclipped, binarize(m, t, absolute), t, meta)
