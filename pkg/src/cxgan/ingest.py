"""Loading image folders from disk plus the CXR / BraTS preprocessing pipelines."""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image as PILImage

from .core import BinaryMask, ConfigError, DataError, DatasetSplit, Image, Label, LabeledSample, RangeTag
from .imgio import read_mask, read_png01, write_f32

log = logging.getLogger(__name__)

TRAIN_FRACTION = 0.8
ZSCORE_CLIP = 3.0

RngLike = Union[np.random.Generator, int, None]


class Pipeline(str, enum.Enum):
    CXR = "cxr"
    BRATS = "brats"
    NONE = "none"


class Normalize(str, enum.Enum):
    ZSCORE = "zscore"
    UNIT01 = "unit01"


@dataclass(frozen=True)
class DatasetLayout:
    root: Path
    positive_dir: str = "positive"
    negative_dir: str = "negative"
    mask_dir: Optional[str] = None
    pattern: str = "*.png"

    def class_dir(self, label: Label) -> Path:
        return Path(self.root) / (self.positive_dir if label is Label.POSITIVE else self.negative_dir)


@dataclass(frozen=True)
class PreprocessConfig:
    """Preprocessing knobs.

    ``target_size`` is the resize target (527 for CXR, 256 for BraTS).
    ``random_crop_margin`` is the crop slack: CXR crops a window of
    ``target_size - margin`` out of the resized image, BraTS augmentation
    upsizes to ``target_size + margin`` and crops back to ``target_size``.
    ``output_size`` optionally resizes the result to the network input size.
    """

    pipeline: Pipeline = Pipeline.NONE
    target_size: int = 256
    border_crop: int = 0
    random_crop_margin: int = 0
    normalize: Normalize = Normalize.UNIT01
    augment: bool = False
    output_size: Optional[int] = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "pipeline", Pipeline(self.pipeline))
            object.__setattr__(self, "normalize", Normalize(self.normalize))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.target_size <= 0:
            raise ConfigError(f"target_size must be positive, got {self.target_size}")
        if self.border_crop < 0 or self.random_crop_margin < 0:
            raise ConfigError("border_crop and random_crop_margin must be nonnegative")
        if self.target_size <= 2 * self.border_crop:
            raise ConfigError(f"target_size {self.target_size} must exceed 2*border_crop ({2 * self.border_crop})")
        if self.random_crop_margin >= self.target_size:
            raise ConfigError(f"random_crop_margin {self.random_crop_margin} must be < target_size {self.target_size}")
        if self.output_size is not None and self.output_size <= 0:
            raise ConfigError(f"output_size must be positive, got {self.output_size}")

    @classmethod
    def cxr(cls, augment: bool = True, output_size: Optional[int] = None) -> "PreprocessConfig":
        return cls(Pipeline.CXR, 527, 25, 15, Normalize.ZSCORE, augment, output_size)

    @classmethod
    def brats(cls, augment: bool = True, output_size: Optional[int] = None) -> "PreprocessConfig":
        return cls(Pipeline.BRATS, 256, 0, 30, Normalize.UNIT01, augment, output_size)


def _rng(rng_state: RngLike) -> np.random.Generator:
    return rng_state if isinstance(rng_state, np.random.Generator) else np.random.default_rng(rng_state)


def resize(arr: np.ndarray, size: int, nearest: bool = False) -> np.ndarray:
    """Bilinear (or nearest for masks) resize of a 2D grid to ``size`` x ``size``."""
    if arr.shape == (size, size):
        return np.array(arr, copy=True)
    if nearest:
        im = PILImage.fromarray(np.asarray(arr, dtype=np.uint8))
        return np.asarray(im.resize((size, size), PILImage.NEAREST))
    im = PILImage.fromarray(np.asarray(arr, dtype=np.float32), mode="F")
    return np.asarray(im.resize((size, size), PILImage.BILINEAR), dtype=np.float64)


def zscore01(arr: np.ndarray) -> np.ndarray:
    """Standardize, clip to +-3 std and map affinely into [0, 1]; constant input gives 0.5."""
    std = arr.std()
    if std <= 0 or not np.isfinite(std):
        log.warning("zero-variance image in z-score normalization; emitting constant 0.5")
        return np.full(arr.shape, 0.5)
    z = np.clip((arr - arr.mean()) / std, -ZSCORE_CLIP, ZSCORE_CLIP)
    return (z + ZSCORE_CLIP) / (2 * ZSCORE_CLIP)


def minmax01(arr: np.ndarray) -> np.ndarray:
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        log.warning("degenerate (min == max) image in min-max normalization; emitting constant 0.5")
        return np.full(arr.shape, 0.5)
    return (arr - lo) / (hi - lo)


def _crop(a: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    return a[top:top + size, left:left + size]


def _normalize(arr: np.ndarray, how: Normalize) -> np.ndarray:
    return zscore01(arr) if how is Normalize.ZSCORE else minmax01(arr)


def _finish(arr, mask, cfg: PreprocessConfig, flip: bool):
    if flip:
        arr = arr[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
    if cfg.output_size is not None:
        arr = np.clip(resize(arr, cfg.output_size), 0.0, 1.0)
        mask = None if mask is None else resize(mask, cfg.output_size, nearest=True)
    img = Image(np.ascontiguousarray(arr), RangeTag.STORAGE01)
    return img, (None if mask is None else np.ascontiguousarray(mask) > 0)


def _as_array(img: Union[Image, np.ndarray]) -> np.ndarray:
    return np.asarray(img.data if isinstance(img, Image) else img, dtype=np.float64)


def preprocess_cxr_pair(img, mask, cfg: PreprocessConfig, rng_state: RngLike = None):
    """CXR pipeline on an image and an optional aligned mask; returns (Image, mask or None).

    Border crop, resize to ``target_size``, crop a ``target_size - margin``
    window (random origin when augmenting, centred otherwise), z-score into
    [0, 1], then a horizontal flip with probability 0.5 when augmenting.
    """
    if cfg.pipeline is not Pipeline.CXR:
        raise ConfigError(f"preprocess_cxr needs pipeline=cxr, got {cfg.pipeline.value}")
    a = _as_array(img)
    b = cfg.border_crop
    if min(a.shape) < 2 * b + 2:
        raise DataError(f"image {a.shape} too small for border crop {b}")
    rng = _rng(rng_state)
    m = None if mask is None else np.asarray(mask, dtype=np.uint8)
    a = resize(a[b:a.shape[0] - b, b:a.shape[1] - b], cfg.target_size)
    if m is not None:
        m = resize(m[b:m.shape[0] - b, b:m.shape[1] - b], cfg.target_size, nearest=True)
    margin = cfg.random_crop_margin
    if cfg.augment:
        top, left = (int(v) for v in rng.integers(0, margin + 1, size=2))
        flip = bool(rng.random() < 0.5)
    else:
        top = left = margin // 2
        flip = False
    win = cfg.target_size - margin
    a = _crop(a, top, left, win)
    m = None if m is None else _crop(m, top, left, win)
    return _finish(_normalize(a, cfg.normalize), m, cfg, flip)


def preprocess_brats_pair(img, mask, cfg: PreprocessConfig, rng_state: RngLike = None):
    """BraTS pipeline: resize to ``target_size`` and min-max normalize.

    With augmentation the slice is resized to ``target_size + margin``, a
    ``target_size`` window is cropped at a random origin in [0, margin]^2 and
    the result is mirrored with probability 0.5.
    """
    if cfg.pipeline is not Pipeline.BRATS:
        raise ConfigError(f"preprocess_brats needs pipeline=brats, got {cfg.pipeline.value}")
    a = _as_array(img)
    m = None if mask is None else np.asarray(mask, dtype=np.uint8)
    rng = _rng(rng_state)
    flip = False
    if cfg.augment:
        big = cfg.target_size + cfg.random_crop_margin
        top, left = (int(v) for v in rng.integers(0, cfg.random_crop_margin + 1, size=2))
        flip = bool(rng.random() < 0.5)
        a = _crop(resize(a, big), top, left, cfg.target_size)
        if m is not None:
            m = _crop(resize(m, big, nearest=True), top, left, cfg.target_size)
    else:
        a = resize(a, cfg.target_size)
        m = None if m is None else resize(m, cfg.target_size, nearest=True)
    return _finish(_normalize(a, cfg.normalize), m, cfg, flip)


def preprocess_none_pair(img, mask, cfg: PreprocessConfig, rng_state: RngLike = None):
    a = _as_array(img)
    a = minmax01(a) if (a.min() < 0 or a.max() > 1) else a
    return _finish(a, None if mask is None else np.asarray(mask, dtype=np.uint8), cfg, False)


def preprocess_cxr(img, cfg: PreprocessConfig, rng_state: RngLike = None) -> Image:
    return preprocess_cxr_pair(img, None, cfg, rng_state)[0]


def preprocess_brats(img, cfg: PreprocessConfig, rng_state: RngLike = None) -> Image:
    return preprocess_brats_pair(img, None, cfg, rng_state)[0]


_PIPELINES = {
    Pipeline.CXR: preprocess_cxr_pair,
    Pipeline.BRATS: preprocess_brats_pair,
    Pipeline.NONE: preprocess_none_pair,
}


def preprocess_pair(img, mask, cfg: PreprocessConfig, rng_state: RngLike = None):
    return _PIPELINES[cfg.pipeline](img, mask, cfg, rng_state)


def foreground_area(img, floor: float = 0.05) -> int:
    return int(np.count_nonzero(_as_array(img) > floor))


def filter_full_brain_slices(volume_slices: Sequence[Image], area_fraction_threshold: float,
                             intensity_floor: float = 0.05) -> list[Image]:
    """Slices whose foreground area reaches ``threshold`` x the volume's largest foreground area."""
    if not 0 < area_fraction_threshold < 1:
        raise ConfigError(f"area_fraction_threshold must lie in (0, 1), got {area_fraction_threshold}")
    areas = [foreground_area(s, intensity_floor) for s in volume_slices]
    if not areas or max(areas) == 0:
        return []
    cut = area_fraction_threshold * max(areas)
    return [s for s, a in zip(volume_slices, areas) if a > 0 and a >= cut]


def stem_order(stems: Sequence[str], seed: int = 0) -> list[str]:
    return sorted(stems, key=lambda s: hashlib.sha256(f"{seed}:{s}".encode()).hexdigest())


def _list_images(d: Path, pattern: str) -> dict[str, Path]:
    if not d.is_dir():
        raise DataError(f"missing dataset directory {d}")
    return {p.stem: p for p in sorted(d.glob(pattern)) if p.is_file()}


def _load_sample(path: Path, mask_path: Optional[Path], label: Label, cfg: PreprocessConfig,
                 eager: bool, rng_state) -> LabeledSample:
    raw = read_png01(path)
    mask = None
    if mask_path is not None:
        mask = read_mask(mask_path)
        if mask.shape != raw.shape:
            raise DataError(f"mask {mask_path} shape {mask.shape} != image {path} shape {raw.shape}")
    sid = f"{label.value}/{path.stem}"
    meta = {"path": str(path)}
    if not eager:
        gt = None if mask is None else BinaryMask(mask)
        return LabeledSample(Image(raw), label, gt, sid, {**meta, "raw": True})
    try:
        img, m = preprocess_pair(raw, mask, cfg, rng_state)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return LabeledSample(img, label, None if m is None else BinaryMask(m), sid, meta)


def make_transform(cfg: PreprocessConfig):
    """Per-draw augmentation closure for ``DatasetSplit.transform``."""

    def transform(sample: LabeledSample, rng: np.random.Generator) -> LabeledSample:
        mask = sample.gt_mask()
        img, m = preprocess_pair(sample.image, mask, cfg, rng)
        meta = {k: v for k, v in sample.meta.items() if k != "raw"}
        return LabeledSample(img, sample.label, None if m is None else BinaryMask(m), sample.sample_id, meta)

    plain_cfg = PreprocessConfig(**{**cfg.__dict__, "augment": False})
    transform.deterministic = lambda s: make_transform(plain_cfg)(s, np.random.default_rng(0))
    return transform


def load_dataset(layout: DatasetLayout, cfg: PreprocessConfig, seed: int = 0) -> DatasetSplit:
    """Stratified 80/20 split of a class-folder tree, ordered by a hash of each file stem.

    Test samples are preprocessed eagerly without augmentation. With
    ``cfg.augment`` the training samples stay raw and the returned split
    carries a transform that applies the pipeline on every draw.
    """
    per_class = {lab: _list_images(layout.class_dir(lab), layout.pattern) for lab in (Label.POSITIVE, Label.NEGATIVE)}
    for lab, files in per_class.items():
        if not files:
            raise DataError(f"no {lab.value} images matching {layout.pattern} in {layout.class_dir(lab)}")
    masks: dict[str, Path] = {}
    if layout.mask_dir is not None:
        masks = _list_images(Path(layout.root) / layout.mask_dir, layout.pattern)
        orphans = sorted(set(masks) - set(per_class[Label.POSITIVE]))
        if orphans:
            raise DataError(f"mask without positive image: {masks[orphans[0]]}"
                            + (f" (+{len(orphans) - 1} more)" if len(orphans) > 1 else ""))
    test_cfg = PreprocessConfig(**{**cfg.__dict__, "augment": False})
    train, test = [], []
    for lab in (Label.NEGATIVE, Label.POSITIVE):
        files = per_class[lab]
        order = stem_order(list(files), seed)
        k = int(np.floor(TRAIN_FRACTION * len(order) + 1e-9))
        for i, stem in enumerate(order):
            is_train = i < k
            mp = masks.get(stem) if lab is Label.POSITIVE else None
            s = _load_sample(files[stem], mp, lab, test_cfg if not is_train else cfg,
                             eager=not (is_train and cfg.augment), rng_state=None)
            (train if is_train else test).append(s)
    train.sort(key=lambda s: s.sample_id)
    test.sort(key=lambda s: s.sample_id)
    return DatasetSplit(train, test, seed=seed, transform=make_transform(cfg) if cfg.augment else None)


def write_cache(split: DatasetSplit, root) -> Path:
    """Cache preprocessed samples as raw ``.f32`` grids with a tab-separated ``index.txt``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["split\tlabel\tid\theight\twidth\timage\tmask"]
    for part in ("train", "test"):
        for i, s in enumerate(getattr(split, part)):
            name = f"{part}_{i:06d}"
            write_f32(root / f"{name}.f32", s.image.data)
            mname = ""
            if s.ground_truth is not None:
                mname = f"{name}_mask.f32"
                write_f32(root / mname, np.asarray(s.ground_truth.data, dtype=np.float32))
            h, w = s.image.shape
            lines.append(f"{part}\t{s.label.value}\t{s.sample_id}\t{h}\t{w}\t{name}.f32\t{mname}")
    (root / "index.txt").write_text("\n".join(lines) + "\n")
    return root
