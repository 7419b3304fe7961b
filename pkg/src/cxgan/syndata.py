"""Two-class synthetic benchmark with pixel-exact ground-truth effect maps.

Controls are blurred iid Gaussian noise. Patients carry the same kind of
background plus an additive disk near the top-left (disease A) or
bottom-right (disease B) quadrant centre, jittered by an integer offset.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import (
    AttributionMap,
    ConfigError,
    DataError,
    DatasetSplit,
    Image,
    Label,
    LabeledSample,
    RangeTag,
)
from .imgio import read_f32, read_png01, write_f32, write_png16

KERNEL_SIZE = 11
# Backgrounds and amplitudes are snapped to this dyadic grid so that
# background + effect - effect == background holds bit-exactly in float64.
_GRID = 2.0 ** -24
MIN_SAMPLES = 10
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    n_samples: int = 10000
    noise_sigma: float = 1.0
    blur_sigma: float = 2.5
    circle_radius: Optional[int] = None  # None: 8 px at 128, scaled with size
    circle_amplitude: float = 0.8
    max_offset: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.circle_radius is None:
            object.__setattr__(self, "circle_radius", max(1, round(8 * self.image_size / 128)))
        if self.image_size < 4:
            raise ConfigError(f"image_size must be >= 4, got {self.image_size}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        for name in ("noise_sigma", "blur_sigma", "circle_amplitude"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")
        if self.circle_radius < 1 or self.max_offset < 0:
            raise ConfigError("circle_radius must be >= 1 and max_offset >= 0")
        if self.circle_radius + self.max_offset >= self.image_size / 4:
            raise ConfigError(
                f"circle_radius + max_offset = {self.circle_radius + self.max_offset} "
                f"must be < image_size/4 = {self.image_size / 4}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_kernel(sigma: float, size: int = KERNEL_SIZE) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def background_std(cfg: SynthConfig) -> float:
    """Per-pixel standard deviation of the blurred-noise background."""
    k = gaussian_kernel(cfg.blur_sigma)
    return float(cfg.noise_sigma * np.sqrt(np.sum(k ** 2)))


def _snap(a):
    return np.round(np.asarray(a, dtype=np.float64) / _GRID) * _GRID


def generate_background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Blurred noise around 0.5, before clipping; circular boundary keeps it stationary."""
    noise = rng.normal(0.0, 1.0, size=(cfg.image_size, cfg.image_size)) * cfg.noise_sigma
    blurred = ndimage.correlate(noise, gaussian_kernel(cfg.blur_sigma), mode="wrap")
    return _snap(0.5 + blurred)


def disk_center(cfg: SynthConfig, disease: str) -> tuple[int, int]:
    q = cfg.image_size // 4
    if disease == "A":
        return q, q
    if disease == "B":
        return 3 * q, 3 * q
    raise ConfigError(f"disease must be 'A' or 'B', got {disease!r}")


def disk_effect(cfg: SynthConfig, center: tuple[int, int]) -> np.ndarray:
    rr, cc = np.mgrid[: cfg.image_size, : cfg.image_size]
    inside = (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= cfg.circle_radius ** 2
    return np.where(inside, _snap(cfg.circle_amplitude), 0.0)


def patient_components(
    cfg: SynthConfig,
    disease: str,
    rng: np.random.Generator,
    offset: Optional[tuple[int, int]] = None,
) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Return (background, additive effect, disk centre) before clipping.

    The background is drawn first so that a control and a patient drawn from
    the same rng state share it.
    """
    bg = generate_background(cfg, rng)
    if offset is None:
        offset = tuple(int(v) for v in rng.integers(-cfg.max_offset, cfg.max_offset + 1, size=2))
    cy, cx = disk_center(cfg, disease)
    center = (cy + offset[0], cx + offset[1])
    return bg, disk_effect(cfg, center), center


def generate_control_image(cfg: SynthConfig, rng: np.random.Generator, sample_id: str = "") -> LabeledSample:
    bg = generate_background(cfg, rng)
    return LabeledSample(
        image=Image(np.clip(bg, 0.0, 1.0), RangeTag.STORAGE01),
        label=Label.NEGATIVE,
        ground_truth=AttributionMap(np.zeros_like(bg)),
        sample_id=sample_id,
        meta={"disease": None},
    )


def generate_patient_image(
    cfg: SynthConfig,
    disease: str,
    rng: np.random.Generator,
    sample_id: str = "",
    offset: Optional[tuple[int, int]] = None,
) -> LabeledSample:
    bg, effect, center = patient_components(cfg, disease, rng, offset)
    return LabeledSample(
        image=Image(np.clip(bg + effect, 0.0, 1.0), RangeTag.STORAGE01),
        label=Label.POSITIVE,
        ground_truth=AttributionMap(effect),
        sample_id=sample_id,
        meta={"disease": disease, "center": list(center)},
    )


def class_plan(n: int) -> list[tuple[Label, Optional[str]]]:
    """Per-index (label, disease) assignment: half negative, positives split A/B with ties to A."""
    return [plan_entry(n, i) for i in range(n)]


def stratified_split(labels: list[Label], rng: np.random.Generator, train_fraction: float = TRAIN_FRACTION):
    """Per-class shuffled split taking floor(fraction * n_class) for training."""
    train_idx, test_idx = [], []
    for lab in (Label.NEGATIVE, Label.POSITIVE):
        idx = np.array([i for i, l in enumerate(labels) if l is lab], dtype=int)
        idx = idx[rng.permutation(len(idx))]
        k = int(np.floor(train_fraction * len(idx) + 1e-9))
        train_idx += sorted(idx[:k].tolist())
        test_idx += sorted(idx[k:].tolist())
    return sorted(train_idx), sorted(test_idx)


def plan_entry(n: int, index: int) -> tuple[Label, Optional[str]]:
    n_neg = n // 2
    n_a = (n - n_neg + 1) // 2
    if index < n_neg:
        return Label.NEGATIVE, None
    return Label.POSITIVE, ("A" if index < n_neg + n_a else "B")


def generate_sample(cfg: SynthConfig, index: int) -> LabeledSample:
    """Sample ``index`` of the dataset; a pure function of (cfg, index)."""
    label, disease = plan_entry(cfg.n_samples, index)
    rng = np.random.default_rng([cfg.seed, index])
    sid = f"{index:06d}"
    if label is Label.NEGATIVE:
        return generate_control_image(cfg, rng, sample_id=sid)
    return generate_patient_image(cfg, disease, rng, sample_id=sid)


def generate_dataset(cfg: SynthConfig) -> DatasetSplit:
    if cfg.n_samples < MIN_SAMPLES:
        raise ConfigError(f"n_samples must be >= {MIN_SAMPLES}, got {cfg.n_samples}")
    plan = class_plan(cfg.n_samples)
    samples = [generate_sample(cfg, i) for i in range(cfg.n_samples)]
    split_rng = np.random.default_rng([cfg.seed, cfg.n_samples, 0x5EED])
    train_idx, test_idx = stratified_split([p[0] for p in plan], split_rng)
    return DatasetSplit(
        train=[samples[i] for i in train_idx],
        test=[samples[i] for i in test_idx],
        seed=cfg.seed,
    )


def dataset_hash(split: DatasetSplit) -> str:
    h = hashlib.sha256()
    for part in (split.train, split.test):
        for s in part:
            h.update(s.sample_id.encode())
            h.update(s.label.value.encode())
            h.update(np.ascontiguousarray(s.image.data).tobytes())
            if s.ground_truth is not None:
                h.update(np.ascontiguousarray(s.ground_truth.data).tobytes())
        h.update(b"|")
    return h.hexdigest()


# --- on-disk export -------------------------------------------------------

def export_dataset(split: DatasetSplit, root: Path, cfg: Optional[SynthConfig] = None) -> Path:
    """Write ``<root>/{train,test}/{positive,negative}/img_<idx>.png`` plus sidecars and manifest."""
    root = Path(root)
    entries = []
    for part in ("train", "test"):
        for s in getattr(split, part):
            d = root / part / s.label.value
            d.mkdir(parents=True, exist_ok=True)
            stem = f"img_{s.sample_id}"
            write_png16(d / f"{stem}.png", s.image.data)
            write_f32(d / f"{stem}_gt.f32", s.ground_truth.data)
            entries.append({
                "split": part,
                "label": s.label.value,
                "id": s.sample_id,
                "file": f"{part}/{s.label.value}/{stem}.png",
                "gt": f"{part}/{s.label.value}/{stem}_gt.f32",
                "shape": list(s.image.shape),
                **{k: v for k, v in s.meta.items()},
            })
    manifest = {
        "format": "cxgan-synth/1",
        "config": cfg.to_dict() if cfg is not None else None,
        "seed": split.seed,
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_export(root: Path, require_gt: bool = False) -> tuple[DatasetSplit, dict]:
    """Load an exported synthetic tree back into a DatasetSplit.

    Missing ground-truth sidecars leave ``ground_truth`` unset unless
    ``require_gt`` is true.
    """
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    parts: dict[str, list[LabeledSample]] = {"train": [], "test": []}
    for e in manifest["samples"]:
        img = read_png01(root / e["file"])
        gt = None
        gpath = root / e["gt"]
        if gpath.exists():
            gt = AttributionMap(read_f32(gpath, img.shape))
        elif require_gt:
            raise DataError(f"missing ground truth {gpath}")
        meta = {k: v for k, v in e.items() if k not in ("split", "label", "id", "file", "gt", "shape")}
        parts[e["split"]].append(LabeledSample(Image(img), Label(e["label"]), gt, e["id"], meta))
    split = DatasetSplit(parts["train"], parts["test"], seed=int(manifest.get("seed") or 0))
    return split, manifest


def config_with(cfg: SynthConfig, **kw) -> SynthConfig:
    """Replace fields, re-deriving the radius when the size changes and no radius was pinned."""
    if "image_size" in kw and "circle_radius" not in kw:
        kw["circle_radius"] = None
    return replace(cfg, **kw)
