"""PNG / raw float32 helpers and panel figures."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage

from .core import DataError, to_luminance


def write_png16(path, img01: np.ndarray) -> None:
    arr = np.round(np.clip(img01, 0.0, 1.0) * 65535.0).astype(np.uint16)
    PILImage.fromarray(arr).save(path, format="PNG")


def write_png8(path, img01: np.ndarray) -> None:
    arr = np.round(np.clip(img01, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(arr).save(path, format="PNG")


def write_mask_png(path, mask: np.ndarray) -> None:
    PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def write_f32(path, arr: np.ndarray) -> None:
    """Row-major little-endian float32, no header."""
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def read_f32(path, shape: tuple[int, int]) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != shape[0] * shape[1]:
        raise DataError(f"{path}: expected {shape[0] * shape[1]} floats, found {arr.size}")
    return arr.reshape(shape).astype(np.float64)


def read_png01(path) -> np.ndarray:
    """Decode an 8/16-bit grayscale (or colour, converted to luma) PNG into [0, 1]."""
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if mode.startswith("I;16") or mode == "I":
        return np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
    if mode == "F":
        return np.clip(arr.astype(np.float64), 0.0, 1.0)
    if arr.dtype == bool:
        return arr.astype(np.float64)
    if arr.ndim == 3:
        arr = to_luminance(arr[..., :3])
    return np.clip(np.asarray(arr, dtype=np.float64) / 255.0, 0.0, 1.0)


def read_mask(path) -> np.ndarray:
    return read_png01(path) > 0


def _signed_to01(m: np.ndarray, scale: Optional[float] = None) -> np.ndarray:
    scale = float(np.max(np.abs(m))) if scale is None else scale
    if scale <= 0:
        return np.full(m.shape, 0.5)
    return np.clip(0.5 + 0.5 * m / scale, 0.0, 1.0)


def panel(tiles: Sequence[np.ndarray], signed: Sequence[bool] = (), gap: int = 2) -> np.ndarray:
    """Concatenate tiles horizontally; signed tiles are mapped with 0 -> mid-grey."""
    out = []
    for i, t in enumerate(tiles):
        t = np.asarray(t, dtype=np.float64)
        if i < len(signed) and signed[i]:
            t = _signed_to01(t)
        out.append(np.clip(t, 0.0, 1.0))
        if i != len(tiles) - 1:
            out.append(np.ones((t.shape[0], gap)))
    return np.concatenate(out, axis=1)


def write_panel(path, tiles: Sequence[np.ndarray], signed: Sequence[bool] = ()) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_png8(path, panel(tiles, signed))
