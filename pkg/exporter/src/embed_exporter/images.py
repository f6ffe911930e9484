"""Image and volume loading into normalized 3-channel model inputs.

2D images (anything Pillow reads) are converted to grayscale and triplicated.
Volumes (``.npy``, axes (slices, h, w)) use the middle axial slice by
default, or the mean over a centered slab in ``average`` mode.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image

INPUT_SIZE = 224
SLICE_MODES = ("middle", "average")


class ImageLoadError(ValueError):
    pass


def _volume_slice(path: str, mode: str, slab: int) -> np.ndarray:
    try:
        vol = np.load(path)
    except Exception as exc:
        raise ImageLoadError(f"{path}: {exc}") from None
    if vol.ndim != 3:
        raise ImageLoadError(f"{path}: expected a 3-d volume, got shape {vol.shape}")
    mid = vol.shape[0] // 2
    if mode == "middle":
        return np.asarray(vol[mid], dtype=np.float64)
    half = max(slab // 2, 1)
    lo, hi = max(mid - half, 0), min(mid + half + 1, vol.shape[0])
    return np.asarray(vol[lo:hi], dtype=np.float64).mean(axis=0)


def _image_plane(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("F"), dtype=np.float64)
    except ImageLoadError:
        raise
    except Exception as exc:
        raise ImageLoadError(f"{path}: {exc}") from None


def load_model_input(path, slice_mode: str = "middle", slab: int = 5) -> torch.Tensor:
    """(3, 224, 224) float32 tensor, intensity-normalized to [0, 1]."""
    if slice_mode not in SLICE_MODES:
        raise ImageLoadError(f"unknown slice mode {slice_mode!r}")
    path = str(path)
    plane = (
        _volume_slice(path, slice_mode, slab)
        if path.endswith(".npy")
        else _image_plane(path)
    )
    if plane.ndim != 2 or min(plane.shape) < 2:
        raise ImageLoadError(f"{path}: not a usable 2-d plane, shape {plane.shape}")
    if not np.isfinite(plane).all():
        raise ImageLoadError(f"{path}: non-finite pixel values")
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        plane = (plane - lo) / (hi - lo)
    else:
        plane = np.zeros_like(plane)
    t = torch.from_numpy(plane.astype(np.float32))[None, None]
    t = torch.nn.functional.interpolate(
        t, size=(INPUT_SIZE, INPUT_SIZE), mode="bilinear", align_corners=False
    )
    return t[0].repeat(3, 1, 1)
