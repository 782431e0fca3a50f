"""Fixed Sobel guidance: normalized gradient magnitude feeding the expert
gates and the fuzzy head's edge-strength input.

Everything here is non-trainable, pure numpy, and outside the gradient graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class GuidanceMap:
    """H x W map in [0,1]; zero everywhere for a constant source image."""
    values: np.ndarray
    source_shape: tuple

    @property
    def shape(self) -> tuple:
        return self.values.shape


def to_luma(image: np.ndarray) -> np.ndarray:
    """Collapse an H x W x C image to single-channel luma (H x W passes through)."""
    if image.ndim == 2:
        return np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 1:
        return np.asarray(image[:, :, 0], dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 3:
        r, g, b = LUMA_WEIGHTS
        return r * image[:, :, 0] + g * image[:, :, 1] + b * image[:, :, 2]
    raise ShapeError(f"expected HxW or HxWx{{1,3}} image, got shape {image.shape}")


def sobel_gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw (gx, gy) from 3x3 Sobel kernels with replicate border padding."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ShapeError(f"sobel needs a grayscale image of at least 3x3, got shape {img.shape}")
    gx = ndimage.correlate(img, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(img, SOBEL_Y, mode="nearest")
    return gx, gy


def sobel_magnitude(image: np.ndarray) -> GuidanceMap:
    """Gradient magnitude normalized by the per-image maximum.

    A flat image (max magnitude below 1e-12) yields the all-zero map, which
    keeps the gates at their bias value on featureless inputs.
    """
    gx, gy = sobel_gradients(image)
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak < 1e-12:
        return GuidanceMap(np.zeros_like(mag), mag.shape)
    return GuidanceMap(mag / peak, mag.shape)


def resize_bilinear(gmap: GuidanceMap, out_h: int, out_w: int) -> GuidanceMap:
    """Bilinear resampling (align_corners=False); output stays in [0,1]."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize_bilinear: invalid output size {out_h}x{out_w}")
    src = gmap.values
    in_h, in_w = src.shape
    if (out_h, out_w) == (in_h, in_w):
        return GuidanceMap(src.copy(), gmap.source_shape)

    def axis_coords(n_out: int, n_in: int):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), frac

    r0, r1, fr = axis_coords(out_h, in_h)
    c0, c1, fc = axis_coords(out_w, in_w)
    fr = fr[:, None]
    fc = fc[None, :]
    top = src[np.ix_(r0, c0)] * (1 - fc) + src[np.ix_(r0, c1)] * fc
    bot = src[np.ix_(r1, c0)] * (1 - fc) + src[np.ix_(r1, c1)] * fc
    out = top * (1 - fr) + bot * fr
    return GuidanceMap(out, gmap.source_shape)
