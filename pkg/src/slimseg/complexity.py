"""Spatial complexity indicator: grayscale -> Sobel -> mean gradient magnitude."""

from dataclasses import dataclass

import numpy as np

# BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])

SOBEL_H = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_V = SOBEL_H.T.copy()


class InvalidImageError(ValueError):
    pass


@dataclass
class GradientField:
    """Per-pixel horizontal/vertical Sobel responses, same dims as the source."""
    s_h: np.ndarray
    s_v: np.ndarray


@dataclass
class SpatialComplexity:
    sc_mean: float
    pixel_count: int


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        pass
    elif img.ndim == 3 and img.shape[2] in (1, 3):
        if img.shape[2] == 1:
            img = img[:, :, 0]
    else:
        raise InvalidImageError(f"expected (H,W), (H,W,1) or (H,W,3), got {img.shape}")
    if img.size == 0:
        raise InvalidImageError("empty image")
    if img.min() < 0.0 or img.max() > 1.0:
        raise InvalidImageError("intensities must lie in [0, 1]")
    return img


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Collapse an RGB image to 1 channel with luma weights; grayscale passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2 or (img.ndim == 3 and img.shape[2] == 1):
        return validate_image(img)
    if img.ndim == 3 and img.shape[2] == 3:
        validate_image(img)
        return img @ _LUMA
    raise InvalidImageError(f"channel count not in {{1, 3}}: shape {img.shape}")


def _check_min_dims(gray: np.ndarray) -> None:
    if gray.shape[0] < 3 or gray.shape[1] < 3:
        raise InvalidImageError(
            f"image must be at least 3x3 for Sobel filtering, got {gray.shape}")


def sobel(gray: np.ndarray) -> GradientField:
    """3x3 Sobel responses with replicate border padding; output dims = input dims."""
    gray = validate_image(gray)
    _check_min_dims(gray)
    padded = np.pad(gray, 1, mode="edge")
    h, w = gray.shape
    s_h = np.zeros((h, w))
    s_v = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            window = padded[dy:dy + h, dx:dx + w]
            if SOBEL_H[dy, dx] != 0.0:
                s_h += SOBEL_H[dy, dx] * window
            if SOBEL_V[dy, dx] != 0.0:
                s_v += SOBEL_V[dy, dx] * window
    return GradientField(s_h=s_h, s_v=s_v)


def spatial_complexity(gray: np.ndarray) -> SpatialComplexity:
    """Mean per-pixel Sobel gradient magnitude over all pixels (borders included)."""
    grad = sobel(gray)
    magnitude = np.sqrt(grad.s_h ** 2 + grad.s_v ** 2)
    m = magnitude.size
    return SpatialComplexity(sc_mean=float(magnitude.sum() / m), pixel_count=m)
