"""Mask fusion, mask refinement, and alpha blending onto backgrounds.

Masks are H x W arrays in [0, 1].  Refinement runs grayscale morphological
erosion with a disc structuring element followed by a truncated Gaussian
blur; both use replicate-border handling so constant masks pass through
unchanged.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .renderer import RenderedImage

DEFAULT_ERODE_RADIUS = 3
DEFAULT_BLUR_SIGMA = 2.0


def _check_mask(mask, name="mask") -> np.ndarray:
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be 2D, got shape {arr.shape}")
    return arr


def _check_image(image, name="image") -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParameterError(f"{name} must be (H, W, 3), got shape {arr.shape}")
    return arr


def fuse_masks(m_swapped, m_tgt) -> np.ndarray:
    """Elementwise product of two masks (strictest common coverage)."""
    a = _check_mask(m_swapped, "m_swapped")
    b = _check_mask(m_tgt, "m_tgt")
    if a.shape != b.shape:
        raise ParameterError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    return a * b


def _disc_offsets(radius: int):
    offs = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy <= radius * radius:
                offs.append((dy, dx))
    return offs


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask
    padded = np.pad(mask, radius, mode="edge")
    h, w = mask.shape
    out = np.full_like(mask, np.inf)
    for dy, dx in _disc_offsets(radius):
        window = padded[radius + dy : radius + dy + h, radius + dx : radius + dx + w]
        np.minimum(out, window, out=out)
    return out


def _blur(mask: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return mask
    radius = int(3.0 * sigma + 0.5)
    if radius == 0:
        return mask
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (ax / sigma) ** 2)
    kernel /= kernel.sum()
    out = mask
    for axis in (0, 1):
        moved = np.moveaxis(out, axis, 0)
        padded = np.pad(moved, ((radius, radius), (0, 0)), mode="edge")
        n = moved.shape[0]
        acc = np.zeros_like(moved)
        for i in range(kernel.size):
            acc += kernel[i] * padded[i : i + n]
        out = np.moveaxis(acc, 0, axis)
    return out


def refine_mask(mask, erode_radius: int = DEFAULT_ERODE_RADIUS,
                blur_sigma: float = DEFAULT_BLUR_SIGMA) -> np.ndarray:
    """Shrink mask edges (disc erosion) then soften them (Gaussian blur).

    The blur kernel is truncated at 3 sigma and renormalized; radius 0 and
    sigma 0 are both identity.  Output is clamped to [0, 1].
    """
    m = _check_mask(mask)
    if erode_radius < 0 or blur_sigma < 0:
        raise ParameterError(
            f"erode_radius and blur_sigma must be nonnegative, got "
            f"{erode_radius}, {blur_sigma}"
        )
    out = _blur(_erode(m, int(erode_radius)), float(blur_sigma))
    if out is m:
        return m.copy()
    return np.clip(out, 0.0, 1.0)


def blend(i_swapped, i_tgt, m_fuse) -> np.ndarray:
    """Per-pixel convex combination: mask 1 shows the swap, 0 the target."""
    a = _check_image(i_swapped, "i_swapped")
    b = _check_image(i_tgt, "i_tgt")
    m = _check_mask(m_fuse, "m_fuse")
    if a.shape != b.shape or m.shape != a.shape[:2]:
        raise ParameterError(
            f"dimensions differ: swapped {a.shape}, target {b.shape}, mask {m.shape}"
        )
    w = m[:, :, None]
    return a * w + b * (1.0 - w)


def replace_background(rendered: RenderedImage, new_bg) -> np.ndarray:
    """Alpha-composite the rendered avatar over a new background."""
    bg = _check_image(new_bg, "new_bg")
    rgb = np.asarray(rendered.rgb, dtype=np.float64)
    alpha = np.asarray(rendered.alpha, dtype=np.float64)
    if rgb.shape != bg.shape:
        raise ParameterError(
            f"rendered {rgb.shape} and background {bg.shape} dimensions differ"
        )
    w = alpha[:, :, None]
    return rgb * w + bg * (1.0 - w)
