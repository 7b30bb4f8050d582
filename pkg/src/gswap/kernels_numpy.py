"""Pure-numpy compositing kernels: the reference compute backend.

Each kernel walks the splat list front to back (it arrives depth-sorted),
vectorizing over the pixels of one splat's screen-space window. Per pixel
this performs the same operation sequence as the per-pixel loops of the
numba backend, so the two backends agree to floating-point round-off.
"""

from __future__ import annotations

import numpy as np

ALPHA_MIN = 1.0 / 255.0  # skip contributions below one grey level
T_MIN = 1e-4  # stop blending once a pixel is effectively opaque
QMAX = 2.0 * np.log(255.0)  # Mahalanobis cutoff paired with ALPHA_MIN


def _window(mean, conic, bbox):
    """Pixel-center offsets and Mahalanobis values over a splat's bbox."""
    x0, x1, y0, y1 = bbox
    dx = np.arange(x0, x1, dtype=np.float64) - mean[0]
    dy = np.arange(y0, y1, dtype=np.float64) - mean[1]
    dxg = np.broadcast_to(dx[None, :], (y1 - y0, x1 - x0))
    dyg = np.broadcast_to(dy[:, None], (y1 - y0, x1 - x0))
    a, b, c = conic
    q = a * dxg * dxg + 2.0 * b * dxg * dyg + c * dyg * dyg
    return dxg, dyg, q


def _effective_alpha(opacity, conic, mean, bbox, trans_window):
    """Per-pixel blending weight, zeroed wherever a skip rule applies."""
    _, _, q = _window(mean, conic, bbox)
    alpha = opacity * np.exp(-0.5 * q)
    active = (q <= QMAX) & (alpha >= ALPHA_MIN) & (trans_window >= T_MIN)
    return np.where(active, alpha, 0.0)


def composite_forward(height, width, background, means2d, conics, colors,
                      opacities, bboxes, row_start=None, row_entries=None):
    """Front-to-back alpha blending over depth-sorted splats.

    Returns (rgb, alpha). The row-binning arrays used by the numba backend
    are accepted and ignored; this backend iterates splat-major.
    """
    del row_start, row_entries
    acc = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    for j in range(len(opacities)):
        x0, x1, y0, y1 = bboxes[j]
        if x0 >= x1 or y0 >= y1:
            continue
        tw = trans[y0:y1, x0:x1]
        alpha = _effective_alpha(opacities[j], conics[j], means2d[j], bboxes[j], tw)
        acc[y0:y1, x0:x1] += (tw * alpha)[:, :, None] * colors[j]
        trans[y0:y1, x0:x1] = tw * (1.0 - alpha)
    rgb = acc + trans[:, :, None] * background
    return rgb, 1.0 - trans


def composite_backward(height, width, background, means2d, conics, colors,
                       opacities, bboxes, d_rgb, d_alpha,
                       row_start=None, row_entries=None):
    """Gradients w.r.t. screen-space splat parameters.

    A forward sweep stores each splat's effective alphas and entry
    transmittances; a reverse sweep then maintains per pixel the suffix
    color R and suffix transparency Q, giving

        dRGB/dα_i = T_i (c_i − R_{i+1})        dA/dα_i = T_i Q_{i+1}

    with no division by (1 − α), so the pass stays finite as α → 1.
    Splats skipped in the forward pass carry effective alpha 0 and thus
    receive exactly zero gradient. Returns (d_means2d, d_conics, d_colors,
    d_opacities) where d_opacities is w.r.t. the activated opacity.
    """
    del row_start, row_entries
    m = len(opacities)
    trans = np.ones((height, width))
    stored: list[tuple[np.ndarray, np.ndarray] | None] = []
    for j in range(m):
        x0, x1, y0, y1 = bboxes[j]
        if x0 >= x1 or y0 >= y1:
            stored.append(None)
            continue
        tw = trans[y0:y1, x0:x1]
        alpha = _effective_alpha(opacities[j], conics[j], means2d[j], bboxes[j], tw)
        stored.append((alpha, tw.copy()))
        trans[y0:y1, x0:x1] = tw * (1.0 - alpha)

    d_means = np.zeros((m, 2))
    d_conics = np.zeros((m, 3))
    d_colors = np.zeros((m, 3))
    d_opac = np.zeros(m)
    suffix_rgb = np.tile(np.asarray(background, dtype=np.float64), (height, width, 1))
    suffix_q = np.ones((height, width))
    for j in range(m - 1, -1, -1):
        if stored[j] is None:
            continue
        x0, x1, y0, y1 = bboxes[j]
        alpha, tb = stored[j]
        dxg, dyg, _ = _window(means2d[j], conics[j], bboxes[j])
        rw = suffix_rgb[y0:y1, x0:x1]
        qw = suffix_q[y0:y1, x0:x1]
        gr = d_rgb[y0:y1, x0:x1]
        ga = d_alpha[y0:y1, x0:x1]
        c = colors[j]
        # every use of g_alpha below is weighted by alpha (zero when skipped)
        g_alpha = tb * (gr * (c - rw)).sum(axis=2) + ga * tb * qw
        d_colors[j] = (gr * (alpha * tb)[:, :, None]).sum(axis=(0, 1))
        d_opac[j] = float((g_alpha * (alpha / opacities[j])).sum())
        dq = -0.5 * alpha * g_alpha
        d_conics[j, 0] = float((dq * dxg * dxg).sum())
        d_conics[j, 1] = float((dq * 2.0 * dxg * dyg).sum())
        d_conics[j, 2] = float((dq * dyg * dyg).sum())
        a, b, cc = conics[j]
        d_means[j, 0] = -float((dq * (2.0 * a * dxg + 2.0 * b * dyg)).sum())
        d_means[j, 1] = -float((dq * (2.0 * b * dxg + 2.0 * cc * dyg)).sum())
        suffix_rgb[y0:y1, x0:x1] = c * alpha[:, :, None] + (1.0 - alpha)[:, :, None] * rw
        suffix_q[y0:y1, x0:x1] = (1.0 - alpha) * qw
    return d_means, d_conics, d_colors, d_opac
