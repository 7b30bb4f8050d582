"""Numba-compiled compositing kernels: serial per-pixel loops.

Each pixel iterates only the splats binned to its image row (prepared by
the renderer), in depth order, with an x-interval reject. Kernels compile
single-threaded with strict floating-point semantics, so renders are
bit-identical across runs and independent of thread count.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .kernels_numpy import ALPHA_MIN, QMAX, T_MIN


@njit(cache=True)
def _forward(height, width, background, means2d, conics, colors, opacities,
             bboxes, row_start, row_entries, rgb, alpha_out):
    for y in range(height):
        lo = row_start[y]
        hi = row_start[y + 1]
        for x in range(width):
            t = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for e in range(lo, hi):
                if t < T_MIN:
                    break
                j = row_entries[e]
                if x < bboxes[j, 0] or x >= bboxes[j, 1]:
                    continue
                dx = x - means2d[j, 0]
                dy = y - means2d[j, 1]
                q = (conics[j, 0] * dx * dx + 2.0 * conics[j, 1] * dx * dy
                     + conics[j, 2] * dy * dy)
                if q > QMAX:
                    continue
                a = opacities[j] * math.exp(-0.5 * q)
                if a < ALPHA_MIN:
                    continue
                w = t * a
                r += w * colors[j, 0]
                g += w * colors[j, 1]
                b += w * colors[j, 2]
                t *= 1.0 - a
            rgb[y, x, 0] = r + t * background[0]
            rgb[y, x, 1] = g + t * background[1]
            rgb[y, x, 2] = b + t * background[2]
            alpha_out[y, x] = 1.0 - t


@njit(cache=True)
def _backward(height, width, background, means2d, conics, colors, opacities,
              bboxes, row_start, row_entries, d_rgb, d_alpha,
              scr_idx, scr_alpha, scr_t, d_means, d_conics, d_colors, d_opac):
    for y in range(height):
        lo = row_start[y]
        hi = row_start[y + 1]
        for x in range(width):
            # replay the forward pass, recording what actually blended
            k = 0
            t = 1.0
            for e in range(lo, hi):
                if t < T_MIN:
                    break
                j = row_entries[e]
                if x < bboxes[j, 0] or x >= bboxes[j, 1]:
                    continue
                dx = x - means2d[j, 0]
                dy = y - means2d[j, 1]
                q = (conics[j, 0] * dx * dx + 2.0 * conics[j, 1] * dx * dy
                     + conics[j, 2] * dy * dy)
                if q > QMAX:
                    continue
                a = opacities[j] * math.exp(-0.5 * q)
                if a < ALPHA_MIN:
                    continue
                scr_idx[k] = j
                scr_alpha[k] = a
                scr_t[k] = t
                k += 1
                t *= 1.0 - a
            # reverse sweep with suffix color R and suffix transparency Q
            gr = d_rgb[y, x, 0]
            gg = d_rgb[y, x, 1]
            gb = d_rgb[y, x, 2]
            ga = d_alpha[y, x]
            r0 = background[0]
            r1 = background[1]
            r2 = background[2]
            qacc = 1.0
            for m in range(k - 1, -1, -1):
                j = scr_idx[m]
                aef = scr_alpha[m]
                tb = scr_t[m]
                c0 = colors[j, 0]
                c1 = colors[j, 1]
                c2 = colors[j, 2]
                g_alpha = tb * (gr * (c0 - r0) + gg * (c1 - r1) + gb * (c2 - r2)) \
                    + ga * tb * qacc
                at = aef * tb
                d_colors[j, 0] += gr * at
                d_colors[j, 1] += gg * at
                d_colors[j, 2] += gb * at
                d_opac[j] += g_alpha * (aef / opacities[j])
                dq = -0.5 * aef * g_alpha
                dx = x - means2d[j, 0]
                dy = y - means2d[j, 1]
                d_conics[j, 0] += dq * dx * dx
                d_conics[j, 1] += dq * 2.0 * dx * dy
                d_conics[j, 2] += dq * dy * dy
                ca = conics[j, 0]
                cb = conics[j, 1]
                cc = conics[j, 2]
                d_means[j, 0] -= dq * (2.0 * ca * dx + 2.0 * cb * dy)
                d_means[j, 1] -= dq * (2.0 * cb * dx + 2.0 * cc * dy)
                r0 = c0 * aef + (1.0 - aef) * r0
                r1 = c1 * aef + (1.0 - aef) * r1
                r2 = c2 * aef + (1.0 - aef) * r2
                qacc = (1.0 - aef) * qacc


def _max_row_entries(row_start) -> int:
    if len(row_start) <= 1:
        return 1
    return max(1, int(np.max(np.diff(row_start))))


def composite_forward(height, width, background, means2d, conics, colors,
                      opacities, bboxes, row_start, row_entries):
    rgb = np.empty((height, width, 3))
    alpha = np.empty((height, width))
    _forward(height, width, background, means2d, conics, colors, opacities,
             bboxes, row_start, row_entries, rgb, alpha)
    return rgb, alpha


def composite_backward(height, width, background, means2d, conics, colors,
                       opacities, bboxes, d_rgb, d_alpha,
                       row_start, row_entries):
    m = len(opacities)
    d_means = np.zeros((m, 2))
    d_conics = np.zeros((m, 3))
    d_colors = np.zeros((m, 3))
    d_opac = np.zeros(m)
    scratch = _max_row_entries(row_start)
    _backward(height, width, background, means2d, conics, colors, opacities,
              bboxes, row_start, row_entries, d_rgb, d_alpha,
              np.empty(scratch, dtype=np.int64), np.empty(scratch),
              np.empty(scratch), d_means, d_conics, d_colors, d_opac)
    return d_means, d_conics, d_colors, d_opac
