"""Quaternion utilities and their vector-Jacobian products.

The quaternion convention for the whole package is fixed here and nowhere
else: components ordered (w, x, y, z), composed with the Hamilton product,
so quat_to_matrix(hamilton(a, b)) == quat_to_matrix(a) @ quat_to_matrix(b).
All functions broadcast over leading axes and work in the input dtype
(float64 everywhere gradients are checked).
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def normalize(x: np.ndarray, eps: float = _EPS) -> np.ndarray:
    """Unit vectors along the last axis; the zero vector maps to itself."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, eps)


def normalize_vjp(x: np.ndarray, d_unit: np.ndarray, eps: float = _EPS) -> np.ndarray:
    """Backward of normalize: d_x given the gradient on the unit output."""
    n = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)
    u = x / n
    proj = np.sum(u * d_unit, axis=-1, keepdims=True)
    return (d_unit - u * proj) / n


def hamilton(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product q1 ⊗ q2, components (w, x, y, z)."""
    w1, x1, y1, z1 = np.moveaxis(np.asarray(q1), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(q2), -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def hamilton_vjp(
    q1: np.ndarray, q2: np.ndarray, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backward of the (bilinear) Hamilton product."""
    w1, x1, y1, z1 = np.moveaxis(np.asarray(q1), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(q2), -1, 0)
    dw, dx, dy, dz = np.moveaxis(np.asarray(d_out), -1, 0)
    d_q1 = np.stack(
        [
            dw * w2 + dx * x2 + dy * y2 + dz * z2,
            -dw * x2 + dx * w2 - dy * z2 + dz * y2,
            -dw * y2 + dx * z2 + dy * w2 - dz * x2,
            -dw * z2 - dx * y2 + dy * x2 + dz * w2,
        ],
        axis=-1,
    )
    d_q2 = np.stack(
        [
            dw * w1 + dx * x1 + dy * y1 + dz * z1,
            -dw * x1 + dx * w1 + dy * z1 - dz * y1,
            -dw * y1 - dx * z1 + dy * w1 + dz * x1,
            -dw * z1 + dx * y1 - dy * x1 + dz * w1,
        ],
        axis=-1,
    )
    return d_q1, d_q2


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (..., 4) -> (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q), -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_to_matrix_vjp(q: np.ndarray, d_R: np.ndarray) -> np.ndarray:
    """Backward of quat_to_matrix w.r.t. the (unit) quaternion components."""
    w, x, y, z = np.moveaxis(np.asarray(q), -1, 0)
    g = np.asarray(d_R)
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    d_w = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    d_x = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    d_y = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    d_z = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([d_w, d_x, d_y, d_z], axis=-1)


def quat_from_axis_angle(axis: np.ndarray, angle: float | np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation of `angle` radians about unit `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle
    return np.concatenate(
        [np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w ≥ 0) of a rotation matrix, stable in every trace branch."""
    R = np.asarray(R)
    batch = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    out = np.empty(Rf.shape[:1] + (4,), dtype=R.dtype)
    for i, m in enumerate(Rf):
        t = np.trace(m)
        if t > 0:
            s = np.sqrt(t + 1.0) * 2
            q = np.array(
                [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
            )
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = np.array(
                [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            )
        elif m[1, 1] >= m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = np.array(
                [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = np.array(
                [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
            )
        if q[0] < 0:
            q = -q
        out[i] = q / np.linalg.norm(q)
    return out.reshape(batch + (4,))
