"""Shared test utilities: finite differences and tiny scene builders."""

from __future__ import annotations

import numpy as np


def central_diff(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f at x (float64, elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = f(x)
        flat[i] = keep - eps
        fm = f(x)
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    """Max relative error with an absolute floor so near-zero entries compare sanely."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)
