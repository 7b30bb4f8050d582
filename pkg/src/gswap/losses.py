"""Training objectives: reconstruction, splat regularizers, identity, totals.

All functions return ``(value, gradient)`` pairs so the training loop can
assemble the backward pass without an autodiff framework.  The SSIM term
uses an 11x11 Gaussian window (sigma 1.5) with zero padding, and its
gradient is computed analytically; the correlation kernel is symmetric, so
the blur operator is self-adjoint and backpropagation reuses the same blur.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import IdentityPipelineError, ParameterError
from .renderer import RenderedImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (ax / sigma) ** 2)
    return k / k.sum()


_KERNEL_1D = _gaussian_1d(SSIM_WINDOW, SSIM_SIGMA)


@dataclass(frozen=True)
class LossWeights:
    """Objective weights; defaults follow the reference configuration."""

    lambda_ssim: float = 0.2
    lambda_scale: float = 1.0
    lambda_pos: float = 0.01
    phi_scale: float = 0.6
    phi_pos: float = 1.0
    lambda_id: float = 0.1
    lambda_k: tuple = (0.9, 0.001, 0.1)

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if any(x < 0 for x in vals):
                raise ParameterError(f"{f.name} must be nonnegative, got {v}")
        object.__setattr__(self, "lambda_k", tuple(float(x) for x in self.lambda_k))


def _correlate_axis(img: np.ndarray, axis: int) -> np.ndarray:
    """Zero-padded 1D Gaussian correlation along ``axis``."""
    moved = np.moveaxis(img, axis, 0)
    r = SSIM_WINDOW // 2
    pad = [(r, r)] + [(0, 0)] * (moved.ndim - 1)
    padded = np.pad(moved, pad)
    n = moved.shape[0]
    out = np.zeros_like(moved)
    for i in range(SSIM_WINDOW):
        out += _KERNEL_1D[i] * padded[i : i + n]
    return np.moveaxis(out, 0, axis)


def _blur(img: np.ndarray) -> np.ndarray:
    return _correlate_axis(_correlate_axis(img, 0), 1)


def _ssim_value_grad(x: np.ndarray, y: np.ndarray):
    """Mean SSIM over (H, W, C) plus its gradient w.r.t. ``x``.

    Statistics are computed per channel with the shared blur; the analytic
    gradient routes through the three x-dependent statistics (mu1, E[x^2],
    E[x*y]) and back through the self-adjoint blur.
    """
    mu1 = _blur(x)
    mu2 = _blur(y)
    gxx = _blur(x * x)
    gyy = _blur(y * y)
    gxy = _blur(x * y)
    var1 = gxx - mu1**2
    var2 = gyy - mu2**2
    cov = gxy - mu1 * mu2

    a1 = 2.0 * mu1 * mu2 + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu1**2 + mu2**2 + SSIM_C1
    b2 = var1 + var2 + SSIM_C2
    denom = b1 * b2
    s = (a1 * a2) / denom

    ds_dgxx = -s / b2
    ds_dgxy = 2.0 * a1 / denom
    ds_dmu1 = 2.0 * mu2 * (a2 - a1) / denom + 2.0 * mu1 * s * (1.0 / b2 - 1.0 / b1)

    n = s.size
    d_x = (_blur(ds_dmu1) + 2.0 * x * _blur(ds_dgxx) + y * _blur(ds_dgxy)) / n
    return float(s.mean()), d_x


def _as_rgb(render) -> np.ndarray:
    rgb = render.rgb if isinstance(render, RenderedImage) else np.asarray(render)
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ParameterError(f"expected an (H, W, 3) image, got shape {rgb.shape}")
    return rgb


def reconstruction_loss(render, target, weights: LossWeights | None = None):
    """Weighted L1 + structural-dissimilarity image loss.

    Returns ``(value, d_rgb)`` where ``d_rgb`` has the image's shape.
    """
    w = weights if weights is not None else LossWeights()
    rgb = _as_rgb(render)
    tgt = _as_rgb(target)
    if rgb.shape != tgt.shape:
        raise ParameterError(
            f"render {rgb.shape} and target {tgt.shape} dimensions differ"
        )
    diff = rgb - tgt
    l1 = float(np.abs(diff).mean())
    ssim, d_ssim = _ssim_value_grad(rgb, tgt)
    value = (1.0 - w.lambda_ssim) * l1 + w.lambda_ssim * (1.0 - ssim)
    d_rgb = (1.0 - w.lambda_ssim) * np.sign(diff) / diff.size - w.lambda_ssim * d_ssim
    return value, d_rgb


def scale_reg(cloud, phi_scale: float = 0.6):
    """Penalize local splat extents above ``phi_scale`` triangle units.

    Returns ``(value, d_scale_local)``; the gradient is exactly zero for
    components at or below the threshold.
    """
    s = cloud.scale_local
    clipped = np.maximum(s, phi_scale)
    value = float(np.linalg.norm(clipped))
    if value == 0.0:
        return 0.0, np.zeros_like(s)
    grad = np.where(s > phi_scale, s / value, 0.0)
    return value, grad


def position_reg(cloud, phi_pos: float = 1.0):
    """Penalize splat centers drifting outside the ``phi_pos`` local box.

    The box is symmetric (applied to |mu|); returns ``(value, d_mu_local)``
    with exact zeros strictly inside the box.
    """
    mu = cloud.mu_local
    clipped = np.maximum(np.abs(mu), phi_pos)
    value = float(np.linalg.norm(clipped))
    if value == 0.0:
        return 0.0, np.zeros_like(mu)
    grad = np.where(np.abs(mu) > phi_pos, mu / value, 0.0)
    return value, grad


def identity_loss(render, source_embeddings, encoders, lambda_k):
    """Weighted cosine-dissimilarity between render and source embeddings.

    ``encoders`` provide ``name``, ``encode(rgb) -> IdentityEmbedding`` and
    ``encode_vjp(rgb, d_vector) -> d_rgb``.  Returns ``(value, d_rgb)``.
    """
    if not (len(source_embeddings) == len(encoders) == len(lambda_k)):
        raise ParameterError(
            f"got {len(source_embeddings)} source embeddings, {len(encoders)} "
            f"encoders and {len(lambda_k)} weights; counts must match"
        )
    rgb = _as_rgb(render)
    value = 0.0
    d_rgb = np.zeros_like(rgb)
    for src, enc, lam in zip(source_embeddings, encoders, lambda_k):
        try:
            emb = enc.encode(rgb)
            cos = float(np.dot(emb.vector, src.vector))
            value += lam * (1.0 - cos)
            d_rgb += enc.encode_vjp(rgb, -lam * src.vector)
        except IdentityPipelineError:
            raise
        except Exception as exc:
            raise IdentityPipelineError(enc.name, str(exc)) from exc
    return value, d_rgb


def total_loss(stage, weights: LossWeights, rec, scale, pos, identity=None):
    """Combine loss parts for a training stage.

    ``rec``/``scale``/``pos``/``identity`` are the ``(value, gradient)``
    pairs produced by the individual loss functions.  Stage "A" must omit
    the identity part; stage "B" must include it.  Returns
    ``(value, {"d_rgb", "d_scale_local", "d_mu_local"})``.
    """
    if stage not in ("A", "B"):
        raise ParameterError(f"stage must be 'A' or 'B', got {stage!r}")
    if stage == "A" and identity is not None:
        raise ParameterError("stage A takes no identity part")
    if stage == "B" and identity is None:
        raise ParameterError("stage B requires an identity part")
    value = rec[0] + weights.lambda_scale * scale[0] + weights.lambda_pos * pos[0]
    d_rgb = np.array(rec[1], dtype=np.float64, copy=True)
    grads = {
        "d_scale_local": weights.lambda_scale * np.asarray(scale[1], dtype=np.float64),
        "d_mu_local": weights.lambda_pos * np.asarray(pos[1], dtype=np.float64),
    }
    if stage == "B":
        value += weights.lambda_id * identity[0]
        d_rgb += weights.lambda_id * np.asarray(identity[1], dtype=np.float64)
    grads["d_rgb"] = d_rgb
    return value, grads
