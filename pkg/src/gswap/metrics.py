"""Evaluation metrics: identity similarity (IDs) and video identity
distance (VIDD), computed with any encoder from the identity module."""

from __future__ import annotations

import numpy as np

from .errors import IdentityPipelineError, ParameterError


def _embed(encoder, image) -> np.ndarray:
    try:
        return encoder.encode(image).vector
    except IdentityPipelineError:
        raise
    except Exception as exc:
        raise IdentityPipelineError(encoder.name, str(exc)) from exc


def ids_score(source, frames, encoder) -> float:
    """Mean cosine similarity of each frame to the source, scaled by 100.

    100 means every frame carries the source identity exactly; order of
    frames does not matter.
    """
    frames = list(frames)
    if not frames:
        raise ParameterError("ids_score needs at least one frame")
    src = _embed(encoder, source)
    cosines = [float(np.dot(src, _embed(encoder, frame))) for frame in frames]
    return 100.0 * float(np.mean(cosines))


def vidd(frames, encoder) -> float:
    """Mean identity drift between consecutive frames (lower is better)."""
    frames = list(frames)
    if len(frames) < 2:
        raise ParameterError(f"vidd needs at least two frames, got {len(frames)}")
    vectors = [_embed(encoder, frame) for frame in frames]
    gaps = [
        1.0 - float(np.dot(a, b)) for a, b in zip(vectors[:-1], vectors[1:])
    ]
    return float(np.mean(gaps))


def psnr(image, reference) -> float:
    """Peak signal-to-noise ratio in dB for images on a [0, 1] scale."""
    a = np.asarray(image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)
