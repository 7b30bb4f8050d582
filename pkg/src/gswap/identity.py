"""Identity encoders and embedding plumbing.

Two encoder families live here:

* a built-in deterministic **toy encoder** — bilinear 8x8 grayscale
  downsample, mean-centering, L2 normalization (D = 64) — which is fully
  differentiable and therefore usable in the training gradient path;
* a client for the **external embedding service** speaking NDJSON over
  TCP, which supplies real recognition embeddings for metrics and source
  targets but is not differentiable.

Face crops are produced by :func:`apply_affine`, a bilinear warp into a
fixed 112x112 frame that is linear (hence exactly differentiable) in the
input pixels.
"""

from __future__ import annotations

import base64
import functools
import itertools
import json
import logging
import os
import socket
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ParameterError,
    ServiceConnectionError,
    ServiceError,
    ServiceProtocolError,
    ServiceTimeoutError,
)

logger = logging.getLogger("gswap.identity")

TOY_DIM = 64
CROP_SIZE = 112

DEFAULT_PORT = 7701
ENDPOINT_ENV = "GSWAP_EMBED_ENDPOINT"
DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 0.5

TOY_ENCODER_NAMES = ("toy",)
TOY_LAMBDA_K = (1.0,)
REMOTE_ENCODER_NAMES = ("arcface", "facenet", "dlib")
REMOTE_LAMBDA_K = (0.9, 0.001, 0.1)

_DEGENERATE_EPS = 1e-12
_REQUEST_IDS = itertools.count(1)


@dataclass(frozen=True)
class IdentityEmbedding:
    """A unit-norm identity vector produced by a named encoder."""

    encoder_name: str
    vector: np.ndarray = field(repr=False)

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        object.__setattr__(self, "vector", vec)
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > 1e-4:
            raise ParameterError(
                f"embedding from '{self.encoder_name}' has norm {norm:.6f}; "
                "expected unit length within 1e-4"
            )


@dataclass(frozen=True)
class AlignmentAffine:
    """2x3 matrix mapping render pixel coords to encoder crop coords."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ParameterError(f"alignment affine must be 2x3, got {m.shape}")
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        if abs(det) < 1e-12:
            raise ParameterError(
                f"alignment affine has singular linear part (det={det:.3e})"
            )
        object.__setattr__(self, "matrix", m)


def check_encoder_weights(encoder_names, lambda_k) -> None:
    """Every active encoder needs exactly one weight; mismatch is fatal."""
    if len(encoder_names) != len(lambda_k):
        raise ConfigError(
            f"{len(encoder_names)} active encoders {tuple(encoder_names)} but "
            f"{len(lambda_k)} identity weights {tuple(lambda_k)}; counts must match"
        )


# ---------------------------------------------------------------------------
# toy encoder
# ---------------------------------------------------------------------------


def _as_float_image(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr
    if arr.ndim == 2:
        return arr
    raise ParameterError(f"expected an (H, W, 3) or (H, W) image, got shape {arr.shape}")


def _gray(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=2) if img.ndim == 3 else img


@functools.lru_cache(maxsize=64)
def _resize_weights(n_in: int, n_out: int = 8) -> np.ndarray:
    """(n_out, n_in) bilinear-downsample weights.

    The triangle kernel is widened by the reduction factor (the standard
    antialiased bilinear resize), so every input pixel contributes to some
    output cell.  Each row is a convex combination: nonnegative, sums to 1.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale
    x = ((np.arange(n_in) + 0.5)[None, :] - centers[:, None]) / support
    w = np.clip(1.0 - np.abs(x), 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def _downsample_gray(image) -> np.ndarray:
    """Bilinear 8x8 grayscale downsample; each output is a convex
    combination of inputs, so the map is a contraction in max norm."""
    img = _as_float_image(image)
    h, w = img.shape[:2]
    if h < 8 or w < 8:
        raise ParameterError(f"image must be at least 8x8, got {h}x{w}")
    g = _gray(img)
    return _resize_weights(h) @ g @ _resize_weights(w).T


def _downsample_gray_vjp(image, d_out: np.ndarray) -> np.ndarray:
    img = _as_float_image(image)
    h, w = img.shape[:2]
    d_g = _resize_weights(h).T @ np.asarray(d_out, dtype=np.float64) @ _resize_weights(w)
    if img.ndim == 3:
        return np.repeat(d_g[:, :, None], 3, axis=2) / 3.0
    return d_g


def _toy_prenorm(image) -> np.ndarray:
    """Mean-centered downsampled features, before normalization."""
    feats = _downsample_gray(image).reshape(-1)
    return feats - feats.mean()


def _fallback_vector() -> np.ndarray:
    e0 = np.zeros(TOY_DIM)
    e0[0] = 1.0
    return e0


def toy_encode(image) -> IdentityEmbedding:
    """Deterministic differentiable 64-D identity embedding.

    Constant (zero-variance) images would normalize to NaN; they return a
    fixed fallback basis vector instead.
    """
    pre = _toy_prenorm(image)
    norm = float(np.linalg.norm(pre))
    if norm < _DEGENERATE_EPS:
        return IdentityEmbedding("toy", _fallback_vector())
    return IdentityEmbedding("toy", pre / norm)


def toy_encode_vjp(image, d_vector) -> np.ndarray:
    """Pixel gradient of ``d_vector . toy_encode(image).vector``.

    Zero for degenerate (constant) images, where the fallback vector is
    locally constant.
    """
    d_vector = np.asarray(d_vector, dtype=np.float64)
    if d_vector.shape != (TOY_DIM,):
        raise ParameterError(
            f"upstream embedding gradient must have shape ({TOY_DIM},), "
            f"got {d_vector.shape}"
        )
    pre = _toy_prenorm(image)
    norm = float(np.linalg.norm(pre))
    img = _as_float_image(image)
    if norm < _DEGENERATE_EPS:
        return np.zeros_like(img)
    u = pre / norm
    d_pre = (d_vector - np.dot(d_vector, u) * u) / norm
    d_feats = d_pre - d_pre.mean()
    return _downsample_gray_vjp(image, d_feats.reshape(8, 8))


class ToyEncoder:
    """Encoder-protocol wrapper around :func:`toy_encode`."""

    name = "toy"
    dim = TOY_DIM

    def encode(self, image) -> IdentityEmbedding:
        return toy_encode(image)

    def encode_vjp(self, image, d_vector) -> np.ndarray:
        return toy_encode_vjp(image, d_vector)


# ---------------------------------------------------------------------------
# face-crop warp
# ---------------------------------------------------------------------------


def _warp_terms(image, affine, size):
    aff = affine if isinstance(affine, AlignmentAffine) else AlignmentAffine(affine)
    img = _as_float_image(image)
    h, w = img.shape[:2]
    lin = aff.matrix[:, :2]
    trans = aff.matrix[:, 2]
    inv = np.linalg.inv(lin)
    ys, xs = np.mgrid[0:size, 0:size]
    crop = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1).astype(np.float64)
    src = (crop - trans) @ inv.T
    sx, sy = src[:, 0], src[:, 1]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    wx = sx - x0
    wy = sy - y0
    terms = []
    for xi, yi, wgt in (
        (x0, y0, (1.0 - wx) * (1.0 - wy)),
        (x0 + 1, y0, wx * (1.0 - wy)),
        (x0, y0 + 1, (1.0 - wx) * wy),
        (x0 + 1, y0 + 1, wx * wy),
    ):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        terms.append((np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1), wgt * valid))
    return img, terms


def apply_affine(image, affine, size: int = CROP_SIZE) -> np.ndarray:
    """Bilinear warp of ``image`` into a ``size`` x ``size`` crop.

    ``affine`` maps render pixel coordinates to crop coordinates; samples
    falling outside the image are zero.  The result is linear in the input
    pixels (see :func:`apply_affine_vjp`).
    """
    img, terms = _warp_terms(image, affine, size)
    flat_shape = (size * size,) + img.shape[2:]
    out = np.zeros(flat_shape)
    for yi, xi, wgt in terms:
        vals = img[yi, xi]
        out += wgt[:, None] * vals if img.ndim == 3 else wgt * vals
    return out.reshape((size, size) + img.shape[2:])


def apply_affine_vjp(image, affine, d_out, size: int = CROP_SIZE) -> np.ndarray:
    """Adjoint of :func:`apply_affine` w.r.t. the input pixels."""
    img, terms = _warp_terms(image, affine, size)
    d_out = np.asarray(d_out, dtype=np.float64)
    expected = (size, size) + img.shape[2:]
    if d_out.shape != expected:
        raise ParameterError(
            f"upstream crop gradient must have shape {expected}, got {d_out.shape}"
        )
    d_flat = d_out.reshape((size * size,) + img.shape[2:])
    d_img = np.zeros_like(img)
    for yi, xi, wgt in terms:
        contrib = wgt[:, None] * d_flat if img.ndim == 3 else wgt * d_flat
        np.add.at(d_img, (yi, xi), contrib)
    return d_img


# ---------------------------------------------------------------------------
# remote embedding service client
# ---------------------------------------------------------------------------


def _resolve_endpoint(endpoint: str | None):
    value = endpoint or os.environ.get(ENDPOINT_ENV) or f"127.0.0.1:{DEFAULT_PORT}"
    host, sep, port = value.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"endpoint must be host:port, got {value!r}")
    try:
        return host, int(port)
    except ValueError as exc:
        raise ConfigError(f"endpoint must be host:port, got {value!r}") from exc


def _to_rgb8(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParameterError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def _recv_line(sock) -> bytes:
    buf = bytearray()
    while b"\n" not in buf:
        chunk = sock.recv(65536)
        if not chunk:
            raise ConnectionError("service closed the connection before responding")
        buf.extend(chunk)
    return bytes(buf.split(b"\n", 1)[0])


def _parse_embedding(entry, text: str) -> IdentityEmbedding:
    if not isinstance(entry, dict) or not {"name", "dim", "values"} <= entry.keys():
        raise ServiceProtocolError(
            "embedding entry missing name/dim/values", line=text
        )
    name = entry["name"]
    values = np.asarray(entry["values"], dtype=np.float64)
    if values.ndim != 1 or values.size != entry["dim"]:
        raise ServiceProtocolError(
            f"encoder '{name}' declared dim {entry['dim']} but sent "
            f"{values.size} values",
            line=text,
        )
    norm = float(np.linalg.norm(values))
    if norm < _DEGENERATE_EPS:
        raise ServiceProtocolError(f"encoder '{name}' sent a zero vector", line=text)
    if abs(norm - 1.0) > 1e-4:
        logger.warning(
            "encoder '%s' returned non-unit vector (norm %.6f); renormalizing",
            name,
            norm,
        )
        values = values / norm
    return IdentityEmbedding(name, values)


def _parse_response(line: bytes, request_id: int):
    text = line.decode("utf-8", errors="replace").strip()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ServiceProtocolError("response is not valid JSON", line=text) from exc
    if not isinstance(obj, dict):
        raise ServiceProtocolError("response is not a JSON object", line=text)
    if obj.get("id") != request_id:
        raise ServiceProtocolError(
            f"response id {obj.get('id')!r} does not match request id {request_id}",
            line=text,
        )
    ok = obj.get("ok")
    if ok is False:
        raise ServiceError(
            f"embedding service error: {obj.get('error', 'unspecified')}"
        )
    if ok is not True:
        raise ServiceProtocolError("response missing boolean 'ok' field", line=text)
    embeddings = obj.get("embeddings")
    if not isinstance(embeddings, list) or not embeddings:
        raise ServiceProtocolError("response carries no embeddings", line=text)
    return [_parse_embedding(entry, text) for entry in embeddings]


def remote_encode(
    image,
    affine: AlignmentAffine | None = None,
    endpoint: str | None = None,
    *,
    timeout: float = 5.0,
    retries: int = DEFAULT_RETRIES,
    backoff: float = DEFAULT_BACKOFF,
):
    """Request embeddings for ``image`` from the external service.

    Returns one :class:`IdentityEmbedding` per model the service runs.
    Connection-establishment failures (and connections dropped before a
    response) are retried ``retries`` times with ``backoff`` seconds between
    attempts; an unanswered in-flight request raises
    :class:`ServiceTimeoutError` without retrying, since the service may
    have already processed it.
    """
    host, port = _resolve_endpoint(endpoint)
    rgb8 = _to_rgb8(image)
    height, width = rgb8.shape[:2]
    if affine is not None and not isinstance(affine, AlignmentAffine):
        affine = AlignmentAffine(affine)
    request_id = next(_REQUEST_IDS)
    request = {
        "id": request_id,
        "op": "embed",
        "width": int(width),
        "height": int(height),
        "pixels_b64": base64.b64encode(rgb8.tobytes()).decode("ascii"),
        "affine": affine.matrix.tolist() if affine is not None else None,
    }
    payload = (json.dumps(request, separators=(",", ":")) + "\n").encode("utf-8")

    last_error: Exception | None = None
    for attempt in range(max(1, retries)):
        if attempt:
            time.sleep(backoff)
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            last_error = exc
            continue
        try:
            with sock:
                sock.settimeout(timeout)
                sock.sendall(payload)
                line = _recv_line(sock)
        except socket.timeout as exc:
            raise ServiceTimeoutError(
                f"embedding service at {host}:{port} did not respond within "
                f"{timeout}s"
            ) from exc
        except OSError as exc:
            last_error = exc
            continue
        return _parse_response(line, request_id)
    raise ServiceConnectionError(
        f"embedding service at {host}:{port} unreachable after "
        f"{max(1, retries)} attempts: {last_error}"
    )
