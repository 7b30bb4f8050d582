"""The splat cloud, its triangle binding, and the local→global transform.

Each splat lives in the coordinate frame of its parent triangle: center μ in
triangle units, rotation r relative to the triangle frame, scale s in
triangle units. The global pose is μ̃ = l·K·μ + V, r̃ = quat(K)⊗r, s̃ = l·s,
so splats ride their triangles through any deformation for free.

Storage conventions: scale is kept in log space (s = exp(scale_log)) and
opacity in logit space (opacity = sigmoid(opacity_raw)) so optimizer steps
can never produce non-positive scales or out-of-range opacities.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rotation as rot
from .errors import BindingError, ParameterError
from .geometry import RiggedMesh, TriangleFrames

CHECKPOINT_MAGIC = b"GSWP"
CHECKPOINT_VERSION = 1

# SH band constants (order 0 and 1)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y: np.ndarray) -> np.ndarray:
    return np.log(y / (1.0 - y))


@dataclass
class GaussianCloud:
    """All splats of one avatar, in triangle-local coordinates."""

    mu_local: np.ndarray  # (N, 3)
    rot_local: np.ndarray  # (N, 4) quaternion (w, x, y, z)
    scale_log: np.ndarray  # (N, 3), local scale = exp
    opacity_raw: np.ndarray  # (N,), opacity = sigmoid
    sh_coeffs: np.ndarray  # (N, 4, 3): DC + 3 linear bands, per RGB
    parent_face: np.ndarray  # (N,) int

    def __post_init__(self):
        self.mu_local = np.ascontiguousarray(self.mu_local, dtype=np.float64)
        self.rot_local = np.ascontiguousarray(self.rot_local, dtype=np.float64)
        self.scale_log = np.ascontiguousarray(self.scale_log, dtype=np.float64)
        self.opacity_raw = np.ascontiguousarray(self.opacity_raw, dtype=np.float64)
        self.sh_coeffs = np.ascontiguousarray(self.sh_coeffs, dtype=np.float64)
        self.parent_face = np.ascontiguousarray(self.parent_face, dtype=np.int64)
        n = len(self.mu_local)
        shapes = {
            "mu_local": (self.mu_local.shape, (n, 3)),
            "rot_local": (self.rot_local.shape, (n, 4)),
            "scale_log": (self.scale_log.shape, (n, 3)),
            "opacity_raw": (self.opacity_raw.shape, (n,)),
            "sh_coeffs": (self.sh_coeffs.shape, (n, 4, 3)),
            "parent_face": (self.parent_face.shape, (n,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ParameterError(f"{name} has shape {got}, expected {want}")

    @property
    def count(self) -> int:
        return len(self.mu_local)

    @property
    def scale_local(self) -> np.ndarray:
        return np.exp(self.scale_log)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            mu_local=self.mu_local.copy(),
            rot_local=self.rot_local.copy(),
            scale_log=self.scale_log.copy(),
            opacity_raw=self.opacity_raw.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            parent_face=self.parent_face.copy(),
        )

    def check_binding(self, n_faces: int) -> None:
        if self.count and (self.parent_face.min() < 0 or self.parent_face.max() >= n_faces):
            bad = int(np.argmax((self.parent_face < 0) | (self.parent_face >= n_faces)))
            raise BindingError(
                f"splat {bad} bound to face {int(self.parent_face[bad])} of a {n_faces}-face mesh"
            )


@dataclass
class GlobalGaussians:
    """World-space view of a cloud; construct via local_to_global only."""

    mu_global: np.ndarray  # (N, 3) meters
    rot_global: np.ndarray  # (N, 4) unit quaternions
    scale_global: np.ndarray  # (N, 3) meters
    opacity: np.ndarray  # (N,) activated
    sh_coeffs: np.ndarray  # (N, 4, 3) passed through


@dataclass
class LocalGradients:
    """Gradient of a scalar w.r.t. the raw stored cloud fields."""

    d_mu_local: np.ndarray
    d_rot_local: np.ndarray
    d_scale_log: np.ndarray


def init_cloud(mesh: RiggedMesh) -> GaussianCloud:
    """One splat per face: centered, axis-aligned, unit scale, half opacity.

    SH is initialized to render mid-gray from every direction: linear bands
    zero and a zero DC coefficient under the 0.5-offset color convention
    (see sh_color).
    """
    n = len(mesh.faces)
    rot_local = np.zeros((n, 4))
    rot_local[:, 0] = 1.0
    return GaussianCloud(
        mu_local=np.zeros((n, 3)),
        rot_local=rot_local,
        scale_log=np.zeros((n, 3)),
        opacity_raw=np.zeros(n),
        sh_coeffs=np.zeros((n, 4, 3)),
        parent_face=np.arange(n, dtype=np.int64),
    )


def local_to_global(cloud: GaussianCloud, frames: TriangleFrames) -> GlobalGaussians:
    """μ̃ = l·K·μ + V, r̃ = quat(K)⊗r̂, s̃ = l·s, per parent face.

    The stored local quaternion is normalized here, as part of the
    differentiable computation.
    """
    cloud.check_binding(len(frames))
    K = frames.K[cloud.parent_face]
    V = frames.V[cloud.parent_face]
    l = frames.l[cloud.parent_face]
    mu = l[:, None] * np.einsum("nij,nj->ni", K, cloud.mu_local) + V
    r_hat = rot.normalize(cloud.rot_local)
    qk = rot.matrix_to_quat(K)
    r_global = rot.hamilton(qk, r_hat)
    s_global = l[:, None] * np.exp(cloud.scale_log)
    return GlobalGaussians(
        mu_global=mu,
        rot_global=r_global,
        scale_global=s_global,
        opacity=sigmoid(cloud.opacity_raw),
        sh_coeffs=cloud.sh_coeffs.copy(),
    )


def local_to_global_vjp(
    cloud: GaussianCloud,
    frames: TriangleFrames,
    d_mu_global: np.ndarray,
    d_rot_global: np.ndarray,
    d_scale_global: np.ndarray,
) -> LocalGradients:
    """Backward of local_to_global onto the raw cloud fields (frames fixed)."""
    K = frames.K[cloud.parent_face]
    l = frames.l[cloud.parent_face]
    d_mu_local = l[:, None] * np.einsum("nji,nj->ni", K, d_mu_global)
    qk = rot.matrix_to_quat(K)
    r_hat = rot.normalize(cloud.rot_local)
    _, d_r_hat = rot.hamilton_vjp(qk, r_hat, d_rot_global)
    d_rot_local = rot.normalize_vjp(cloud.rot_local, d_r_hat)
    d_scale_log = d_scale_global * l[:, None] * np.exp(cloud.scale_log)
    return LocalGradients(d_mu_local=d_mu_local, d_rot_local=d_rot_local, d_scale_log=d_scale_log)


def covariance(g: GlobalGaussians, i: int) -> np.ndarray:
    """World-space covariance Σ = R·diag(s̃²)·Rᵀ of splat i."""
    R = rot.quat_to_matrix(rot.normalize(g.rot_global[i]))
    return (R * g.scale_global[i] ** 2) @ R.T


def sh_color(sh_coeffs: np.ndarray, view_dirs: np.ndarray) -> np.ndarray:
    """Order-1 SH color per splat for unit view directions, clamped to [0,1].

    color = 0.5 + C0·dc − C1·(y·c1 − z·c2 + x·c3); zero coefficients give
    mid-gray from every direction.
    """
    x, y, z = view_dirs[:, 0:1], view_dirs[:, 1:2], view_dirs[:, 2:3]
    raw = (
        0.5
        + SH_C0 * sh_coeffs[:, 0, :]
        - SH_C1 * (y * sh_coeffs[:, 1, :] - z * sh_coeffs[:, 2, :] + x * sh_coeffs[:, 3, :])
    )
    return np.clip(raw, 0.0, 1.0)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sII")


def save_cloud(cloud: GaussianCloud, path: str | Path) -> None:
    """Write the binary cloud checkpoint atomically (temp file + rename)."""
    path = Path(path)
    blob = bytearray(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cloud.count))
    for arr in (cloud.mu_local, cloud.rot_local, cloud.scale_log, cloud.opacity_raw, cloud.sh_coeffs):
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob += np.ascontiguousarray(cloud.parent_face, dtype="<u4").tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_cloud(path: str | Path) -> GaussianCloud:
    """Read a binary cloud checkpoint; layout errors raise ParameterError."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ParameterError(f"{path}: too short to be a cloud checkpoint")
    magic, version, n = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ParameterError(f"{path}: not a cloud checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ParameterError(f"{path}: unsupported checkpoint version {version}")
    counts = {"mu_local": 3 * n, "rot_local": 4 * n, "scale_log": 3 * n,
              "opacity_raw": n, "sh_coeffs": 12 * n}
    expected = _HEADER.size + 4 * sum(counts.values()) + 4 * n
    if len(blob) != expected:
        raise ParameterError(f"{path}: truncated checkpoint ({len(blob)} bytes, expected {expected})")
    off = _HEADER.size
    fields = {}
    for name, cnt in counts.items():
        fields[name] = np.frombuffer(blob, dtype="<f4", count=cnt, offset=off).astype(np.float64)
        off += 4 * cnt
    parent = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
    return GaussianCloud(
        mu_local=fields["mu_local"].reshape(n, 3),
        rot_local=fields["rot_local"].reshape(n, 4),
        scale_log=fields["scale_log"].reshape(n, 3),
        opacity_raw=fields["opacity_raw"],
        sh_coeffs=fields["sh_coeffs"].reshape(n, 4, 3),
        parent_face=parent,
    )
