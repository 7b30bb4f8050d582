"""Parametric head rig, per-triangle frames, pinhole cameras.

Every deformable quantity here is differentiable by hand: each forward
function has a matching *_vjp that backpropagates an upstream gradient,
validated against central finite differences in the test suite. Geometry is
float64 throughout; meters and radians.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import rotation as rot
from .errors import GeometryError, ParameterError

_MIN_FACE_AREA = 1e-12


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class RiggedMesh:
    """Blendshape rig: neutral vertices + linear bases + one jaw joint.

    jaw_weights ∈ [0,1] per vertex scales the jaw angle so the articulation
    falls off smoothly; 0 leaves a vertex rigid to the skull.
    """

    neutral_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    shape_basis: np.ndarray  # (V, 3, S)
    expr_basis: np.ndarray  # (V, 3, E)
    jaw_pivot: np.ndarray  # (3,)
    jaw_axis: np.ndarray  # (3,) unit
    jaw_weights: np.ndarray  # (V,)

    def __post_init__(self):
        self.neutral_vertices = np.ascontiguousarray(self.neutral_vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.expr_basis = np.asarray(self.expr_basis, dtype=np.float64)
        self.jaw_pivot = np.asarray(self.jaw_pivot, dtype=np.float64)
        self.jaw_axis = rot.normalize(np.asarray(self.jaw_axis, dtype=np.float64))
        self.jaw_weights = np.asarray(self.jaw_weights, dtype=np.float64)
        nv = len(self.neutral_vertices)
        if self.faces.min() < 0 or self.faces.max() >= nv:
            raise GeometryError("face indices out of range")
        for arr, name in ((self.shape_basis, "shape_basis"), (self.expr_basis, "expr_basis")):
            if arr.shape[:2] != (nv, 3):
                raise GeometryError(f"{name} must be (V, 3, K), got {arr.shape}")
        if self.jaw_weights.shape != (nv,):
            raise GeometryError("jaw_weights must have one entry per vertex")
        areas = _face_areas(self.neutral_vertices, self.faces)
        bad = np.nonzero(areas <= _MIN_FACE_AREA)[0]
        if bad.size:
            raise GeometryError(f"degenerate face {bad[0]} in neutral pose (area ≤ {_MIN_FACE_AREA})")

    @property
    def vertices(self) -> np.ndarray:
        """Neutral-pose vertex positions (alias; deform_mesh never mutates)."""
        return self.neutral_vertices

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[2]


@dataclass(frozen=True)
class FrameParams:
    """Per-frame animation parameters; `shape` is static per subject."""

    shape: np.ndarray
    expression: np.ndarray
    jaw_angle: float
    global_rotation: np.ndarray  # (4,) quaternion (w, x, y, z)
    global_translation: np.ndarray  # (3,)

    def replace(self, **kw) -> "FrameParams":
        return dataclasses.replace(self, **kw)

    def validate(self, mesh: RiggedMesh) -> None:
        """Strict ingestion checks (tracking files must satisfy these)."""
        if np.asarray(self.shape).shape != (mesh.n_shape,):
            raise ParameterError(f"shape has {np.asarray(self.shape).size} coefficients, rig expects {mesh.n_shape}")
        if np.asarray(self.expression).shape != (mesh.n_expr,):
            raise ParameterError(
                f"expression has {np.asarray(self.expression).size} coefficients, rig expects {mesh.n_expr}"
            )
        if abs(np.linalg.norm(self.global_rotation) - 1.0) > 1e-6:
            raise ParameterError("global_rotation must be a unit quaternion (within 1e-6)")


@dataclass(frozen=True)
class FrameParamsGrad:
    """Gradient of a scalar with respect to every FrameParams field."""

    d_shape: np.ndarray
    d_expression: np.ndarray
    d_jaw_angle: float
    d_global_rotation: np.ndarray
    d_global_translation: np.ndarray


@dataclass(frozen=True)
class TriangleFrame:
    """Local frame of one triangle: rotation K, centroid V, size l."""

    K: np.ndarray  # (3, 3) orthonormal, det +1
    V: np.ndarray  # (3,)
    l: float  # > 0


class TriangleFrames:
    """Frames of all faces of a mesh, stored as contiguous arrays."""

    __slots__ = ("K", "V", "l")

    def __init__(self, K: np.ndarray, V: np.ndarray, l: np.ndarray):
        self.K = K  # (F, 3, 3)
        self.V = V  # (F, 3)
        self.l = l  # (F,)

    def __len__(self) -> int:
        return len(self.l)

    def __getitem__(self, i: int) -> TriangleFrame:
        return TriangleFrame(K=self.K[i], V=self.V[i], l=float(self.l[i]))


@dataclass
class Camera:
    """Pinhole camera; world_to_cam as quaternion + translation, +z forward."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (4,) world→camera quaternion
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ParameterError("principal point must fall inside the image")
        self.rotation = rot.normalize(np.asarray(self.rotation, dtype=np.float64))
        self.translation = np.asarray(self.translation, dtype=np.float64)

    @property
    def R(self) -> np.ndarray:
        return rot.quat_to_matrix(self.rotation)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.translation

    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and camera-space depths; caller culls z ≤ 0."""
        p = self.to_camera(points)
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[:, 0] / z + self.cx
            v = self.fy * p[:, 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    @classmethod
    def look_at(
        cls,
        position: np.ndarray,
        target: np.ndarray,
        fx: float,
        fy: float,
        width: int,
        height: int,
        up: np.ndarray = np.array([0.0, 1.0, 0.0]),
    ) -> "Camera":
        zc = rot.normalize(np.asarray(target, dtype=np.float64) - position)
        xc = rot.normalize(np.cross(zc, up))
        yc = np.cross(zc, xc)
        R_wc = np.stack([xc, yc, zc], axis=0)
        return cls(
            fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
            width=width, height=height,
            rotation=rot.matrix_to_quat(R_wc), translation=-R_wc @ np.asarray(position, dtype=np.float64),
        )


# ---------------------------------------------------------------------------
# triangle frames
# ---------------------------------------------------------------------------


def _face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)


def triangle_frames(vertices: np.ndarray, faces: np.ndarray) -> TriangleFrames:
    """Per-face frames: K columns (ê₁, n̂×ê₁, n̂), V centroid, l size scalar.

    l = 0.5·(‖e₁‖ + 2A/‖e₁‖): the mean of the first edge length and the
    triangle height perpendicular to it.
    """
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    e1 = v1 - v0
    e2 = v2 - v0
    c = np.cross(e1, e2)
    nc = np.linalg.norm(c, axis=-1)
    bad = np.nonzero(nc <= 2.0 * _MIN_FACE_AREA)[0]
    if bad.size:
        raise GeometryError(f"degenerate face {bad[0]} (area ≤ {_MIN_FACE_AREA})")
    L1 = np.linalg.norm(e1, axis=-1)
    e1_hat = e1 / L1[:, None]
    n_hat = c / nc[:, None]
    b = np.cross(n_hat, e1_hat)
    K = np.stack([e1_hat, b, n_hat], axis=-1)
    V = (v0 + v1 + v2) / 3.0
    area = 0.5 * nc
    l = 0.5 * L1 + area / L1
    return TriangleFrames(K=K, V=V, l=l)


def triangle_frame(v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> TriangleFrame:
    """Frame of a single triangle; see triangle_frames."""
    frames = triangle_frames(np.stack([v0, v1, v2]).astype(np.float64), np.array([[0, 1, 2]]))
    return frames[0]


def triangle_frames_vjp(
    vertices: np.ndarray,
    faces: np.ndarray,
    d_K: np.ndarray,
    d_V: np.ndarray,
    d_l: np.ndarray,
) -> np.ndarray:
    """Backward of triangle_frames: gradient w.r.t. the vertex array."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    e1 = v1 - v0
    e2 = v2 - v0
    c = np.cross(e1, e2)
    nc = np.linalg.norm(c, axis=-1)
    L1 = np.linalg.norm(e1, axis=-1)
    e1_hat = e1 / L1[:, None]
    n_hat = c / nc[:, None]
    area = 0.5 * nc

    d_e1_hat = d_K[:, :, 0].copy()
    d_b = d_K[:, :, 1]
    d_n_hat = d_K[:, :, 2].copy()
    # b = n̂ × ê₁
    d_n_hat += np.cross(e1_hat, d_b)
    d_e1_hat += np.cross(d_b, n_hat)
    # l = 0.5·L1 + A/L1
    d_L1 = d_l * (0.5 - area / L1**2)
    d_area = d_l / L1
    d_nc = 0.5 * d_area
    # unit vectors back to raw
    d_c = rot.normalize_vjp(c, d_n_hat) + d_nc[:, None] * n_hat
    d_e1 = rot.normalize_vjp(e1, d_e1_hat) + d_L1[:, None] * e1_hat
    # c = e1 × e2
    d_e1 += np.cross(e2, d_c)
    d_e2 = np.cross(d_c, e1)

    d_verts = np.zeros_like(vertices, dtype=np.float64)
    third = d_V / 3.0
    np.add.at(d_verts, faces[:, 0], third - d_e1 - d_e2)
    np.add.at(d_verts, faces[:, 1], third + d_e1)
    np.add.at(d_verts, faces[:, 2], third + d_e2)
    return d_verts


# ---------------------------------------------------------------------------
# mesh deformation
# ---------------------------------------------------------------------------


def _blend(mesh: RiggedMesh, params: FrameParams) -> np.ndarray:
    shape = np.asarray(params.shape, dtype=np.float64)
    expr = np.asarray(params.expression, dtype=np.float64)
    if shape.shape != (mesh.n_shape,):
        raise ParameterError(f"shape has {shape.size} coefficients, rig expects {mesh.n_shape}")
    if expr.shape != (mesh.n_expr,):
        raise ParameterError(f"expression has {expr.size} coefficients, rig expects {mesh.n_expr}")
    return (
        mesh.neutral_vertices
        + np.einsum("vds,s->vd", mesh.shape_basis, shape)
        + np.einsum("vde,e->vd", mesh.expr_basis, expr)
    )


def _jaw_terms(mesh: RiggedMesh, base: np.ndarray, jaw_angle: float):
    theta = jaw_angle * mesh.jaw_weights
    cos_t = np.cos(theta)[:, None]
    sin_t = np.sin(theta)[:, None]
    rel = base - mesh.jaw_pivot
    a = mesh.jaw_axis
    a_cross_rel = np.cross(np.broadcast_to(a, rel.shape), rel)
    a_dot_rel = rel @ a
    return rel, a, a_cross_rel, a_dot_rel, cos_t, sin_t


def deform_mesh(mesh: RiggedMesh, params: FrameParams) -> np.ndarray:
    """Deformed vertices: global_rigid ∘ jaw_rotate ∘ (neutral + blendshapes).

    The jaw rotates each vertex about (jaw_pivot, jaw_axis) by
    jaw_angle·jaw_weight, so weight-0 vertices stay rigid. The global
    rotation quaternion is normalized here as part of the computation, which
    keeps the map differentiable in its raw components.
    """
    base = _blend(mesh, params)
    rel, a, a_cross_rel, a_dot_rel, cos_t, sin_t = _jaw_terms(mesh, base, params.jaw_angle)
    rotated = rel * cos_t + a_cross_rel * sin_t + a * (a_dot_rel[:, None] * (1.0 - cos_t))
    jawed = rotated + mesh.jaw_pivot
    R = rot.quat_to_matrix(rot.normalize(np.asarray(params.global_rotation, dtype=np.float64)))
    return jawed @ R.T + np.asarray(params.global_translation, dtype=np.float64)


def deform_mesh_vjp(mesh: RiggedMesh, params: FrameParams, d_vertices: np.ndarray) -> FrameParamsGrad:
    """Backward of deform_mesh for every parameter group."""
    base = _blend(mesh, params)
    rel, a, a_cross_rel, a_dot_rel, cos_t, sin_t = _jaw_terms(mesh, base, params.jaw_angle)
    rotated = rel * cos_t + a_cross_rel * sin_t + a * (a_dot_rel[:, None] * (1.0 - cos_t))
    jawed = rotated + mesh.jaw_pivot
    q_raw = np.asarray(params.global_rotation, dtype=np.float64)
    q = rot.normalize(q_raw)
    R = rot.quat_to_matrix(q)

    d_translation = d_vertices.sum(axis=0)
    d_R = np.einsum("vi,vj->ij", d_vertices, jawed)
    d_rotation = rot.normalize_vjp(q_raw, rot.quat_to_matrix_vjp(q, d_R))
    d_jawed = d_vertices @ R

    d_rel = (
        d_jawed * cos_t
        + np.cross(d_jawed, np.broadcast_to(a, d_jawed.shape)) * sin_t
        + a * ((d_jawed @ a) * (1.0 - cos_t[:, 0]))[:, None]
    )
    d_theta_common = (
        -rel * sin_t + a_cross_rel * cos_t + a * (a_dot_rel[:, None] * sin_t)
    )
    d_theta = np.einsum("vd,vd->v", d_jawed, d_theta_common)
    d_jaw_angle = float(d_theta @ mesh.jaw_weights)

    d_shape = np.einsum("vd,vds->s", d_rel, mesh.shape_basis)
    d_expression = np.einsum("vd,vde->e", d_rel, mesh.expr_basis)
    return FrameParamsGrad(
        d_shape=d_shape,
        d_expression=d_expression,
        d_jaw_angle=d_jaw_angle,
        d_global_rotation=d_rotation,
        d_global_translation=d_translation,
    )


# ---------------------------------------------------------------------------
# synthetic test scene
# ---------------------------------------------------------------------------

_ICO_T = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        (-1, _ICO_T, 0), (1, _ICO_T, 0), (-1, -_ICO_T, 0), (1, -_ICO_T, 0),
        (0, -1, _ICO_T), (0, 1, _ICO_T), (0, -1, -_ICO_T), (0, 1, -_ICO_T),
        (_ICO_T, 0, -1), (_ICO_T, 0, 1), (-_ICO_T, 0, -1), (-_ICO_T, 0, 1),
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ],
    dtype=np.int64,
)


def _subdivided_sphere(levels: int) -> tuple[np.ndarray, np.ndarray]:
    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = _ICO_FACES.tolist()
    for _ in range(levels):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        faces = [
            sub
            for (a, b, c) in faces
            for sub in (
                (a, midpoint(a, b), midpoint(a, c)),
                (midpoint(a, b), b, midpoint(b, c)),
                (midpoint(a, c), midpoint(b, c), c),
                (midpoint(a, b), midpoint(b, c), midpoint(a, c)),
            )
        ]
    return np.array(verts), np.array(faces, dtype=np.int64)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def synthetic_head(
    seed: int,
    image_size: tuple[int, int] = (96, 96),
    n_frames: int = 5,
    n_cameras: int = 3,
) -> tuple[RiggedMesh, list[FrameParams], list[Camera]]:
    """Deterministic ellipsoidal head rig with expressions, a jaw, and cameras.

    Returns the rig, n_frames animation parameter sets (shared shape
    coefficients, sinusoidal expressions, an opening jaw, gentle head
    motion), and n_cameras pinhole cameras on a frontal arc aimed at the
    head centroid.
    """
    rng = np.random.default_rng(seed)
    unit, faces = _subdivided_sphere(2)
    radii = np.array([0.085, 0.105, 0.090])
    verts = unit * radii * (1.0 + 0.035 * rng.standard_normal(len(unit)))[:, None]

    # jaw: lower-face vertices, weight easing in below y = -0.03
    w = _smoothstep((-verts[:, 1] - 0.03) / 0.04)
    jaw_pivot = np.array([0.0, -0.02, -0.01])
    jaw_axis = np.array([1.0, 0.0, 0.0])

    # expression bases: radial bumps around frontal anchor directions
    n_expr = 4
    expr_basis = np.empty((len(verts), 3, n_expr))
    for k in range(n_expr):
        anchor = rot.normalize(rng.normal(size=3) * np.array([1.0, 1.0, 0.5]) + np.array([0, 0, 1.5]))
        falloff = np.exp(-np.sum((unit - anchor) ** 2, axis=1) / (2 * 0.28**2))
        expr_basis[:, :, k] = unit * (0.012 * falloff)[:, None]

    # shape bases: vertical and frontal stretches
    shape_basis = np.zeros((len(verts), 3, 2))
    shape_basis[:, 1, 0] = 0.10 * verts[:, 1]
    shape_basis[:, 2, 1] = 0.10 * verts[:, 2]

    mesh = RiggedMesh(
        neutral_vertices=verts,
        faces=faces,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        jaw_pivot=jaw_pivot,
        jaw_axis=jaw_axis,
        jaw_weights=w,
    )

    shape = rng.uniform(-0.5, 0.5, size=2)
    freqs = rng.integers(1, 3, size=n_expr)
    phases = rng.uniform(0, 2 * np.pi, size=n_expr)
    amps = rng.uniform(0.3, 0.8, size=n_expr)
    params = []
    for t in range(n_frames):
        u = t / max(n_frames, 1)
        expression = amps * np.sin(2 * np.pi * freqs * u + phases)
        jaw_angle = 0.22 * (0.5 - 0.5 * np.cos(2 * np.pi * u))
        nod = 0.06 * np.sin(2 * np.pi * u + 0.7)
        q = rot.quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), nod)
        translation = np.array([0.0015 * np.sin(2 * np.pi * u), 0.0, 0.0])
        params.append(
            FrameParams(
                shape=shape.copy(),
                expression=expression,
                jaw_angle=float(jaw_angle),
                global_rotation=q,
                global_translation=translation,
            )
        )

    width, height = image_size
    centroid = verts.mean(axis=0)
    cams = []
    yaws = np.linspace(-20.0, 20.0, n_cameras) if n_cameras > 1 else np.array([0.0])
    dist = 0.45
    for yaw_deg in yaws:
        yaw = np.deg2rad(yaw_deg)
        elev = np.deg2rad(6.0)
        pos = centroid + dist * np.array(
            [np.sin(yaw) * np.cos(elev), np.sin(elev), np.cos(yaw) * np.cos(elev)]
        )
        cams.append(
            Camera.look_at(pos, centroid, fx=1.45 * width, fy=1.45 * width, width=width, height=height)
        )
    return mesh, params, cams
