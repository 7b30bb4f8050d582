"""Differentiable EWA splatting of triangle-bound Gaussian clouds.

The forward pass projects each world-space Gaussian through a pinhole
camera, low-passes the 2D covariance, and alpha-blends depth-sorted splats
front to back. The backward pass is fully analytic: screen-space gradients
from the compositing kernel are chained through projection, the triangle
binding, and optionally the mesh rig down to animation parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backend as bk
from . import rotation as rot
from .cloud import SH_C0, SH_C1, GaussianCloud, sigmoid
from .errors import ContractError, NumericError, ParameterError
from .geometry import (
    Camera,
    FrameParams,
    FrameParamsGrad,
    RiggedMesh,
    TriangleFrames,
    deform_mesh,
    deform_mesh_vjp,
    triangle_frames,
    triangle_frames_vjp,
)
from .kernels_numpy import ALPHA_MIN

COV2_BLUR = 0.3  # screen-space low-pass added to every projected covariance
Z_NEAR = 0.01  # splats at or behind this camera-space depth are culled
RADIUS_SIGMAS = 3.0  # bbox half-width in standard deviations


@dataclass
class RenderedImage:
    """Composited color and coverage of one camera view."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) in [0, 1]; exactly 0 where nothing splats


@dataclass
class FrameGradients:
    """Gradient of a scalar w.r.t. every triangle frame of the mesh."""

    d_K: np.ndarray  # (F, 3, 3)
    d_V: np.ndarray  # (F, 3)
    d_l: np.ndarray  # (F,)


@dataclass
class SplatGradients:
    """Gradients w.r.t. the raw stored cloud fields (shapes congruent).

    `d_mesh_params` is filled when a rig is supplied to render_backward;
    `d_mean2d` and `visible` expose the screen-space positional gradient
    and coverage used as the densification signal.
    """

    d_mu_local: np.ndarray
    d_rot_local: np.ndarray
    d_scale_raw: np.ndarray
    d_opacity_raw: np.ndarray
    d_sh: np.ndarray
    d_mesh_params: FrameParamsGrad | None
    d_frames: FrameGradients
    d_mean2d: np.ndarray  # (N, 2) pixels
    visible: np.ndarray  # (N,) bool


_CLOUD_FIELDS = ("mu_local", "rot_local", "scale_log", "opacity_raw", "sh_coeffs")


def _check_cloud(cloud: GaussianCloud) -> None:
    if cloud.count < 1:
        raise ParameterError("cannot render an empty cloud")
    for name in _CLOUD_FIELDS:
        arr = np.asarray(getattr(cloud, name))
        flat = arr.reshape(arr.shape[0], -1)
        bad = ~np.isfinite(flat).all(axis=1)
        if bad.any():
            raise NumericError(f"splat {int(np.argmax(bad))}: non-finite {name}")


class _Prepared:
    """Per-splat arrays, culled and depth-sorted, ready for compositing."""

    __slots__ = (
        "order", "pf", "K", "l", "mu_local", "rot_local", "r_hat", "R_loc",
        "R_g", "s_glob", "opac", "t", "J", "Sc", "Mc", "conic", "means2d",
        "bboxes", "dirvec", "ndir", "raw_color", "color", "row_start", "row_entries",
        "height", "width", "n_faces",
    )


def _row_bins(bboxes: np.ndarray, height: int) -> tuple[np.ndarray, np.ndarray]:
    """CSR lists of splats per image row, depth order preserved."""
    y0 = bboxes[:, 2]
    counts = bboxes[:, 3] - y0
    total = int(counts.sum())
    if total == 0:
        return np.zeros(height + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    entries = np.repeat(np.arange(len(bboxes), dtype=np.int64), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rows = np.repeat(y0, counts) + (np.arange(total) - np.repeat(starts, counts))
    order = np.lexsort((entries, rows))
    row_start = np.searchsorted(rows[order], np.arange(height + 1))
    return row_start.astype(np.int64), entries[order]


def _prepare(cloud: GaussianCloud, frames: TriangleFrames, camera: Camera) -> _Prepared:
    _check_cloud(cloud)
    cloud.check_binding(len(frames))

    pf_all = cloud.parent_face
    K_all = frames.K[pf_all]
    l_all = frames.l[pf_all]
    mu_w = (
        l_all[:, None] * np.einsum("nij,nj->ni", K_all, cloud.mu_local)
        + frames.V[pf_all]
    )
    opac_all = sigmoid(cloud.opacity_raw)

    W = camera.R
    t_all = mu_w @ W.T + camera.translation
    keep = (t_all[:, 2] > Z_NEAR) & (opac_all >= ALPHA_MIN)
    idx = np.flatnonzero(keep)
    order = idx[np.argsort(t_all[idx, 2], kind="stable")]

    p = _Prepared()
    p.height, p.width = camera.height, camera.width
    p.n_faces = len(frames)

    t = t_all[order]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    u = camera.fx * tx / tz + camera.cx
    v = camera.fy * ty / tz + camera.cy

    K = K_all[order]
    l = l_all[order]
    r_hat = rot.normalize(cloud.rot_local[order])
    R_loc = rot.quat_to_matrix(r_hat)
    R_g = np.einsum("nij,njk->nik", K, R_loc)
    s_glob = l[:, None] * np.exp(cloud.scale_log[order])

    M = R_g * s_glob[:, None, :]
    Mc = np.einsum("ij,njk->nik", W, M)
    Sc = np.einsum("nik,njk->nij", Mc, Mc)

    n = len(order)
    J = np.zeros((n, 2, 3))
    inv_z = 1.0 / tz
    J[:, 0, 0] = camera.fx * inv_z
    J[:, 0, 2] = -camera.fx * tx * inv_z**2
    J[:, 1, 1] = camera.fy * inv_z
    J[:, 1, 2] = -camera.fy * ty * inv_z**2
    cov2 = np.einsum("nab,nbc,ndc->nad", J, Sc, J)
    cov2[:, 0, 0] += COV2_BLUR
    cov2[:, 1, 1] += COV2_BLUR
    ca, cb, cc = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = ca * cc - cb * cb
    conic = np.stack([cc / det, -cb / det, ca / det], axis=-1)

    lam_max = 0.5 * (ca + cc) + np.sqrt(np.maximum(0.25 * (ca - cc) ** 2 + cb * cb, 0.0))
    radius = np.ceil(RADIUS_SIGMAS * np.sqrt(lam_max))
    x0 = np.clip(np.floor(u - radius), 0, camera.width).astype(np.int64)
    x1 = np.clip(np.floor(u + radius) + 1, 0, camera.width).astype(np.int64)
    y0 = np.clip(np.floor(v - radius), 0, camera.height).astype(np.int64)
    y1 = np.clip(np.floor(v + radius) + 1, 0, camera.height).astype(np.int64)
    on_image = (x0 < x1) & (y0 < y1)

    sub = np.flatnonzero(on_image)
    p.order = order[sub]
    p.pf = pf_all[p.order]
    p.K, p.l = K[sub], l[sub]
    p.mu_local = cloud.mu_local[p.order]
    p.rot_local = cloud.rot_local[p.order]
    p.r_hat, p.R_loc, p.R_g = r_hat[sub], R_loc[sub], R_g[sub]
    p.s_glob = s_glob[sub]
    p.opac = opac_all[p.order]
    p.t, p.J, p.Sc, p.Mc = t[sub], J[sub], Sc[sub], Mc[sub]
    p.conic = np.ascontiguousarray(conic[sub])
    p.means2d = np.ascontiguousarray(np.stack([u, v], axis=-1)[sub])
    p.bboxes = np.ascontiguousarray(np.stack([x0, x1, y0, y1], axis=-1)[sub])

    # The view direction is expressed in the parent triangle's frame, so a
    # splat keeps its color when the head (and camera with it) moves rigidly;
    # appearance is attached to the surface, not to world axes.
    p.dirvec = mu_w[p.order] - camera.center()
    p.ndir = rot.normalize(p.dirvec)
    viewdir = np.einsum("nji,nj->ni", p.K, p.ndir)
    sh = cloud.sh_coeffs[p.order]
    dx, dy, dz = viewdir[:, 0:1], viewdir[:, 1:2], viewdir[:, 2:3]
    p.raw_color = (
        0.5
        + SH_C0 * sh[:, 0, :]
        - SH_C1 * (dy * sh[:, 1, :] - dz * sh[:, 2, :] + dx * sh[:, 3, :])
    )
    p.color = np.ascontiguousarray(np.clip(p.raw_color, 0.0, 1.0))
    p.row_start, p.row_entries = _row_bins(p.bboxes, camera.height)
    return p


def _background(background) -> np.ndarray:
    bg = np.asarray(background, dtype=np.float64)
    return np.ascontiguousarray(np.broadcast_to(bg, (3,)))


def render(
    cloud: GaussianCloud,
    mesh_frames: TriangleFrames,
    camera: Camera,
    background,
) -> RenderedImage:
    """Composite the cloud over a constant background color."""
    p = _prepare(cloud, mesh_frames, camera)
    rgb, alpha = bk.kernels().composite_forward(
        p.height, p.width, _background(background), p.means2d, p.conic,
        p.color, p.opac, p.bboxes, p.row_start, p.row_entries,
    )
    return RenderedImage(rgb=rgb, alpha=alpha)


def _parse_upstream(upstream, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    try:
        d_rgb, d_alpha = upstream
    except (TypeError, ValueError) as exc:
        raise ContractError("upstream must be a (d_rgb, d_alpha) pair") from exc
    d_rgb = np.ascontiguousarray(d_rgb, dtype=np.float64)
    if d_alpha is None:
        d_alpha = np.zeros((height, width))
    d_alpha = np.ascontiguousarray(d_alpha, dtype=np.float64)
    if d_rgb.shape != (height, width, 3) or d_alpha.shape != (height, width):
        raise ContractError(
            f"upstream shapes {d_rgb.shape}/{d_alpha.shape} do not match the "
            f"{height}x{width} camera"
        )
    return d_rgb, d_alpha


def render_backward(
    cloud: GaussianCloud,
    mesh_frames: TriangleFrames,
    camera: Camera,
    upstream,
    *,
    background=0.0,
    rig: tuple[RiggedMesh, FrameParams] | None = None,
) -> SplatGradients:
    """Chain upstream image gradients down to raw splat (and rig) parameters.

    `upstream` is the pair (dLoss/dRGB, dLoss/dAlpha); pass None for the
    alpha half when the loss ignores coverage. `background` must repeat the
    forward call's value (alpha gradients see through to it); training
    composites over black, the default. With `rig=(mesh, params)` the
    gradient is chained through the triangle frames and the mesh
    deformation onto the animation parameters.
    """
    d_rgb, d_alpha = _parse_upstream(upstream, camera.height, camera.width)
    p = _prepare(cloud, mesh_frames, camera)

    n = len(p.order)
    grads = SplatGradients(
        d_mu_local=np.zeros_like(cloud.mu_local),
        d_rot_local=np.zeros_like(cloud.rot_local),
        d_scale_raw=np.zeros_like(cloud.scale_log),
        d_opacity_raw=np.zeros_like(cloud.opacity_raw),
        d_sh=np.zeros_like(cloud.sh_coeffs),
        d_mesh_params=None,
        d_frames=FrameGradients(
            d_K=np.zeros((p.n_faces, 3, 3)),
            d_V=np.zeros((p.n_faces, 3)),
            d_l=np.zeros(p.n_faces),
        ),
        d_mean2d=np.zeros((cloud.count, 2)),
        visible=np.zeros(cloud.count, dtype=bool),
    )
    if n:
        d_means2d, d_conic, d_color, d_opac_act = bk.kernels().composite_backward(
            p.height, p.width, _background(background), p.means2d, p.conic, p.color,
            p.opac, p.bboxes, d_rgb, d_alpha, p.row_start, p.row_entries,
        )
        _chain_to_cloud(p, cloud, camera, grads, d_means2d, d_conic, d_color, d_opac_act)

    if rig is not None:
        mesh, params = rig
        verts = deform_mesh(mesh, params)
        check = triangle_frames(verts, mesh.faces)
        if not (
            np.allclose(check.K, mesh_frames.K, atol=1e-9)
            and np.allclose(check.V, mesh_frames.V, atol=1e-9)
            and np.allclose(check.l, mesh_frames.l, atol=1e-9)
        ):
            raise ContractError("rig does not reproduce the frames rendered from")
        d_verts = triangle_frames_vjp(
            verts, mesh.faces, grads.d_frames.d_K, grads.d_frames.d_V, grads.d_frames.d_l
        )
        grads.d_mesh_params = deform_mesh_vjp(mesh, params, d_verts)
    return grads


def _chain_to_cloud(
    p: _Prepared,
    cloud: GaussianCloud,
    camera: Camera,
    grads: SplatGradients,
    d_means2d: np.ndarray,
    d_conic: np.ndarray,
    d_color: np.ndarray,
    d_opac_act: np.ndarray,
) -> None:
    """Screen-space kernel gradients → raw cloud fields and frame terms."""
    sh = cloud.sh_coeffs[p.order]
    viewdir = np.einsum("nji,nj->ni", p.K, p.ndir)
    dirx, diry, dirz = viewdir[:, 0:1], viewdir[:, 1:2], viewdir[:, 2:3]

    # color: clamp mask, SH bands, view direction
    open_mask = (p.raw_color > 0.0) & (p.raw_color < 1.0)
    d_raw = d_color * open_mask
    d_sh = np.zeros_like(sh)
    d_sh[:, 0, :] = SH_C0 * d_raw
    d_sh[:, 1, :] = -SH_C1 * diry * d_raw
    d_sh[:, 2, :] = SH_C1 * dirz * d_raw
    d_sh[:, 3, :] = -SH_C1 * dirx * d_raw
    d_ldir = np.stack(
        [
            -SH_C1 * (sh[:, 3, :] * d_raw).sum(axis=1),
            -SH_C1 * (sh[:, 1, :] * d_raw).sum(axis=1),
            SH_C1 * (sh[:, 2, :] * d_raw).sum(axis=1),
        ],
        axis=-1,
    )
    # viewdir = Kᵀ·n̂: split the signal between the unit direction and the frame
    d_ndir = np.einsum("nij,nj->ni", p.K, d_ldir)
    d_K_view = np.einsum("nj,ni->nji", p.ndir, d_ldir)
    d_mu_w = rot.normalize_vjp(p.dirvec, d_ndir)

    # conic = inverse(cov2): dL/dCov = −Σ⁻¹ G Σ⁻¹
    G_Q = np.empty((len(p.order), 2, 2))
    G_Q[:, 0, 0] = d_conic[:, 0]
    G_Q[:, 0, 1] = G_Q[:, 1, 0] = 0.5 * d_conic[:, 1]
    G_Q[:, 1, 1] = d_conic[:, 2]
    Qm = np.empty_like(G_Q)
    Qm[:, 0, 0] = p.conic[:, 0]
    Qm[:, 0, 1] = Qm[:, 1, 0] = p.conic[:, 1]
    Qm[:, 1, 1] = p.conic[:, 2]
    d_cov2 = -np.einsum("nab,nbc,ncd->nad", Qm, G_Q, Qm)

    # cov2 = J Σc Jᵀ + blur
    d_J = 2.0 * np.einsum("nab,nbc,ncd->nad", d_cov2, p.J, p.Sc)
    d_Sc = np.einsum("nba,nbc,ncd->nad", p.J, d_cov2, p.J)
    # Σc = Mc Mcᵀ, Mc = W·R_g·diag(s̃)
    d_Mc = 2.0 * np.einsum("nab,nbc->nac", d_Sc, p.Mc)
    W = camera.R
    d_M = np.einsum("ba,nbc->nac", W, d_Mc)
    d_R_g = d_M * p.s_glob[:, None, :]
    d_s_glob = np.einsum("nik,nik->nk", p.R_g, d_M)

    # projection and Jacobian entries → camera-space point
    tx, ty, tz = p.t[:, 0], p.t[:, 1], p.t[:, 2]
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    inv_z3 = inv_z2 * inv_z
    du, dv = d_means2d[:, 0], d_means2d[:, 1]
    fx, fy = camera.fx, camera.fy
    d_tx = du * fx * inv_z - d_J[:, 0, 2] * fx * inv_z2
    d_ty = dv * fy * inv_z - d_J[:, 1, 2] * fy * inv_z2
    d_tz = (
        -(du * fx * tx + dv * fy * ty) * inv_z2
        - (d_J[:, 0, 0] * fx + d_J[:, 1, 1] * fy) * inv_z2
        + (d_J[:, 0, 2] * fx * tx + d_J[:, 1, 2] * fy * ty) * 2.0 * inv_z3
    )
    d_mu_w += np.stack([d_tx, d_ty, d_tz], axis=-1) @ W

    # binding: μ̃ = l·K·μ + V, R_g = K·R(r̂), s̃ = l·s
    exp_slog = p.s_glob / p.l[:, None]
    d_scale_raw = d_s_glob * p.s_glob
    d_l = (d_s_glob * exp_slog).sum(axis=1)
    K_mu = np.einsum("nij,nj->ni", p.K, p.mu_local)
    d_l += (d_mu_w * K_mu).sum(axis=1)
    d_mu_local = p.l[:, None] * np.einsum("nji,nj->ni", p.K, d_mu_w)
    d_K = p.l[:, None, None] * np.einsum("ni,nj->nij", d_mu_w, p.mu_local)
    d_K += np.einsum("nik,njk->nij", d_R_g, p.R_loc)
    d_K += d_K_view
    d_R_loc = np.einsum("nki,nkj->nij", p.K, d_R_g)
    d_rot_local = rot.normalize_vjp(p.rot_local, rot.quat_to_matrix_vjp(p.r_hat, d_R_loc))
    d_opacity_raw = d_opac_act * p.opac * (1.0 - p.opac)

    grads.d_mu_local[p.order] = d_mu_local
    grads.d_rot_local[p.order] = d_rot_local
    grads.d_scale_raw[p.order] = d_scale_raw
    grads.d_opacity_raw[p.order] = d_opacity_raw
    grads.d_sh[p.order] = d_sh
    grads.d_mean2d[p.order] = d_means2d
    grads.visible[p.order] = True
    np.add.at(grads.d_frames.d_K, p.pf, d_K)
    np.add.at(grads.d_frames.d_V, p.pf, d_mu_w)
    np.add.at(grads.d_frames.d_l, p.pf, d_l)
