"""Forward splatting: closed-form single/two-splat oracles and invariants."""

from __future__ import annotations

import numpy as np
import pytest

from gswap import cloud as cl
from gswap import geometry as geo
from gswap import renderer as rd
from gswap import rotation as rot
from gswap.errors import NumericError
from helpers import random_unit_quats

BLACK = np.zeros(3)


def flat_triangle_scene():
    """One triangle in the z=0 plane, camera 1 m in front on the +z side."""
    verts = np.array([[-0.5, -0.4, 0.0], [0.5, -0.4, 0.0], [0.0, 0.6, 0.0]])
    faces = np.array([[0, 1, 2]])
    frames = geo.triangle_frames(verts, faces)
    cam = geo.Camera(
        fx=30.0, fy=30.0, cx=16.0, cy=16.0, width=33, height=33,
        rotation=np.array([1.0, 0, 0, 0]), translation=np.array([0.0, 0.0, 1.0]),
    )
    return frames, cam


def make_cloud(mu_world, frames, *, opacity_raw, sh_dc, scale_world, face=0):
    """Build a one-splat cloud whose global center lands on mu_world."""
    K, V, l = frames.K[face], frames.V[face], frames.l[face]
    mu_local = K.T @ ((np.asarray(mu_world, dtype=np.float64) - V) / l)
    scale_log = np.log(np.full(3, scale_world / l))
    sh = np.zeros((4, 3))
    sh[0] = (np.asarray(sh_dc, dtype=np.float64) - 0.5) / cl.SH_C0
    return cl.GaussianCloud(
        mu_local=mu_local[None],
        rot_local=np.array([[1.0, 0, 0, 0]]),
        scale_log=scale_log[None],
        opacity_raw=np.array([float(opacity_raw)]),
        sh_coeffs=sh[None],
        parent_face=np.array([face], dtype=np.int64),
    )


def cat_clouds(a, b):
    return cl.GaussianCloud(
        mu_local=np.concatenate([a.mu_local, b.mu_local]),
        rot_local=np.concatenate([a.rot_local, b.rot_local]),
        scale_log=np.concatenate([a.scale_log, b.scale_log]),
        opacity_raw=np.concatenate([a.opacity_raw, b.opacity_raw]),
        sh_coeffs=np.concatenate([a.sh_coeffs, b.sh_coeffs]),
        parent_face=np.concatenate([a.parent_face, b.parent_face]),
    )


class TestForward:
    def test_single_center_splat_is_red(self, backend):
        frames, cam = flat_triangle_scene()
        c = make_cloud([0.0, 0.0, 0.0], frames, opacity_raw=40.0, sh_dc=[1.0, 0, 0], scale_world=0.1)
        img = rd.render(c, frames, cam, BLACK)
        center = img.rgb[16, 16]
        np.testing.assert_allclose(center, [1.0, 0.0, 0.0], atol=0.02)
        assert img.alpha[16, 16] >= 0.99
        # far corner is untouched: alpha exactly zero where nothing splats
        assert img.alpha[0, 0] == 0.0
        assert img.rgb.min() >= 0.0 and img.rgb.max() <= 1.0

    def test_no_splats_in_front(self, backend):
        frames, cam = flat_triangle_scene()
        # send the splat 2 m behind the camera (it sits at world z = −1)
        c = make_cloud([0.0, 0.0, -3.0], frames, opacity_raw=2.0, sh_dc=[1, 1, 1], scale_world=0.1)
        bg = np.array([0.2, 0.4, 0.6])
        img = rd.render(c, frames, cam, bg)
        np.testing.assert_array_equal(img.alpha, np.zeros((33, 33)))
        np.testing.assert_allclose(img.rgb, np.broadcast_to(bg, (33, 33, 3)))

    def test_opaque_front_fully_occludes(self, backend):
        frames, cam = flat_triangle_scene()
        # front splat a wall: opacity ≈ 1 across the whole view, so the
        # transmittance floor zeroes everything behind it
        front = make_cloud([0.0, 0.0, -0.3], frames, opacity_raw=40.0, sh_dc=[0.2, 0.7, 0.4],
                           scale_world=100.0)
        back = make_cloud([0.0, 0.0, 0.0], frames, opacity_raw=3.0, sh_dc=[1.0, 0, 0],
                          scale_world=0.3)
        both = cat_clouds(front, back)
        img_both = rd.render(both, frames, cam, BLACK)
        img_front = rd.render(front, frames, cam, BLACK)
        assert np.max(np.abs(img_both.rgb - img_front.rgb)) < 1e-6
        assert np.max(np.abs(img_both.alpha - img_front.alpha)) < 1e-6

    def test_two_term_compositing_by_hand(self, backend):
        # two centered splats with mild opacity: the center pixel must equal
        # c1·a1 + c2·a2·(1−a1), with w=1 at both centers
        frames, cam = flat_triangle_scene()
        a1, a2 = 0.7, 0.6
        c1 = make_cloud([0.0, 0.0, -0.3], frames, opacity_raw=cl.inverse_sigmoid(np.array(a1)),
                        sh_dc=[0.9, 0.1, 0.2], scale_world=0.2)
        c2 = make_cloud([0.0, 0.0, 0.0], frames, opacity_raw=cl.inverse_sigmoid(np.array(a2)),
                        sh_dc=[0.1, 0.8, 0.3], scale_world=0.2)
        img = rd.render(cat_clouds(c1, c2), frames, cam, BLACK)
        expected = np.array([0.9, 0.1, 0.2]) * a1 + np.array([0.1, 0.8, 0.3]) * a2 * (1 - a1)
        np.testing.assert_allclose(img.rgb[16, 16], expected, atol=1e-9)
        assert img.alpha[16, 16] == pytest.approx(1 - (1 - a1) * (1 - a2), abs=1e-9)

    def test_alpha_monotone_in_splats(self, backend, rng):
        frames, cam = flat_triangle_scene()
        base = make_cloud([0.05, -0.1, 0.1], frames, opacity_raw=0.5, sh_dc=[0.4, 0.4, 0.4],
                          scale_world=0.15)
        extra = make_cloud([-0.1, 0.05, 0.2], frames, opacity_raw=1.0, sh_dc=[0.6, 0.2, 0.2],
                           scale_world=0.1)
        a_base = rd.render(base, frames, cam, BLACK).alpha
        a_more = rd.render(cat_clouds(base, extra), frames, cam, BLACK).alpha
        assert np.all(a_more >= a_base - 1e-12)

    def test_depth_tie_determinism(self, backend):
        frames, cam = flat_triangle_scene()
        red = make_cloud([0.0, 0.0, 0.1], frames, opacity_raw=0.8, sh_dc=[1, 0, 0], scale_world=0.2)
        blue = make_cloud([0.0, 0.0, 0.1], frames, opacity_raw=0.8, sh_dc=[0, 0, 1], scale_world=0.2)
        both = cat_clouds(red, blue)
        img1 = rd.render(both, frames, cam, BLACK)
        img2 = rd.render(both, frames, cam, BLACK)
        np.testing.assert_array_equal(img1.rgb, img2.rgb)
        # equal depth: earlier index in front — red dominates the center
        assert img1.rgb[16, 16, 0] > img1.rgb[16, 16, 2]

    def test_background_linearity(self, backend, rng):
        frames, cam = flat_triangle_scene()
        c = make_cloud([0.0, 0.05, 0.0], frames, opacity_raw=0.3, sh_dc=[0.7, 0.5, 0.2],
                       scale_world=0.12)
        bg = np.array([0.3, 0.6, 0.9])
        with_bg = rd.render(c, frames, cam, bg)
        without = rd.render(c, frames, cam, BLACK)
        np.testing.assert_allclose(
            with_bg.rgb - without.rgb, (1.0 - with_bg.alpha)[..., None] * bg, atol=1e-6
        )

    def test_rigid_equivariance(self, backend, rng):
        mesh, params, cams = geo.synthetic_head(seed=0, image_size=(48, 48))
        cam = cams[1]
        verts = geo.deform_mesh(mesh, params[0])
        frames = geo.triangle_frames(verts, mesh.faces)
        c = cl.init_cloud(mesh)
        c.sh_coeffs[:, 0, :] = rng.normal(scale=0.4, size=(c.count, 3))
        img1 = rd.render(c, frames, cam, BLACK)

        q = random_unit_quats(rng, 1)[0]
        R = rot.quat_to_matrix(q)
        t = rng.normal(size=3) * 0.2
        frames2 = geo.triangle_frames(verts @ R.T + t, mesh.faces)
        # camera follows: world_to_cam' = world_to_cam ∘ inverse(rigid)
        R2 = cam.R @ R.T
        cam2 = geo.Camera(
            fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, width=cam.width, height=cam.height,
            rotation=rot.matrix_to_quat(R2), translation=cam.translation - R2 @ t,
        )
        img2 = rd.render(c, frames2, cam2, BLACK)
        assert np.max(np.abs(img1.rgb - img2.rgb)) < 1e-5
        assert np.max(np.abs(img1.alpha - img2.alpha)) < 1e-5

    def test_non_finite_rejected(self, backend):
        frames, cam = flat_triangle_scene()
        c = make_cloud([0.0, 0.0, 0.0], frames, opacity_raw=1.0, sh_dc=[1, 0, 0], scale_world=0.1)
        c.mu_local[0, 1] = np.nan
        with pytest.raises(NumericError, match="splat 0"):
            rd.render(c, frames, cam, BLACK)


class TestBackendParity:
    def test_forward_matches(self):
        pytest.importorskip("numba")
        from gswap import backend as bk

        mesh, params, cams = geo.synthetic_head(seed=3, image_size=(40, 40))
        verts = geo.deform_mesh(mesh, params[1])
        frames = geo.triangle_frames(verts, mesh.faces)
        rng = np.random.default_rng(5)
        c = cl.init_cloud(mesh)
        c.sh_coeffs[:] = rng.normal(scale=0.3, size=c.sh_coeffs.shape)
        c.opacity_raw[:] = rng.normal(size=c.count)
        c.mu_local[:] = rng.normal(scale=0.2, size=(c.count, 3))
        bg = np.array([0.1, 0.2, 0.3])

        prev = bk.get_backend()
        try:
            bk.set_backend("numpy")
            img_np = rd.render(c, frames, cams[0], bg)
            bk.set_backend("numba")
            img_nb = rd.render(c, frames, cams[0], bg)
        finally:
            bk.set_backend(prev)
        assert np.max(np.abs(img_np.rgb - img_nb.rgb)) < 1e-9
        assert np.max(np.abs(img_np.alpha - img_nb.alpha)) < 1e-9
