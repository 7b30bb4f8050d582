"""Splat cloud: init, local→global transform, covariance, checkpoint format.

Worked expectations are hand matrix arithmetic; gradient checks are central
finite differences; file-format checks freeze the binary layout.
"""

from __future__ import annotations

import numpy as np
import pytest

from gswap import cloud as cl
from gswap import geometry as geo
from gswap import rotation as rot
from gswap.errors import BindingError, ParameterError
from helpers import central_diff, max_rel_err, random_unit_quats


@pytest.fixture()
def head():
    mesh, params, cams = geo.synthetic_head(seed=0)
    return mesh, params, cams


def random_cloud(rng, n, n_faces):
    c = cl.GaussianCloud(
        mu_local=rng.normal(scale=0.3, size=(n, 3)),
        rot_local=random_unit_quats(rng, n),
        scale_log=rng.normal(scale=0.3, size=(n, 3)),
        opacity_raw=rng.normal(size=n),
        sh_coeffs=rng.normal(scale=0.2, size=(n, 4, 3)),
        parent_face=rng.integers(0, n_faces, size=n),
    )
    return c


class TestInitCloud:
    def test_one_splat_per_face(self, head):
        mesh, _, _ = head
        c = cl.init_cloud(mesh)
        n = len(mesh.faces)
        assert c.count == n
        np.testing.assert_array_equal(c.mu_local, np.zeros((n, 3)))
        np.testing.assert_array_equal(c.parent_face, np.arange(n))
        np.testing.assert_allclose(c.opacity, 0.5, atol=1e-6)
        np.testing.assert_array_equal(c.rot_local, np.tile([1.0, 0, 0, 0], (n, 1)))
        # unit local scale pre-regularization; log storage holds zeros
        np.testing.assert_array_equal(c.scale_local, np.ones((n, 3)))

    def test_initial_color_is_mid_gray(self, head):
        mesh, _, _ = head
        c = cl.init_cloud(mesh)
        dirs = rot.normalize(np.random.default_rng(0).normal(size=(c.count, 3)))
        np.testing.assert_allclose(cl.sh_color(c.sh_coeffs, dirs), 0.5)


class TestLocalToGlobal:
    def test_identity_frames(self):
        rng = np.random.default_rng(1)
        c = random_cloud(rng, 4, 1)
        c.parent_face[:] = 0
        frames = geo.TriangleFrames(
            K=np.eye(3)[None], V=np.zeros((1, 3)), l=np.ones(1)
        )
        g = cl.local_to_global(c, frames)
        np.testing.assert_allclose(g.mu_global, c.mu_local)
        np.testing.assert_allclose(g.scale_global, c.scale_local)
        # identity frame leaves the local rotation unchanged
        np.testing.assert_allclose(g.rot_global, c.rot_local, atol=1e-12)

    def test_rotated_scaled_frame_moves_center(self):
        # K = 90° about z, l = 2, μ = (1,0,0): l·K·μ = (0,2,0)
        K = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        frames = geo.TriangleFrames(K=K[None], V=np.zeros((1, 3)), l=np.array([2.0]))
        c = cl.GaussianCloud(
            mu_local=np.array([[1.0, 0.0, 0.0]]),
            rot_local=np.array([[1.0, 0, 0, 0]]),
            scale_log=np.zeros((1, 3)),
            opacity_raw=np.zeros(1),
            sh_coeffs=np.zeros((1, 4, 3)),
            parent_face=np.zeros(1, dtype=np.int64),
        )
        g = cl.local_to_global(c, frames)
        np.testing.assert_allclose(g.mu_global, [[0.0, 2.0, 0.0]], atol=1e-12)

    def test_scale_is_l_times_local(self):
        rng = np.random.default_rng(2)
        c = random_cloud(rng, 1, 1)
        c.parent_face[:] = 0
        c.scale_log[:] = 0.0  # local scale (1,1,1)
        frames = geo.TriangleFrames(K=np.eye(3)[None], V=np.zeros((1, 3)), l=np.array([0.5]))
        g = cl.local_to_global(c, frames)
        np.testing.assert_allclose(g.scale_global, [[0.5, 0.5, 0.5]])

    def test_rotation_composes_like_matrices(self):
        rng = np.random.default_rng(3)
        c = random_cloud(rng, 6, 4)
        K = rot.quat_to_matrix(random_unit_quats(rng, 4))
        frames = geo.TriangleFrames(K=K, V=rng.normal(size=(4, 3)), l=np.abs(rng.normal(size=4)) + 0.5)
        g = cl.local_to_global(c, frames)
        for i in range(c.count):
            f = c.parent_face[i]
            expected = K[f] @ rot.quat_to_matrix(rot.normalize(c.rot_local[i]))
            np.testing.assert_allclose(rot.quat_to_matrix(g.rot_global[i]), expected, atol=1e-9)

    def test_out_of_range_parent(self):
        rng = np.random.default_rng(4)
        c = random_cloud(rng, 3, 2)
        c.parent_face[1] = 7
        frames = geo.TriangleFrames(K=np.eye(3)[None].repeat(2, 0), V=np.zeros((2, 3)), l=np.ones(2))
        with pytest.raises(BindingError):
            cl.local_to_global(c, frames)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        c = random_cloud(rng, 5, 3)
        mesh, _, _ = geo.synthetic_head(seed=0)
        frames = geo.triangle_frames(mesh.neutral_vertices, mesh.faces[:3])
        d_mu = rng.normal(size=(5, 3))
        d_rot = rng.normal(size=(5, 4))
        d_scale = rng.normal(size=(5, 3))

        def objective(mu, rlocal, slog):
            c2 = c.copy()
            c2.mu_local, c2.rot_local, c2.scale_log = mu, rlocal, slog
            g = cl.local_to_global(c2, frames)
            return float(
                np.sum(g.mu_global * d_mu) + np.sum(g.rot_global * d_rot) + np.sum(g.scale_global * d_scale)
            )

        grads = cl.local_to_global_vjp(c, frames, d_mu, d_rot, d_scale)
        n_mu = central_diff(lambda m: objective(m, c.rot_local, c.scale_log), c.mu_local.copy())
        n_rot = central_diff(lambda r: objective(c.mu_local, r, c.scale_log), c.rot_local.copy())
        n_scale = central_diff(lambda s: objective(c.mu_local, c.rot_local, s), c.scale_log.copy())
        assert max_rel_err(grads.d_mu_local, n_mu) < 1e-5
        assert max_rel_err(grads.d_rot_local, n_rot) < 1e-5
        assert max_rel_err(grads.d_scale_log, n_scale) < 1e-5

    def test_scale_doubles_with_mesh(self, head):
        mesh, _, _ = head
        c = cl.init_cloud(mesh)
        centroid = mesh.neutral_vertices.mean(axis=0)
        frames1 = geo.triangle_frames(mesh.neutral_vertices, mesh.faces)
        doubled = centroid + 2.0 * (mesh.neutral_vertices - centroid)
        frames2 = geo.triangle_frames(doubled, mesh.faces)
        g1 = cl.local_to_global(c, frames1)
        g2 = cl.local_to_global(c, frames2)
        np.testing.assert_allclose(g2.scale_global, 2.0 * g1.scale_global, rtol=1e-12)


class TestCovariance:
    def test_axis_aligned(self):
        g = cl.GlobalGaussians(
            mu_global=np.zeros((1, 3)),
            rot_global=np.array([[1.0, 0, 0, 0]]),
            scale_global=np.array([[1.0, 2.0, 3.0]]),
            opacity=np.ones(1),
            sh_coeffs=np.zeros((1, 4, 3)),
        )
        np.testing.assert_allclose(cl.covariance(g, 0), np.diag([1.0, 4.0, 9.0]), atol=1e-12)

    def test_symmetric_and_trace(self):
        rng = np.random.default_rng(6)
        n = 10
        g = cl.GlobalGaussians(
            mu_global=rng.normal(size=(n, 3)),
            rot_global=random_unit_quats(rng, n),
            scale_global=np.abs(rng.normal(size=(n, 3))) + 0.1,
            opacity=np.ones(n),
            sh_coeffs=np.zeros((n, 4, 3)),
        )
        for i in range(n):
            cov = cl.covariance(g, i)
            np.testing.assert_allclose(cov, cov.T, atol=1e-12)
            assert np.trace(cov) == pytest.approx(float(np.sum(g.scale_global[i] ** 2)), rel=1e-12)
            eig = np.sort(np.linalg.eigvalsh(cov))
            np.testing.assert_allclose(eig, np.sort(g.scale_global[i] ** 2), rtol=1e-9)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        c = random_cloud(rng, 17, 5)
        path = tmp_path / "cloud.gswp"
        cl.save_cloud(c, path)
        loaded = cl.load_cloud(path)
        assert loaded.count == c.count
        np.testing.assert_array_equal(loaded.parent_face, c.parent_face)
        # float32 storage: arrays survive exactly after one save/load cycle
        cl.save_cloud(loaded, tmp_path / "cloud2.gswp")
        assert (tmp_path / "cloud.gswp").read_bytes() == (tmp_path / "cloud2.gswp").read_bytes()

    def test_layout_frozen(self, tmp_path):
        c = cl.GaussianCloud(
            mu_local=np.zeros((1, 3)),
            rot_local=np.array([[1.0, 0, 0, 0]]),
            scale_log=np.zeros((1, 3)),
            opacity_raw=np.zeros(1),
            sh_coeffs=np.zeros((1, 4, 3)),
            parent_face=np.array([4], dtype=np.int64),
        )
        path = tmp_path / "one.gswp"
        cl.save_cloud(c, path)
        blob = path.read_bytes()
        assert blob[:4] == b"GSWP"
        assert int.from_bytes(blob[4:8], "little") == 1  # version
        assert int.from_bytes(blob[8:12], "little") == 1  # count
        # 23 float32 fields per splat (3+4+3+1+12) + u32 parent
        assert len(blob) == 12 + 23 * 4 + 4
        assert blob[-4:] == (4).to_bytes(4, "little")

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.gswp"
        p.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(ParameterError, match="checkpoint"):
            cl.load_cloud(p)

    def test_rejects_truncated(self, tmp_path):
        rng = np.random.default_rng(8)
        c = random_cloud(rng, 4, 2)
        p = tmp_path / "trunc.gswp"
        cl.save_cloud(c, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ParameterError):
            cl.load_cloud(p)
