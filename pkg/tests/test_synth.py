"""Reference rasterizer oracles and scene round-trip checks."""

from __future__ import annotations

import json

import numpy as np
import pytest

from gswap import geometry as gm
from gswap import scene as sc
from gswap import synth
from gswap.errors import ParameterError


def simple_camera():
    return gm.Camera(fx=30.0, fy=30.0, cx=16.0, cy=16.0, width=33, height=33,
                     rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                     translation=np.array([0.0, 0.0, 1.0]))


def screen_bary(p, a, b, c):
    m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    s = np.linalg.solve(m, np.asarray(p, dtype=np.float64) - a)
    return np.array([1.0 - s[0] - s[1], s[0], s[1]])


def expected_color(p, uv, depths, colors):
    """Perspective-correct interpolation, derived independently."""
    lam = screen_bary(p, uv[0], uv[1], uv[2])
    inv_z = (lam / depths).sum()
    return (lam[:, None] * colors / depths[:, None]).sum(axis=0) / inv_z


class TestRasterizer:
    def test_flat_triangle_interpolates_colors(self):
        cam = simple_camera()
        verts = np.array([[-0.5, -0.4, 0.0], [0.5, -0.4, 0.0], [0.0, 0.6, 0.0]])
        faces = np.array([[0, 1, 2]])
        colors = np.eye(3)
        rgb, alpha = synth.rasterize_mesh(verts, faces, colors, cam, supersample=1)
        uv, z = cam.project(verts)
        for px in [(16, 16), (14, 10), (18, 20)]:
            want = expected_color(px, uv, z, colors)
            np.testing.assert_allclose(rgb[px[1], px[0]], want, atol=1e-12)
            assert alpha[px[1], px[0]] == 1.0
        assert alpha[0, 0] == 0.0
        np.testing.assert_array_equal(rgb[0, 0], 0.0)

    def test_perspective_correct_interpolation(self):
        cam = simple_camera()
        verts = np.array([[-0.5, -0.4, -0.2], [0.5, -0.4, 0.3], [0.0, 0.6, 0.1]])
        faces = np.array([[0, 1, 2]])
        colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        rgb, _ = synth.rasterize_mesh(verts, faces, colors, cam, supersample=1)
        uv, z = cam.project(verts)
        want = expected_color((16, 16), uv, z, colors)
        np.testing.assert_allclose(rgb[16, 16], want, atol=1e-12)
        affine = screen_bary((16, 16), uv[0], uv[1], uv[2]) @ colors
        assert not np.allclose(want, affine, atol=1e-4)

    def test_depth_buffer_prefers_nearer_surface(self):
        cam = simple_camera()
        verts = np.array([
            [-0.5, -0.4, 0.0], [0.5, -0.4, 0.0], [0.0, 0.6, 0.0],
            [-0.4, -0.3, -0.3], [0.4, -0.3, -0.3], [0.0, 0.5, -0.3],
        ])
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        colors = np.zeros((6, 3))
        colors[:3] = [1.0, 0.0, 0.0]
        colors[3:] = [0.0, 1.0, 0.0]
        rgb, _ = synth.rasterize_mesh(verts, faces, colors, cam, supersample=1)
        np.testing.assert_allclose(rgb[16, 16], [0.0, 1.0, 0.0], atol=1e-12)
        rgb2, _ = synth.rasterize_mesh(verts, faces[::-1], colors, cam, supersample=1)
        np.testing.assert_allclose(rgb2[16, 16], [0.0, 1.0, 0.0], atol=1e-12)

    def test_supersampling_gives_soft_edges(self):
        cam = simple_camera()
        verts = np.array([[-0.5, -0.4, 0.0], [0.5, -0.4, 0.0], [0.0, 0.6, 0.0]])
        faces = np.array([[0, 1, 2]])
        colors = np.ones((3, 3))
        _, alpha = synth.rasterize_mesh(verts, faces, colors, cam, supersample=3)
        assert alpha.max() == 1.0 and alpha.min() == 0.0
        fractional = (alpha > 0.0) & (alpha < 1.0)
        assert fractional.sum() > 10

    def test_degenerate_triangle_is_skipped(self):
        cam = simple_camera()
        verts = np.array([[-0.5, 0.0, 0.0], [0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
        faces = np.array([[0, 1, 2]])
        rgb, alpha = synth.rasterize_mesh(verts, faces, np.ones((3, 3)), cam,
                                          supersample=1)
        np.testing.assert_array_equal(alpha, 0.0)

    def test_behind_camera_skipped(self):
        cam = simple_camera()
        verts = np.array([[-0.5, -0.4, -3.0], [0.5, -0.4, -3.0], [0.0, 0.6, -3.0]])
        _, alpha = synth.rasterize_mesh(verts, np.array([[0, 1, 2]]),
                                        np.ones((3, 3)), cam, supersample=1)
        np.testing.assert_array_equal(alpha, 0.0)


class TestPngRoundTrip:
    def test_rgb(self, tmp_path, rng):
        img = rng.integers(0, 256, (9, 7, 3), dtype=np.uint8)
        path = tmp_path / "img.png"
        sc.save_png(path, img / 255.0)
        np.testing.assert_array_equal(sc.load_png(path), img / 255.0)

    def test_grayscale(self, tmp_path, rng):
        img = rng.integers(0, 256, (6, 8), dtype=np.uint8)
        path = tmp_path / "m.png"
        sc.save_png(path, img / 255.0)
        loaded = sc.load_png(path)
        assert loaded.shape == (6, 8)
        np.testing.assert_array_equal(loaded, img / 255.0)


SCENE_KW = dict(image_size=(32, 32), n_frames=2, n_cameras=2, supersample=2)


class TestSceneWriting:
    def test_deterministic_per_seed(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        synth.write_scene(a, seed=3, **SCENE_KW)
        synth.write_scene(b, seed=3, **SCENE_KW)
        assert (a / "tracking.json").read_text() == (b / "tracking.json").read_text()
        for rel in sorted(p.relative_to(a) for p in a.rglob("*.png")):
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_frame_count_and_files(self, tmp_path):
        out = tmp_path / "scene"
        synth.write_scene(out, seed=1, **SCENE_KW)
        doc = json.loads((out / "tracking.json").read_text())
        assert len(doc["frames"]) == 4
        for entry in doc["frames"]:
            assert (out / entry["target_frame_path"]).exists()
            assert (out / entry["matte_path"]).exists()
        assert (out / "source.png").exists()

    def test_refuses_overwrite_without_force(self, tmp_path):
        out = tmp_path / "scene"
        synth.write_scene(out, seed=1, **SCENE_KW)
        with pytest.raises(ParameterError, match="force"):
            synth.write_scene(out, seed=2, **SCENE_KW)
        synth.write_scene(out, seed=2, force=True, **SCENE_KW)
        doc = json.loads((out / "tracking.json").read_text())
        assert doc["mesh_id"].endswith("seed=2")

    def test_load_scene_round_trip(self, tmp_path):
        out = tmp_path / "scene"
        synth.write_scene(out, seed=5, **SCENE_KW)
        scene = sc.load_scene(out)
        mesh, params, cams = gm.synthetic_head(5, image_size=(32, 32),
                                               n_frames=2, n_cameras=2)
        assert scene.mesh_id == "synthetic-head-v1 seed=5"
        np.testing.assert_array_equal(scene.mesh.faces, mesh.faces)
        np.testing.assert_array_equal(scene.mesh.neutral_vertices,
                                      mesh.neutral_vertices)
        assert len(scene.frames) == 4
        for k, tracked in enumerate(scene.frames):
            t, c = divmod(k, 2)
            np.testing.assert_array_equal(tracked.params.shape, params[t].shape)
            np.testing.assert_array_equal(tracked.params.expression,
                                          params[t].expression)
            assert tracked.params.jaw_angle == params[t].jaw_angle
            np.testing.assert_array_equal(tracked.params.global_rotation,
                                          params[t].global_rotation)
            assert tracked.camera.fx == cams[c].fx
            np.testing.assert_array_equal(tracked.camera.rotation,
                                          cams[c].rotation)
            np.testing.assert_array_equal(tracked.camera.translation,
                                          cams[c].translation)

    def test_frames_premultiplied_against_matte(self, tmp_path):
        out = tmp_path / "scene"
        synth.write_scene(out, seed=7, **SCENE_KW)
        scene = sc.load_scene(out)
        frame = scene.load_target(0)
        matte = scene.load_matte(0)
        assert matte.min() >= 0.0 and matte.max() <= 1.0
        assert np.all(frame <= matte[:, :, None] + 1.5 / 255.0)
        target = scene.training_target(0)
        np.testing.assert_allclose(target, frame * matte[:, :, None], atol=1e-12)

    def test_source_has_distinct_texture(self, tmp_path):
        out = tmp_path / "scene"
        synth.write_scene(out, seed=9, **SCENE_KW)
        source = sc.load_png(out / "source.png")
        frame0 = sc.load_png(out / json.loads((out / "tracking.json").read_text())
                             ["frames"][0]["target_frame_path"])
        assert source.shape == frame0.shape
        assert np.abs(source - frame0).max() > 0.05

    def test_unknown_mesh_id_rejected(self, tmp_path):
        out = tmp_path / "scene"
        synth.write_scene(out, seed=1, **SCENE_KW)
        doc = json.loads((out / "tracking.json").read_text())
        doc["mesh_id"] = "captured-head v2"
        (out / "tracking.json").write_text(json.dumps(doc))
        from gswap.errors import ConfigError

        with pytest.raises(ConfigError, match="mesh_id"):
            sc.load_scene(out)
