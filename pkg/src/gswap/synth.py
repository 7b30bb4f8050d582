"""Synthetic scene generation.

Ground-truth target frames come from a reference z-buffer rasterizer with
perspective-correct Gouraud shading, supersampled so mattes have soft
edges.  This renderer shares no code with the splatting renderer the
trainer optimizes through, so overfit runs measure real agreement rather
than self-consistency.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import scene as sc
from .errors import ParameterError
from .geometry import Camera, deform_mesh, synthetic_head

Z_NEAR = 0.01


def vertex_colors(seed: int, positions: np.ndarray) -> np.ndarray:
    """Smooth procedural texture: per-channel directional color bands."""
    rng = np.random.default_rng([seed, 7919])
    base = rng.uniform(0.35, 0.65, 3)
    cols = np.empty((len(positions), 3))
    for ch in range(3):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(15.0, 35.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        cols[:, ch] = base[ch] + 0.3 * np.sin(freq * (positions @ direction) + phase)
    return np.clip(cols, 0.05, 0.95)


def _fine_camera(camera: Camera, s: int) -> Camera:
    """Supersampled copy: fine pixel centers subdivide coarse pixels."""
    return Camera(
        fx=camera.fx * s,
        fy=camera.fy * s,
        cx=(camera.cx + 0.5) * s - 0.5,
        cy=(camera.cy + 0.5) * s - 0.5,
        width=camera.width * s,
        height=camera.height * s,
        rotation=camera.rotation,
        translation=camera.translation,
    )


def rasterize_mesh(vertices, faces, colors, camera: Camera,
                   supersample: int = 3):
    """Render a vertex-colored mesh; returns (rgb, coverage) at camera size.

    Depth is resolved per sample with a z-buffer; colors interpolate
    perspective-correctly.  Coverage is the supersample hit fraction, so it
    doubles as a soft matte.
    """
    s = int(supersample)
    if s < 1:
        raise ParameterError(f"supersample must be >= 1, got {supersample}")
    fine = _fine_camera(camera, s) if s > 1 else camera
    uv, depth = fine.project(np.asarray(vertices, dtype=np.float64))
    h, w = fine.height, fine.width
    zbuf = np.full((h, w), np.inf)
    cbuf = np.zeros((h, w, 3))
    colors = np.asarray(colors, dtype=np.float64)
    for i0, i1, i2 in np.asarray(faces, dtype=np.int64):
        z0, z1, z2 = depth[i0], depth[i1], depth[i2]
        if z0 <= Z_NEAR or z1 <= Z_NEAR or z2 <= Z_NEAR:
            continue
        p0, p1, p2 = uv[i0], uv[i1], uv[i2]
        denom = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if abs(denom) < 1e-12:
            continue
        x_lo = max(int(np.floor(min(p0[0], p1[0], p2[0]))), 0)
        x_hi = min(int(np.ceil(max(p0[0], p1[0], p2[0]))) + 1, w)
        y_lo = max(int(np.floor(min(p0[1], p1[1], p2[1]))), 0)
        y_hi = min(int(np.ceil(max(p0[1], p1[1], p2[1]))) + 1, h)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
        px = xs.reshape(-1).astype(np.float64)
        py = ys.reshape(-1).astype(np.float64)
        w0 = ((p1[0] - px) * (p2[1] - py) - (p2[0] - px) * (p1[1] - py)) / denom
        w1 = ((p2[0] - px) * (p0[1] - py) - (p0[0] - px) * (p2[1] - py)) / denom
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        if not inside.any():
            continue
        w0, w1, w2 = w0[inside], w1[inside], w2[inside]
        iy = ys.reshape(-1)[inside]
        ix = xs.reshape(-1)[inside]
        inv_z = w0 / z0 + w1 / z1 + w2 / z2
        z_px = 1.0 / inv_z
        col = (
            np.outer(w0 / z0, colors[i0])
            + np.outer(w1 / z1, colors[i1])
            + np.outer(w2 / z2, colors[i2])
        ) * z_px[:, None]
        closer = z_px < zbuf[iy, ix]
        iy, ix = iy[closer], ix[closer]
        zbuf[iy, ix] = z_px[closer]
        cbuf[iy, ix] = col[closer]
    hit = np.isfinite(zbuf).astype(np.float64)
    if s == 1:
        return cbuf, hit
    ch, cw = camera.height, camera.width
    rgb = cbuf.reshape(ch, s, cw, s, 3).mean(axis=(1, 3))
    alpha = hit.reshape(ch, s, cw, s).mean(axis=(1, 3))
    return rgb, alpha


def write_scene(out_dir, seed: int, image_size=(96, 96), n_frames: int = 5,
                n_cameras: int = 3, supersample: int = 3,
                force: bool = False) -> Path:
    """Generate a full synthetic scene directory.

    Writes tracking.json, per-(timestep, camera) target frames and mattes,
    and source.png — the same head with a different texture, for identity
    transfer runs.  Deterministic per seed.
    """
    root = Path(out_dir)
    tracking_path = root / "tracking.json"
    if tracking_path.exists() and not force:
        raise ParameterError(
            f"{tracking_path} already exists; pass force=True (--force) to overwrite"
        )
    mesh, params_list, cameras = synthetic_head(
        seed, image_size=tuple(image_size), n_frames=n_frames, n_cameras=n_cameras
    )
    colors = vertex_colors(seed, mesh.neutral_vertices)
    root.mkdir(parents=True, exist_ok=True)

    tracked = []
    for t, params in enumerate(params_list):
        verts = deform_mesh(mesh, params)
        for c, camera in enumerate(cameras):
            k = t * len(cameras) + c
            rgb, matte = rasterize_mesh(verts, mesh.faces, colors, camera,
                                        supersample=supersample)
            frame_rel = f"frames/frame_{k:04d}.png"
            matte_rel = f"mattes/matte_{k:04d}.png"
            sc.save_png(root / frame_rel, rgb)
            sc.save_png(root / matte_rel, matte)
            tracked.append(
                sc.TrackedFrame(params=params, camera=camera,
                                target_frame_path=frame_rel,
                                matte_path=matte_rel)
            )

    source_colors = vertex_colors(seed + 1, mesh.neutral_vertices)
    front = cameras[len(cameras) // 2]
    source_rgb, _ = rasterize_mesh(
        deform_mesh(mesh, params_list[0]), mesh.faces, source_colors, front,
        supersample=supersample,
    )
    sc.save_png(root / "source.png", source_rgb)

    sc.write_tracking(tracking_path, f"synthetic-head-v1 seed={seed}",
                      params_list[0].shape, tracked)
    return root
