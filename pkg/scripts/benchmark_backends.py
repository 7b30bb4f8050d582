#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy reference.

Renders a synthetic head scene forward and backward with both backends,
reports wall-clock timings and the speedup, and asserts that the two
backends agree to tight tolerances (they run the same arithmetic, so any
drift is a bug, not a rounding quirk).

Usage:
    python3 scripts/benchmark_backends.py [--size 96] [--splats 2000]
        [--repeats 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from gswap import backend as bk
from gswap import cloud as cl
from gswap import geometry as geo
from gswap import renderer as rd
from gswap import rotation as rot


def build_scene(seed: int, size: int, n_splats: int):
    """A deformed synthetic head with a randomized cloud on top of it."""
    mesh, params_list, cameras = geo.synthetic_head(
        seed=seed, image_size=(size, size), n_frames=1, n_cameras=1
    )
    verts = geo.deform_mesh(mesh, params_list[0])
    frames = geo.triangle_frames(verts, mesh.faces)
    camera = cameras[0]

    rng = np.random.default_rng(seed)
    n_faces = len(frames)
    cloud = cl.GaussianCloud(
        mu_local=rng.uniform(-0.4, 0.4, (n_splats, 3)),
        rot_local=rot.normalize(rng.normal(size=(n_splats, 4))),
        scale_log=np.log(rng.uniform(0.2, 0.6, (n_splats, 3))),
        opacity_raw=rng.uniform(-1.0, 1.5, n_splats),
        sh_coeffs=rng.normal(scale=0.3, size=(n_splats, 4, 3)),
        parent_face=rng.integers(0, n_faces, n_splats),
    )
    return cloud, frames, camera


def run_once(cloud, frames, camera, upstream):
    img = rd.render(cloud, frames, camera, np.zeros(3))
    grads = rd.render_backward(cloud, frames, camera, upstream)
    return img, grads


def time_backend(name: str, cloud, frames, camera, repeats: int):
    bk.set_backend(name)
    h, w = camera.height, camera.width
    upstream = (np.full((h, w, 3), 1.0 / (h * w * 3)), None)

    # Warm-up render compiles the numba kernels and touches all caches.
    img, grads = run_once(cloud, frames, camera, upstream)

    fwd_times, bwd_times = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        rd.render(cloud, frames, camera, np.zeros(3))
        t1 = time.perf_counter()
        rd.render_backward(cloud, frames, camera, upstream)
        t2 = time.perf_counter()
        fwd_times.append(t1 - t0)
        bwd_times.append(t2 - t1)
    return img, grads, min(fwd_times), min(bwd_times)


GRAD_FIELDS = ("d_mu_local", "d_rot_local", "d_scale_raw", "d_opacity_raw", "d_sh")


def check_agreement(img_a, grads_a, img_b, grads_b, atol: float) -> float:
    worst = 0.0
    worst = max(worst, float(np.abs(img_a.rgb - img_b.rgb).max()))
    worst = max(worst, float(np.abs(img_a.alpha - img_b.alpha).max()))
    for field in GRAD_FIELDS:
        a, b = getattr(grads_a, field), getattr(grads_b, field)
        worst = max(worst, float(np.abs(a - b).max()))
    if worst > atol:
        raise SystemExit(f"backends disagree: max abs diff {worst:.3e} > {atol:g}")
    return worst


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=96, help="image side in pixels")
    ap.add_argument("--splats", type=int, default=2000, help="cloud size")
    ap.add_argument("--repeats", type=int, default=5, help="timed repetitions")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--atol", type=float, default=1e-9,
                    help="max allowed |numba - numpy| on images and gradients")
    args = ap.parse_args()

    cloud, frames, camera = build_scene(args.seed, args.size, args.splats)
    print(f"scene: {args.size}x{args.size} px, {args.splats} splats, "
          f"{len(frames)} faces, best of {args.repeats} runs\n")

    results = {}
    for name in ("numpy", "numba") if bk.numba_available() else ("numpy",):
        img, grads, fwd, bwd = time_backend(name, cloud, frames, camera, args.repeats)
        results[name] = (img, grads, fwd, bwd)

    header = f"{'backend':<8} {'forward':>12} {'backward':>12}"
    print(header)
    print("-" * len(header))
    for name, (_, _, fwd, bwd) in results.items():
        print(f"{name:<8} {fwd * 1e3:>10.2f}ms {bwd * 1e3:>10.2f}ms")

    if "numba" in results:
        _, _, f_np, b_np = results["numpy"]
        img_nb, grads_nb, f_nb, b_nb = results["numba"]
        img_np, grads_np = results["numpy"][0], results["numpy"][1]
        print(f"\nspeedup: forward x{f_np / f_nb:.1f}, backward x{b_np / b_nb:.1f}")
        worst = check_agreement(img_np, grads_np, img_nb, grads_nb, args.atol)
        print(f"agreement: max abs diff {worst:.3e} (tolerance {args.atol:g})")
    else:
        print("\nnumba not importable; timed the numpy reference only")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
