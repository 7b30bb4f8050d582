"""Command-line surface: scene synthesis, training, swapping, rendering,
reenactment, and metrics.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure,
4 embedding-service failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .compositing import blend, fuse_masks, refine_mask, replace_background
from .config import RunConfig, config_hash, load_config
from .errors import (
    ConfigError,
    GswapError,
    IdentityPipelineError,
    NumericError,
    ParameterError,
    ServiceError,
)
from .geometry import deform_mesh, triangle_frames
from .identity import (
    REMOTE_LAMBDA_K,
    TOY_LAMBDA_K,
    ToyEncoder,
    check_encoder_weights,
    remote_encode,
)
from .metrics import ids_score, vidd
from .renderer import render
from .scene import load_png, load_scene, load_tracking, mesh_from_id, save_png
from .synth import write_scene
from .training import (
    load_checkpoint,
    restore_rng,
    save_checkpoint,
    train_stage_a,
    train_stage_b,
    write_log,
)

SWAPPED_MASK_THRESHOLD = 0.5  # rendered alpha above this counts as avatar


# ---------------------------------------------------------------------------
# small helpers


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ParameterError(f"size must look like WIDTHxHEIGHT, got {text!r}")
    try:
        w, h = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ParameterError(f"size must look like WIDTHxHEIGHT, got {text!r}") from exc
    if w <= 0 or h <= 0:
        raise ParameterError(f"size must be positive, got {text!r}")
    return (w, h)


def _parse_color(text: str) -> np.ndarray:
    try:
        values = [float(p) for p in text.split(",")]
    except ValueError as exc:
        raise ParameterError(f"color must be R,G,B in [0,1], got {text!r}") from exc
    if len(values) != 3 or any(v < 0.0 or v > 1.0 for v in values):
        raise ParameterError(f"color must be R,G,B in [0,1], got {text!r}")
    return np.array(values, dtype=np.float64)


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ParameterError(f"config file not found: {p}")
    return load_config(p)


def _log_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".csv")


def _append_log(path: Path, rows) -> None:
    """Write the CSV log, appending to an existing one when resuming."""
    if path.exists():
        existing = path.read_text()
        write_log(path, rows)
        body = path.read_text().split("\n", 1)[1]
        path.write_text(existing + body)
    else:
        write_log(path, rows)


def _sorted_pngs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise ParameterError(f"not a directory: {directory}")
    files = sorted(directory.glob("*.png"))
    if not files:
        raise ParameterError(f"no PNG frames found in {directory}")
    return files


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_scene(args) -> int:
    out = write_scene(
        Path(args.out),
        seed=args.seed,
        image_size=_parse_size(args.size),
        n_frames=args.frames,
        n_cameras=args.cameras,
        supersample=args.supersample,
        force=args.force,
    )
    n = args.frames * args.cameras
    print(f"wrote {n} frames to {out}")
    return 0


def cmd_build_avatar(args) -> int:
    run = _load_run_config(args.config)
    scene = load_scene(Path(args.scene))
    out = Path(args.out)

    cloud = None
    rng = None
    start = 0
    if args.resume:
        if not out.exists():
            raise ParameterError(f"cannot resume: checkpoint {out} does not exist")
        cloud, meta = load_checkpoint(out)
        if meta.config_hash != config_hash(run):
            raise ConfigError(
                "checkpoint was produced with a different configuration; "
                "refusing to resume"
            )
        start = meta.iteration
        rng = restore_rng(meta.rng_state)
        if start >= run.train.stage_a_iters:
            print(f"checkpoint already complete at iteration {start}")
            return 0

    target_iters = run.train.stage_a_iters
    if args.max_iters:
        target_iters = min(target_iters, start + args.max_iters)
    capped = replace(run, train=replace(run.train, stage_a_iters=target_iters))

    result = train_stage_a(scene, capped, cloud=cloud, rng=rng, start_iteration=start)
    save_checkpoint(out, result.cloud, iteration=target_iters, run=run, rng=result.rng)
    _append_log(_log_path(out), result.log)

    last = result.log[-1]
    status = "complete" if target_iters >= run.train.stage_a_iters else "paused"
    print(
        f"stage A {status} at iteration {target_iters}: "
        f"loss {last.total:.6f}, {last.n_splats} splats -> {out}"
    )
    return 0


def cmd_swap(args) -> int:
    source_path = Path(args.source)
    if not source_path.exists():
        raise ParameterError(f"source image not found: {source_path}")
    run = _load_run_config(args.config)
    scene = load_scene(Path(args.scene))
    cloud, _ = load_checkpoint(Path(args.ckpt))
    source = load_png(source_path)
    out = Path(args.out)

    if args.encoders == "remote":
        # Real recognition embeddings are recorded for evaluation; the
        # differentiable in-process encoder drives the gradients.
        embeddings = remote_encode(source, affine=None, endpoint=args.endpoint)
        check_encoder_weights(embeddings, REMOTE_LAMBDA_K)
        record = {
            "source": str(source_path),
            "embeddings": [
                {
                    "name": e.encoder_name,
                    "dim": int(len(e.vector)),
                    "values": [float(v) for v in e.vector],
                }
                for e in embeddings
            ],
        }
        out.parent.mkdir(parents=True, exist_ok=True)
        emb_path = out.with_name(out.name + ".embeddings.json")
        emb_path.write_text(json.dumps(record, indent=2) + "\n")
        print(f"recorded {len(embeddings)} source embeddings -> {emb_path}")

    encoders = [ToyEncoder()]
    result = train_stage_b(cloud, scene, source, encoders, TOY_LAMBDA_K, run)
    save_checkpoint(
        out, result.cloud, iteration=run.train.stage_b_iters, run=run, rng=result.rng
    )
    _append_log(_log_path(out), result.log)

    first, last = result.log[0], result.log[-1]
    print(
        f"stage B complete: identity loss {first.l_id:.6f} -> {last.l_id:.6f}, "
        f"{last.n_splats} splats -> {out}"
    )
    return 0


def _render_frames(cloud, scene, background=0.0):
    """Render every tracked frame, yielding (index, RenderedImage)."""
    mesh = scene.mesh
    cloud.check_binding(len(mesh.faces))
    for i, frame in enumerate(scene.frames):
        geo = triangle_frames(deform_mesh(mesh, frame.params), mesh.faces)
        yield i, render(cloud, geo, frame.camera, background)


def cmd_render_video(args) -> int:
    cloud, _ = load_checkpoint(Path(args.ckpt))
    scene = load_scene(Path(args.scene))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    mode = args.bg
    if mode not in ("frames", "color"):
        bg_files = _sorted_pngs(Path(mode))
        if len(bg_files) != len(scene.frames):
            raise ParameterError(
                f"background directory holds {len(bg_files)} frames, "
                f"scene has {len(scene.frames)}"
            )
    color = _parse_color(args.color)

    # a solid background is rendered directly; the other modes composite a
    # black render via its alpha channel
    background = color if mode == "color" else 0.0
    for i, rendered in _render_frames(cloud, scene, background):
        if mode == "color":
            rgb = rendered.rgb
        elif mode == "frames":
            matte = scene.load_matte(i)
            swapped = (rendered.alpha >= SWAPPED_MASK_THRESHOLD).astype(np.float64)
            mask = refine_mask(fuse_masks(matte, swapped))
            rgb = blend(rendered.rgb, scene.load_target(i), mask)
        else:
            rgb = replace_background(rendered, load_png(bg_files[i]))
        save_png(out / f"frame_{i:04d}.png", rgb)

    print(f"wrote {len(scene.frames)} frames to {out}")
    return 0


def cmd_reenact(args) -> int:
    cloud, _ = load_checkpoint(Path(args.ckpt))
    driving = Path(args.driving)
    if not driving.exists():
        raise ParameterError(f"driving tracking file not found: {driving}")
    mesh_id, _, frames = load_tracking(driving)
    mesh = mesh_from_id(mesh_id)
    for frame in frames:
        frame.params.validate(mesh)
    cloud.check_binding(len(mesh.faces))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        geo = triangle_frames(deform_mesh(mesh, frame.params), mesh.faces)
        rendered = render(cloud, geo, frame.camera, 0.0)
        save_png(out / f"frame_{i:04d}.png", rendered.rgb)

    print(f"wrote {len(frames)} frames to {out}")
    return 0


def _remote_eval(source, frame_images, endpoint):
    """IDS/VIDD with embeddings from the service, averaged across encoders."""

    def embed_all(image):
        embeddings = remote_encode(image, affine=None, endpoint=endpoint)
        return {e.encoder_name: e.vector for e in sorted(
            embeddings, key=lambda e: e.encoder_name
        )}

    src = embed_all(source)
    per_frame = [embed_all(img) for img in frame_images]
    names = sorted(src)
    for vectors in per_frame:
        if sorted(vectors) != names:
            raise ParameterError(
                "embedding service returned inconsistent encoder sets across frames"
            )
    ids = 100.0 * float(
        np.mean([
            np.dot(src[n], vec[n]) for vec in per_frame for n in names
        ])
    )
    drift = None
    if len(per_frame) >= 2:
        drift = float(
            np.mean([
                1.0 - np.dot(a[n], b[n])
                for a, b in zip(per_frame[:-1], per_frame[1:])
                for n in names
            ])
        )
    return ids, drift


def cmd_eval(args) -> int:
    source_path = Path(args.source)
    if not source_path.exists():
        raise ParameterError(f"source image not found: {source_path}")
    source = load_png(source_path)
    frame_files = _sorted_pngs(Path(args.frames))
    frame_images = [load_png(p) for p in frame_files]

    if args.encoder == "toy":
        encoder = ToyEncoder()
        ids = ids_score(source, frame_images, encoder)
        drift = vidd(frame_images, encoder) if len(frame_images) >= 2 else None
    else:
        ids, drift = _remote_eval(source, frame_images, args.endpoint)

    if drift is None:
        raise ParameterError("need at least two frames to evaluate identity drift")
    print(
        json.dumps(
            {
                "ids": ids,
                "vidd": drift,
                "n_frames": len(frame_images),
                "encoder": args.encoder,
            }
        )
    )
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gswap",
        description=(
            "Animatable Gaussian-splat head avatars: synthesize tracked "
            "scenes, fit avatars, transfer identities, and render videos."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-scene", help="generate a synthetic tracked scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite an existing scene")
    p.add_argument("--size", default="96x96", help="frame size WIDTHxHEIGHT")
    p.add_argument("--frames", type=int, default=5, help="animation timesteps")
    p.add_argument("--cameras", type=int, default=3, help="viewpoints per timestep")
    p.add_argument("--supersample", type=int, default=3)
    p.set_defaults(func=cmd_synth_scene)

    p = sub.add_parser("build-avatar", help="fit an avatar to a tracked scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument(
        "--max-iters",
        type=int,
        default=0,
        help="stop after this many iterations this invocation (0 = run to completion)",
    )
    p.set_defaults(func=cmd_build_avatar)

    p = sub.add_parser("swap", help="finetune an avatar toward a source identity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--encoders", choices=("toy", "remote"), default="toy")
    p.add_argument("--endpoint", default=None, help="embedding service host:port")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("render-video", help="render the avatar over a background")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument(
        "--bg",
        required=True,
        help="'frames' (blend into target frames), 'color', or a directory of PNGs",
    )
    p.add_argument("--color", default="0,0,0", help="background color R,G,B in [0,1]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_video)

    p = sub.add_parser("reenact", help="drive the avatar with foreign tracking data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--driving", required=True, help="tracking JSON file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reenact)

    p = sub.add_parser("eval", help="identity similarity and drift metrics")
    p.add_argument("--source", required=True)
    p.add_argument("--frames", required=True, help="directory of rendered frames")
    p.add_argument("--encoder", choices=("toy", "remote"), default="toy")
    p.add_argument("--endpoint", default=None, help="embedding service host:port")
    p.set_defaults(func=cmd_eval)

    return parser


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, NumericError):
        return 3
    if isinstance(exc, ServiceError):
        return 4
    if isinstance(exc, IdentityPipelineError):
        return 4 if isinstance(exc.__cause__, ServiceError) else 2
    return 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericError as exc:
        where = f" at iteration {exc.iteration}" if exc.iteration is not None else ""
        print(f"error: numeric failure{where}: {exc}", file=sys.stderr)
        return 3
    except (GswapError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
