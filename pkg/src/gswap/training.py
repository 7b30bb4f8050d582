"""Two-stage avatar optimization.

Stage A fits a fresh cloud to the tracked frames (reconstruction plus
scale/position regularizers); stage B continues from a fitted cloud and
adds the identity term toward a source image.  Both stages share one
loop: render a uniformly sampled frame, backpropagate to the raw splat
fields, take an Adam step per parameter group, and periodically run
density control driven by the accumulated screen-space positional
gradient.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import GaussianCloud, init_cloud, load_cloud, save_cloud
from .config import RunConfig, TrainConfig, config_hash
from .errors import NumericError, ParameterError
from .geometry import deform_mesh, triangle_frames
from .identity import check_encoder_weights
from .losses import (
    identity_loss,
    position_reg,
    reconstruction_loss,
    scale_reg,
    total_loss,
)
from .renderer import render, render_backward

# Raw cloud fields updated by the optimizer, with their learning-rate groups.
PARAM_FIELDS = ("mu_local", "rot_local", "scale_log", "opacity_raw", "sh_coeffs")
_GROUP_OF = {
    "mu_local": "mu",
    "rot_local": "rot",
    "scale_log": "scale",
    "opacity_raw": "opacity",
    "sh_coeffs": "sh",
}

# Splats whose largest local scale exceeds this are split; smaller ones clone.
SPLIT_SCALE_THRESHOLD = 0.5
# Children of a split shrink by this factor.
SPLIT_SCALE_SHRINK = 1.6


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moments per parameter field plus the shared step count."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(cloud: GaussianCloud) -> AdamState:
    return AdamState(
        m={f: np.zeros_like(getattr(cloud, f)) for f in PARAM_FIELDS},
        v={f: np.zeros_like(getattr(cloud, f)) for f in PARAM_FIELDS},
        step=0,
    )


def adam_step(
    cloud: GaussianCloud,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
    iteration: int,
) -> None:
    """Apply one Adam update in place; quaternions are renormalized after.

    Raises NumericError (carrying ``iteration``) on any non-finite gradient
    so a diverging run aborts instead of silently corrupting the cloud.
    """
    for field in PARAM_FIELDS:
        if not np.all(np.isfinite(grads[field])):
            raise NumericError(
                f"non-finite gradient in {field}", iteration=iteration
            )
    state.step += 1
    t = state.step
    lrs = config.learning_rates()
    b1, b2 = config.adam_beta1, config.adam_beta2
    for field in PARAM_FIELDS:
        g = grads[field]
        m = state.m[field]
        v = state.v[field]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        getattr(cloud, field)[...] -= (
            lrs[_GROUP_OF[field]] * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        )
    norms = np.linalg.norm(cloud.rot_local, axis=1, keepdims=True)
    cloud.rot_local /= np.maximum(norms, 1e-300)


# ---------------------------------------------------------------------------
# density control


def _concat_field(parts: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts, axis=0)


def densify_and_prune(
    cloud: GaussianCloud,
    state: AdamState,
    mean_pos_grad: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    n_faces: int,
) -> tuple[GaussianCloud, AdamState]:
    """One density-control event: clone/split hot splats, prune faint ones.

    ``mean_pos_grad`` is the per-splat mean screen-space positional gradient
    magnitude accumulated since the previous event.  Splats above the
    threshold are duplicated: large ones (max local scale beyond
    SPLIT_SCALE_THRESHOLD) are replaced by two shrunken children sampled
    inside the parent footprint, small ones get an exact clone.  Afterwards
    splats below the opacity prune threshold are dropped, except that every
    face keeps at least its strongest splat.  Optimizer moments follow the
    rows: survivors keep theirs, new rows start at zero.
    """
    n = cloud.count
    mean_pos_grad = np.asarray(mean_pos_grad, dtype=np.float64)
    if mean_pos_grad.shape != (n,):
        raise ParameterError(
            f"densification stats have shape {mean_pos_grad.shape}, expected ({n},)"
        )

    hot_idx = np.flatnonzero(mean_pos_grad > config.densify_grad_threshold)
    room = config.max_splats - n
    if len(hot_idx) > room:
        # budget: each selection adds one net splat, keep the strongest signals
        order = np.argsort(-mean_pos_grad[hot_idx], kind="stable")
        hot_idx = np.sort(hot_idx[order[: max(room, 0)]])

    scale_local = cloud.scale_local
    big = scale_local.max(axis=1) > SPLIT_SCALE_THRESHOLD
    split_idx = hot_idx[big[hot_idx]]
    clone_idx = hot_idx[~big[hot_idx]]

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False

    # children of split splats: sampled inside the parent footprint, shrunk
    k = len(split_idx)
    if k:
        from .rotation import quat_to_matrix

        parent_q = cloud.rot_local[split_idx]
        parent_q = parent_q / np.linalg.norm(parent_q, axis=1, keepdims=True)
        rot_mats = np.stack([quat_to_matrix(q) for q in parent_q])  # (k, 3, 3)
        parent_s = scale_local[split_idx]  # (k, 3)
        z = rng.standard_normal((k, 2, 3))
        offsets = np.einsum("kij,kcj->kci", rot_mats, parent_s[:, None, :] * z)
        child_mu = (cloud.mu_local[split_idx, None, :] + offsets).reshape(2 * k, 3)
        child_scale_log = np.repeat(
            np.log(parent_s / SPLIT_SCALE_SHRINK), 2, axis=0
        )
        child_rot = np.repeat(cloud.rot_local[split_idx], 2, axis=0)
        child_opacity = np.repeat(cloud.opacity_raw[split_idx], 2, axis=0)
        child_sh = np.repeat(cloud.sh_coeffs[split_idx], 2, axis=0)
        child_face = np.repeat(cloud.parent_face[split_idx], 2, axis=0)

    def assemble(field: str, children: np.ndarray | None) -> np.ndarray:
        arr = getattr(cloud, field)
        parts = [arr[keep], arr[clone_idx]]
        if children is not None:
            parts.append(children)
        return _concat_field(parts)

    merged = GaussianCloud(
        mu_local=assemble("mu_local", child_mu if k else None),
        rot_local=assemble("rot_local", child_rot if k else None),
        scale_log=assemble("scale_log", child_scale_log if k else None),
        opacity_raw=assemble("opacity_raw", child_opacity if k else None),
        sh_coeffs=assemble("sh_coeffs", child_sh if k else None),
        parent_face=assemble("parent_face", child_face if k else None),
    )
    n_new = len(clone_idx) + 2 * k

    def carry(moments: dict[str, np.ndarray], field: str) -> np.ndarray:
        arr = moments[field]
        fresh = np.zeros((n_new,) + arr.shape[1:], dtype=arr.dtype)
        return _concat_field([arr[keep], fresh])

    merged_state = AdamState(
        m={f: carry(state.m, f) for f in PARAM_FIELDS},
        v={f: carry(state.v, f) for f in PARAM_FIELDS},
        step=state.step,
    )

    # prune faint splats, but never empty a face
    opacity = merged.opacity
    drop = opacity < config.opacity_prune_threshold
    for face in np.unique(merged.parent_face[drop]):
        members = np.flatnonzero(merged.parent_face == face)
        if np.all(drop[members]):
            drop[members[np.argmax(opacity[members])]] = False
    if np.any(drop):
        keep2 = ~drop
        merged = GaussianCloud(
            mu_local=merged.mu_local[keep2],
            rot_local=merged.rot_local[keep2],
            scale_log=merged.scale_log[keep2],
            opacity_raw=merged.opacity_raw[keep2],
            sh_coeffs=merged.sh_coeffs[keep2],
            parent_face=merged.parent_face[keep2],
        )
        merged_state = AdamState(
            m={f: merged_state.m[f][keep2] for f in PARAM_FIELDS},
            v={f: merged_state.v[f][keep2] for f in PARAM_FIELDS},
            step=merged_state.step,
        )

    merged.check_binding(n_faces)
    return merged, merged_state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class IterationLog:
    iteration: int
    l_rec: float
    l_scale: float
    l_pos: float
    l_id: float
    total: float
    n_splats: int


@dataclass
class TrainResult:
    cloud: GaussianCloud
    state: AdamState
    log: list[IterationLog]
    rng: np.random.Generator


def write_log(path: str | Path, rows: list[IterationLog]) -> None:
    """Write the per-iteration loss log as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["iter,l_rec,l_scale,l_pos,l_id,total,n_splats"]
    for r in rows:
        lines.append(
            f"{r.iteration},{r.l_rec!r},{r.l_scale!r},{r.l_pos!r},"
            f"{r.l_id!r},{r.total!r},{r.n_splats}"
        )
    path.write_text("\n".join(lines) + "\n")


def _run_stage(
    cloud: GaussianCloud,
    scene,
    run: RunConfig,
    *,
    stage: str,
    iters: int,
    rng: np.random.Generator,
    state: AdamState | None,
    start_iteration: int,
    encoders=None,
    lambda_k=None,
    source_embeddings=None,
) -> TrainResult:
    cfg = run.train
    weights = run.weights
    mesh = scene.mesh
    n_faces = len(mesh.faces)
    cloud.check_binding(n_faces)
    if state is None:
        state = init_adam(cloud)

    # frame geometry and targets are static across iterations
    geo = [
        triangle_frames(deform_mesh(mesh, f.params), mesh.faces)
        for f in scene.frames
    ]
    cameras = [f.camera for f in scene.frames]
    targets = [scene.training_target(i) for i in range(len(scene.frames))]

    grad_accum = np.zeros(cloud.count)
    seen = np.zeros(cloud.count)
    log: list[IterationLog] = []

    for it in range(start_iteration, start_iteration + iters):
        try:
            _one_iteration(
                cloud, state, it, rng, geo, cameras, targets, run,
                stage, encoders, lambda_k, source_embeddings,
                grad_accum, seen, log,
            )
        except NumericError as exc:
            if exc.iteration is None:
                raise NumericError(str(exc), iteration=it) from exc
            raise

        step_idx = it + 1
        if (
            cfg.densify_until > 0
            and cfg.densify_from <= step_idx <= cfg.densify_until
            and (step_idx - cfg.densify_from) % cfg.densify_interval == 0
        ):
            mean_grad = grad_accum / np.maximum(seen, 1.0)
            cloud, state = densify_and_prune(
                cloud, state, mean_grad, cfg, rng, n_faces
            )
            grad_accum = np.zeros(cloud.count)
            seen = np.zeros(cloud.count)

    return TrainResult(cloud=cloud, state=state, log=log, rng=rng)


def _one_iteration(
    cloud, state, it, rng, geo, cameras, targets, run,
    stage, encoders, lambda_k, source_embeddings,
    grad_accum, seen, log,
) -> None:
    """Render one sampled frame, backpropagate, and take an Adam step."""
    cfg = run.train
    weights = run.weights
    k = int(rng.integers(len(targets)))
    image = render(cloud, geo[k], cameras[k], 0.0)
    rec = reconstruction_loss(image, targets[k], weights)
    scale = scale_reg(cloud, weights.phi_scale)
    pos = position_reg(cloud, weights.phi_pos)
    ident = None
    if stage == "B":
        ident = identity_loss(image, source_embeddings, encoders, lambda_k)
    total, parts = total_loss(stage, weights, rec, scale, pos, identity=ident)
    if not np.isfinite(total):
        raise NumericError("loss is not finite", iteration=it)

    sg = render_backward(
        cloud, geo[k], cameras[k], (parts["d_rgb"], None), background=0.0
    )
    grads = {
        "mu_local": sg.d_mu_local + parts["d_mu_local"],
        "rot_local": sg.d_rot_local,
        "scale_log": sg.d_scale_raw + parts["d_scale_local"] * cloud.scale_local,
        "opacity_raw": sg.d_opacity_raw,
        "sh_coeffs": sg.d_sh,
    }
    grad_accum += np.where(sg.visible, np.linalg.norm(sg.d_mean2d, axis=1), 0.0)
    seen += sg.visible

    adam_step(cloud, grads, state, cfg, iteration=it)
    log.append(
        IterationLog(
            iteration=it,
            l_rec=rec[0],
            l_scale=scale[0],
            l_pos=pos[0],
            l_id=ident[0] if ident is not None else 0.0,
            total=total,
            n_splats=cloud.count,
        )
    )


def train_stage_a(
    scene,
    run: RunConfig,
    *,
    cloud: GaussianCloud | None = None,
    state: AdamState | None = None,
    rng: np.random.Generator | None = None,
    start_iteration: int = 0,
) -> TrainResult:
    """Fit the avatar to its tracked frames (reconstruction stage)."""
    if cloud is None:
        cloud = init_cloud(scene.mesh)
    if rng is None:
        rng = np.random.default_rng([run.train.seed, 0])
    iters = run.train.stage_a_iters - start_iteration
    if iters < 0:
        raise ParameterError(
            f"start iteration {start_iteration} is beyond the configured "
            f"{run.train.stage_a_iters} iterations"
        )
    return _run_stage(
        cloud,
        scene,
        run,
        stage="A",
        iters=iters,
        rng=rng,
        state=state,
        start_iteration=start_iteration,
    )


def train_stage_b(
    cloud: GaussianCloud,
    scene,
    source_image: np.ndarray,
    encoders,
    lambda_k,
    run: RunConfig,
    *,
    state: AdamState | None = None,
    rng: np.random.Generator | None = None,
    start_iteration: int = 0,
) -> TrainResult:
    """Finetune a fitted avatar toward the identity of ``source_image``."""
    check_encoder_weights(encoders, lambda_k)
    source_embeddings = [enc.encode(source_image) for enc in encoders]
    if rng is None:
        rng = np.random.default_rng([run.train.seed, 1])
    iters = run.train.stage_b_iters - start_iteration
    if iters < 0:
        raise ParameterError(
            f"start iteration {start_iteration} is beyond the configured "
            f"{run.train.stage_b_iters} iterations"
        )
    return _run_stage(
        cloud,
        scene,
        run,
        stage="B",
        iters=iters,
        rng=rng,
        state=state,
        start_iteration=start_iteration,
        encoders=encoders,
        lambda_k=lambda_k,
        source_embeddings=source_embeddings,
    )


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointMeta:
    iteration: int
    config_hash: str
    rng_state: dict | None


def _atomic_write_bytes(path: Path, write_fn) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_checkpoint(
    path: str | Path,
    cloud: GaussianCloud,
    *,
    iteration: int,
    run: RunConfig,
    rng: np.random.Generator | None,
) -> None:
    """Write the cloud plus a JSON sidecar; both writes are atomic.

    The sidecar records the iteration count, a hash of the run
    configuration, and the generator state so an interrupted run can
    resume with the same frame-sampling stream.  Optimizer moments are
    not persisted; a resumed run restarts them from zero.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_bytes(path, lambda tmp: save_cloud(cloud, tmp))

    side = {
        "iteration": int(iteration),
        "config_hash": config_hash(run),
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    side_path = _sidecar_path(path)
    _atomic_write_bytes(
        side_path,
        lambda tmp: tmp.write_text(json.dumps(side, indent=2) + "\n"),
    )


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_checkpoint(path: str | Path) -> tuple[GaussianCloud, CheckpointMeta]:
    path = Path(path)
    side_path = _sidecar_path(path)
    if not side_path.exists():
        raise ParameterError(f"checkpoint sidecar missing: {side_path}")
    cloud = load_cloud(path)
    try:
        side = json.loads(side_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParameterError(f"checkpoint sidecar is not valid JSON: {exc}") from exc
    for key in ("iteration", "config_hash"):
        if key not in side:
            raise ParameterError(f"checkpoint sidecar missing field {key!r}")
    return cloud, CheckpointMeta(
        iteration=int(side["iteration"]),
        config_hash=str(side["config_hash"]),
        rng_state=side.get("rng_state"),
    )


def restore_rng(state: dict | None) -> np.random.Generator:
    """Rebuild the frame-sampling generator saved in a checkpoint sidecar."""
    if state is None:
        raise ParameterError("checkpoint holds no generator state")
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
