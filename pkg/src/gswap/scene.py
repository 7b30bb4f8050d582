"""Scene ingestion: tracking JSON, PNG frame/matte I/O, scene containers.

A tracking file holds the static subject description (shape coefficients,
mesh id) plus one entry per tracked frame: animation parameters, camera,
and relative paths to the target frame and matte.  Units are meters,
radians, and pixels.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ParameterError
from .geometry import Camera, FrameParams, RiggedMesh, synthetic_head

_SYNTHETIC_MESH_RE = re.compile(r"synthetic-head-v1 seed=(\d+)")


def save_png(path, array) -> None:
    """Write a float image in [0, 1] as 8-bit PNG (RGB or grayscale)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array, dtype=np.float64)
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 3:
        Image.fromarray(data, "RGB").save(path)
    elif data.ndim == 2:
        Image.fromarray(data, "L").save(path)
    else:
        raise ParameterError(f"cannot write image with shape {arr.shape}")


def load_png(path) -> np.ndarray:
    """Read a PNG as float in [0, 1]; RGB -> (H, W, 3), grayscale -> (H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        return arr[:, :, :3].astype(np.float64) / 255.0
    return arr.astype(np.float64) / 255.0


@dataclass
class TrackedFrame:
    """One tracked video frame: animation, camera, and image paths."""

    params: FrameParams
    camera: Camera
    target_frame_path: str
    matte_path: str


@dataclass
class Scene:
    """A loaded tracking file plus the rig it animates."""

    root: Path
    mesh_id: str
    mesh: RiggedMesh
    frames: list

    def __len__(self) -> int:
        return len(self.frames)

    def load_target(self, i: int) -> np.ndarray:
        return load_png(self.root / self.frames[i].target_frame_path)

    def load_matte(self, i: int) -> np.ndarray:
        return load_png(self.root / self.frames[i].matte_path)

    def training_target(self, i: int) -> np.ndarray:
        """Background-removed target: frame with the matte applied."""
        return self.load_target(i) * self.load_matte(i)[:, :, None]


def _camera_to_json(camera: Camera) -> dict:
    return {
        "fx": float(camera.fx),
        "fy": float(camera.fy),
        "cx": float(camera.cx),
        "cy": float(camera.cy),
        "width": int(camera.width),
        "height": int(camera.height),
        "rotation": [float(x) for x in camera.rotation],
        "translation": [float(x) for x in camera.translation],
    }


def _camera_from_json(doc: dict) -> Camera:
    return Camera(
        fx=float(doc["fx"]),
        fy=float(doc["fy"]),
        cx=float(doc["cx"]),
        cy=float(doc["cy"]),
        width=int(doc["width"]),
        height=int(doc["height"]),
        rotation=np.asarray(doc["rotation"], dtype=np.float64),
        translation=np.asarray(doc["translation"], dtype=np.float64),
    )


def write_tracking(path, mesh_id: str, shape, frames) -> None:
    """Serialize tracked frames to JSON (shape is static per subject)."""
    doc = {
        "mesh_id": mesh_id,
        "shape": [float(x) for x in np.asarray(shape).ravel()],
        "frames": [
            {
                "expression": [float(x) for x in f.params.expression],
                "jaw_angle": float(f.params.jaw_angle),
                "global_rotation": [float(x) for x in f.params.global_rotation],
                "global_translation": [float(x) for x in f.params.global_translation],
                "camera": _camera_to_json(f.camera),
                "target_frame_path": f.target_frame_path,
                "matte_path": f.matte_path,
            }
            for f in frames
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def mesh_from_id(mesh_id: str) -> RiggedMesh:
    """Rebuild the rig a tracking file refers to."""
    match = _SYNTHETIC_MESH_RE.fullmatch(mesh_id)
    if not match:
        raise ConfigError(
            f"unknown mesh_id {mesh_id!r}; expected 'synthetic-head-v1 seed=N'"
        )
    mesh, _, _ = synthetic_head(int(match.group(1)))
    return mesh


def load_tracking(path) -> tuple[str, np.ndarray, list]:
    """Parse a tracking JSON into (mesh_id, shape, tracked frames)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    mesh_id = doc["mesh_id"]
    shape = np.asarray(doc["shape"], dtype=np.float64)
    frames = []
    for entry in doc["frames"]:
        params = FrameParams(
            shape=shape,
            expression=np.asarray(entry["expression"], dtype=np.float64),
            jaw_angle=float(entry["jaw_angle"]),
            global_rotation=np.asarray(entry["global_rotation"], dtype=np.float64),
            global_translation=np.asarray(entry["global_translation"],
                                          dtype=np.float64),
        )
        frames.append(
            TrackedFrame(
                params=params,
                camera=_camera_from_json(entry["camera"]),
                target_frame_path=entry["target_frame_path"],
                matte_path=entry["matte_path"],
            )
        )
    return mesh_id, shape, frames


def load_scene(directory) -> Scene:
    """Load a scene directory (tracking.json + frames + mattes)."""
    root = Path(directory)
    tracking = root / "tracking.json"
    if not tracking.exists():
        raise ParameterError(f"no tracking.json in {root}")
    mesh_id, _, frames = load_tracking(tracking)
    mesh = mesh_from_id(mesh_id)
    for f in frames:
        f.params.validate(mesh)
    return Scene(root=root, mesh_id=mesh_id, mesh=mesh, frames=frames)
