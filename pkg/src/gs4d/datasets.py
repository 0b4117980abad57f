"""Multi-camera video ingestion plus a synthetic dynamic-scene generator that
doubles as the end-to-end test oracle (its ground truth is rendered by this
repo's own rasterizer, so a perfect fit is known to exist).

Disk layout: `poses.json` at the root and one `cam_<id>/frame_%05d.png`
directory per camera. Images are 8-bit PNG mapped to [0, 1] by /255.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    DatasetError,
    MissingPosesError,
    NonRigidRotationError,
    RaggedFrameCountError,
)
from .gaussians import Camera, Gaussians
from .rasterizer import RenderSettings, rasterize

FRAME_PATTERN = "frame_%05d.png"


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(img if img.dtype == np.uint8 else to_uint8(img)).save(path)


@dataclass
class MultiViewDataset:
    """Cameras with per-camera, per-timestep frame references.

    A frame reference is either a file path or an in-memory uint8 array;
    `image()` yields float64 in [0, 1] either way.
    """

    cameras: dict  # id -> Camera
    frames: dict  # id -> list of path | uint8 array
    held_out: list = field(default_factory=list)

    def __post_init__(self):
        counts = {cid: len(f) for cid, f in self.frames.items()}
        if set(self.cameras) != set(self.frames):
            raise DatasetError("cameras and frame sets disagree")
        if len(set(counts.values())) > 1:
            raise RaggedFrameCountError(f"per-camera frame counts differ: {counts}")
        unknown = [h for h in self.held_out if h not in self.cameras]
        if unknown:
            raise DatasetError(f"held-out ids not in dataset: {unknown}")
        if not [c for c in self.cameras if c not in self.held_out]:
            raise DatasetError("need at least one training camera")

    @property
    def camera_ids(self) -> list:
        return sorted(self.cameras)

    @property
    def timesteps(self) -> int:
        return len(next(iter(self.frames.values()))) if self.frames else 0

    def image(self, cam_id: str, t: int) -> np.ndarray:
        ref = self.frames[cam_id][t]
        if isinstance(ref, np.ndarray):
            return ref.astype(np.float64) / 255.0
        return load_png(ref)


def _camera_from_record(rec: dict) -> Camera:
    w2c = np.array(rec["world_to_camera"], dtype=np.float64).reshape(4, 4)
    rot = w2c[:3, :3]
    if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-6 or np.linalg.det(rot) < 0:
        raise NonRigidRotationError(f"camera {rec.get('id')}: rotation block is not a rotation")
    return Camera(
        world_to_camera=w2c,
        focal=np.array([rec["fx"], rec["fy"]], dtype=np.float64),
        principal_point=np.array([rec["cx"], rec["cy"]], dtype=np.float64),
        image_size=(int(rec["width"]), int(rec["height"])),
    )


def load_multiview(root) -> MultiViewDataset:
    poses_path = os.path.join(root, "poses.json")
    if not os.path.exists(poses_path):
        raise MissingPosesError(f"no poses.json under {root}")
    with open(poses_path) as fh:
        meta = json.load(fh)
    cameras = {}
    frames = {}
    for rec in meta["cameras"]:
        cid = str(rec["id"])
        cameras[cid] = _camera_from_record(rec)
        cam_dir = os.path.join(root, f"cam_{cid}")
        if not os.path.isdir(cam_dir):
            raise DatasetError(f"missing frame directory {cam_dir}")
        names = sorted(n for n in os.listdir(cam_dir) if n.startswith("frame_") and n.endswith(".png"))
        frames[cid] = [os.path.join(cam_dir, n) for n in names]
    return MultiViewDataset(cameras=cameras, frames=frames, held_out=[str(h) for h in meta.get("held_out", [])])


def save_dataset(dataset: MultiViewDataset, root) -> None:
    os.makedirs(root, exist_ok=True)
    records = []
    for cid in dataset.camera_ids:
        cam = dataset.cameras[cid]
        records.append(
            {
                "id": cid,
                "world_to_camera": [float(v) for v in cam.world_to_camera.ravel()],
                "fx": float(cam.focal[0]),
                "fy": float(cam.focal[1]),
                "cx": float(cam.principal_point[0]),
                "cy": float(cam.principal_point[1]),
                "width": cam.image_size[0],
                "height": cam.image_size[1],
            }
        )
        cam_dir = os.path.join(root, f"cam_{cid}")
        os.makedirs(cam_dir, exist_ok=True)
        for t, ref in enumerate(dataset.frames[cid]):
            img = ref if isinstance(ref, np.ndarray) else to_uint8(load_png(ref))
            save_png(os.path.join(cam_dir, FRAME_PATTERN % t), img)
    with open(os.path.join(root, "poses.json"), "w") as fh:
        json.dump({"cameras": records, "held_out": dataset.held_out}, fh, indent=1)


def split_train_eval(dataset: MultiViewDataset, held_out=None):
    """(train views, eval views) as (camera_id, timestep) pairs; eval views are
    the held-out cameras' frames, disjoint from training."""
    held = [str(h) for h in (dataset.held_out if held_out is None else held_out)]
    unknown = [h for h in held if h not in dataset.cameras]
    if unknown:
        raise DatasetError(f"held-out ids not in dataset: {unknown}")
    if not held:
        warnings.warn("no held-out cameras: evaluation split is empty")
    train, eval_ = [], []
    for cid in dataset.camera_ids:
        bucket = eval_ if cid in held else train
        bucket.extend((cid, t) for t in range(dataset.timesteps))
    return train, eval_


# --- synthetic scenes ---

def _look_at(position: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    z = target - position
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, float), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([x, y, z])
    w2c[:3, 3] = -w2c[:3, :3] @ position
    return w2c


def ring_cameras(n_cameras: int, image_size: int, radius: float = 2.6, height: float = 0.45,
                 focal_scale: float = 1.5) -> dict:
    cams = {}
    for i in range(n_cameras):
        theta = 2.0 * np.pi * i / n_cameras
        pos = np.array([radius * np.sin(theta), height, radius * np.cos(theta)])
        cams[str(i)] = Camera(
            world_to_camera=_look_at(pos, np.zeros(3)),
            focal=np.array([focal_scale * image_size, focal_scale * image_size]),
            principal_point=np.array([(image_size - 1) / 2.0, (image_size - 1) / 2.0]),
            image_size=(image_size, image_size),
        )
    return cams


@dataclass
class SynthScene:
    """Ground truth behind a synthetic dataset: the base splat set and its
    per-timestep center trajectory."""

    gaussians: Gaussians
    center_traj: np.ndarray  # (T, N, 3)
    cameras: dict
    render_settings: RenderSettings

    def gaussians_at(self, t: int) -> Gaussians:
        g = self.gaussians.copy()
        g.centers = self.center_traj[t].copy()
        return g

    def render(self, cam_id: str, t: int) -> np.ndarray:
        out = rasterize(self.gaussians_at(t), self.cameras[cam_id], self.render_settings)
        return out.color


def synth_scene(
    seed: int,
    n_gaussians: int,
    motion: str = "oscillate",
    n_cameras: int = 6,
    timesteps: int = 20,
    image_size: int = 64,
    amplitude: float = 0.08,
    held_out=("0",),
    sh_degree: int = 0,
):
    """Random splats in the unit box with analytic motion, rendered from a
    camera ring by this repo's rasterizer. Returns (SynthScene, dataset)."""
    if motion not in ("static", "oscillate", "drift"):
        raise DatasetError(f"unknown motion {motion!r}")
    if not 0.0 <= amplitude <= 0.1:
        raise DatasetError("amplitude must be within [0, 0.1]")
    rng = np.random.default_rng(seed)
    k = (sh_degree + 1) ** 2
    rgb = rng.uniform(0.15, 0.95, (n_gaussians, 3))
    sh = np.zeros((n_gaussians, k, 3))
    sh[:, 0, :] = (rgb - 0.5) / 0.28209479177387814
    if k > 1:
        sh[:, 1:, :] = rng.normal(0.0, 0.05, (n_gaussians, k - 1, 3))
    opacity = rng.uniform(0.55, 0.95, n_gaussians)

    def f32_exact(a):
        # keep ground truth exactly f32-representable so it survives the
        # stream codec bitwise
        return a.astype(np.float32).astype(np.float64)

    base = Gaussians(
        centers=f32_exact(rng.uniform(-0.35, 0.35, (n_gaussians, 3))),
        rotations=f32_exact(rng.normal(size=(n_gaussians, 4))),
        log_scales=f32_exact(np.log(rng.uniform(0.02, 0.055, (n_gaussians, 3)))),
        opacity_logits=f32_exact(np.log(opacity / (1.0 - opacity))),
        sh_coeffs=f32_exact(sh),
        embeddings=np.zeros((n_gaussians, 1)),
    )
    amp = rng.uniform(-amplitude, amplitude, (n_gaussians, 3))
    tt = np.arange(timesteps, dtype=np.float64)
    if motion == "static":
        offsets = np.zeros((timesteps, 1, 1))
        traj = base.centers[None, :, :] + np.zeros((timesteps, 1, 1))
    elif motion == "oscillate":
        phase = np.sin(2.0 * np.pi * tt / timesteps)
        traj = base.centers[None, :, :] + amp[None, :, :] * phase[:, None, None]
    else:  # drift
        traj = base.centers[None, :, :] + amp[None, :, :] * (tt / timesteps)[:, None, None]

    cameras = ring_cameras(n_cameras, image_size)
    settings = RenderSettings(background=(0.0, 0.0, 0.0))
    scene = SynthScene(gaussians=base, center_traj=traj, cameras=cameras, render_settings=settings)

    frames = {
        cid: [to_uint8(scene.render(cid, t)) for t in range(timesteps)]
        for cid in sorted(cameras)
    }
    dataset = MultiViewDataset(cameras=cameras, frames=frames, held_out=[str(h) for h in held_out])
    return scene, dataset
