"""Synthetic and on-disk frame sequences for tracking and evaluation."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from poseact.datagen import (
    AugmentConfig, BackgroundPool, augment_image, render_scene, sample_gt_pose,
    sample_render_config,
)
from poseact.geometry import CameraIntrinsics, Pose, quat_from_rotvec, quat_mul
from poseact.mesh import Mesh, load_image, model_points, save_image
from poseact.policy import Frame


def synthetic_sequence(mesh: Mesh, K: CameraIntrinsics, n_frames: int, rng: np.random.Generator,
                       shift_px: tuple[float, float] = (0.0, 0.0),
                       rot_deg: tuple[float, float, float] = (0.0, 0.0, 0.0),
                       start: Pose | None = None, backgrounds: BackgroundPool | None = None,
                       augment: AugmentConfig | None = None) -> list[Frame]:
    """Frames of one object moving by a constant image shift and camera-frame rotation.

    The background is fixed for the whole sequence; with ``augment`` each
    frame gets its own lights, material, blur and jitter.
    """
    pts = model_points(mesh)
    gt = sample_gt_pose(pts, K, rng) if start is None else start
    bg = backgrounds.sample(rng) if backgrounds is not None else np.full((K.height, K.width, 3), 0.5)
    dq = quat_from_rotvec(np.radians(rot_deg))
    frames = []
    for _ in range(n_frames):
        if augment is None:
            image = render_scene(mesh, gt, K, bg)
        else:
            lights, material, _ = sample_render_config(augment, rng, gt.z)
            image = augment_image(render_scene(mesh, gt, K, bg, lights, material), augment, rng)
        frames.append(Frame(image, gt))
        t = gt.t
        gt = Pose(quat_mul(dq, gt.q), (t[0] + shift_px[0] * t[2] / K.fx,
                                       t[1] + shift_px[1] * t[2] / K.fy, t[2]))
    return frames


def save_sequence(path, frames: list[Frame], K: CameraIntrinsics) -> None:
    """<path>/intrinsics.json, <path>/frames/NNNNNN.png, <path>/poses.json."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "intrinsics.json").write_text(json.dumps(K.to_dict()) + "\n")
    poses = []
    for i, fr in enumerate(frames):
        save_image(root / "frames" / f"{i:06d}.png", fr.image)
        poses.append(None if fr.gt is None else fr.gt.to_dict())
    (root / "poses.json").write_text(json.dumps(poses) + "\n")


def load_sequence(path) -> tuple[list[Frame], CameraIntrinsics]:
    """Read a sequence directory; ``poses.json`` (a list, null for unknown) is optional."""
    root = Path(path)
    K = CameraIntrinsics.from_dict(json.loads((root / "intrinsics.json").read_text()))
    files = sorted(p for p in (root / "frames").iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise ValueError(f"{root}: no frames found")
    poses = [None] * len(files)
    pose_file = root / "poses.json"
    if pose_file.exists():
        raw = json.loads(pose_file.read_text())
        if len(raw) != len(files):
            raise ValueError(f"{pose_file}: {len(raw)} poses for {len(files)} frames")
        poses = [None if p is None else Pose.from_dict(p) for p in raw]
    return [Frame(load_image(f), gt) for f, gt in zip(files, poses)], K
