"""Initialization from first-step translation decisions.

Probing a grid of image locations with a single decision yields a sparse
field of in-plane pull directions. Its smoothed divergence has a sink at the
object; the object rotation is then picked as the grid rotation whose
episode terminates soonest.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from poseact.geometry import (
    CROP_MARGIN, CameraIntrinsics, CropState, GeometryError, Pose, StepSizes, compute_crop,
)
from poseact.mesh import Mesh, model_points
from poseact.policy import DecisionContext, LoopConfig, Scene, run_episode

TRANSLATION_ACTIONS = (0, 1, 2, 3)


class TooFewSeedsError(ValueError):
    pass


class FlatMapError(ValueError):
    pass


@dataclass
class SeedField:
    centers: np.ndarray   # (G, 2) pixel positions of the probes
    vectors: np.ndarray   # (G, 2) unit vectors, zero where invalid
    valid: np.ndarray     # (G,) bool
    shape: tuple[int, int]  # image (height, width)
    spacing: float
    actions: np.ndarray | None = None

    def to_json(self) -> str:
        return json.dumps({
            "shape": list(self.shape), "spacing": self.spacing,
            "seeds": [{"center": c.tolist(), "vector": v.tolist(), "valid": bool(ok)}
                      for c, v, ok in zip(self.centers, self.vectors, self.valid)],
        })


@dataclass
class DivergenceMap:
    W: np.ndarray     # (H, W) divergence of the smoothed field
    sigma: float


def _policy_scores(decide, ctx: DecisionContext) -> np.ndarray:
    """Per-action preference scores; one-hot of the decision if unavailable."""
    if hasattr(decide, "scores"):
        return np.asarray(decide.scores(ctx), dtype=np.float64)
    s = np.zeros(13)
    s[int(decide(ctx))] = 1.0
    return s


def grid_centers(width: int, height: int, spacing: float) -> np.ndarray:
    xs = np.arange(spacing / 2, width, spacing)
    ys = np.arange(spacing / 2, height, spacing)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def seed_translation_field(image: np.ndarray, mesh: Mesh, K: CameraIntrinsics, decide,
                           grid_spacing: float, probe_pose: Pose, rng=None,
                           gt: Pose | None = None, steps: StepSizes = StepSizes(),
                           centers: np.ndarray | None = None) -> SeedField:
    """One decision per grid location with the probe moved there in the image plane.

    The direction is the score difference of the opposite translation pairs,
    (s[+tx] - s[-tx], s[+ty] - s[-ty]), normalized. A seed is valid when the
    decision itself is a translation in the image plane. ``rng`` is accepted
    for interface symmetry; probing is deterministic.
    """
    scene = Scene(image, mesh, K, gt)
    if centers is None:
        centers = grid_centers(K.width, K.height, grid_spacing)
    z = probe_pose.z
    vectors = np.zeros((len(centers), 2))
    valid = np.zeros(len(centers), dtype=bool)
    actions = np.full(len(centers), -1, dtype=np.int64)
    for i, (u, v) in enumerate(centers):
        probe = Pose(probe_pose.q, ((u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z))
        try:
            crop = compute_crop(probe, K, scene.points)
        except GeometryError:
            continue
        s = _policy_scores(decide, DecisionContext(scene, probe, crop, steps))
        a = int(np.argmax(s))
        actions[i] = a
        vec = np.array([s[0] - s[1], s[2] - s[3]])
        norm = float(np.hypot(*vec))
        if a in TRANSLATION_ACTIONS and norm > 0 and np.isfinite(norm):
            vectors[i] = vec / norm
            valid[i] = True
    return SeedField(np.asarray(centers, dtype=np.float64), vectors, valid,
                     (K.height, K.width), float(grid_spacing), actions)


def divergence(field: SeedField, smoothing: float | None = None) -> DivergenceMap:
    """Scatter seeds to the pixel grid, Gaussian-smooth, central-difference divergence.

    Smoothing is a normalized convolution, G*(V valid) / G*valid, so a
    constant field stays exactly constant wherever seeds reach.
    """
    if int(field.valid.sum()) < 4:
        raise TooFewSeedsError(f"need at least 4 valid seeds, got {int(field.valid.sum())}")
    sigma = 1.5 * field.spacing if smoothing is None else float(smoothing)
    H, W = field.shape
    vx = np.zeros((H, W))
    vy = np.zeros((H, W))
    wt = np.zeros((H, W))
    px = np.clip(np.floor(field.centers[:, 0]).astype(int), 0, W - 1)
    py = np.clip(np.floor(field.centers[:, 1]).astype(int), 0, H - 1)
    ok = field.valid
    np.add.at(vx, (py[ok], px[ok]), field.vectors[ok, 0])
    np.add.at(vy, (py[ok], px[ok]), field.vectors[ok, 1])
    np.add.at(wt, (py[ok], px[ok]), 1.0)
    sx = ndimage.gaussian_filter(vx, sigma, mode="constant")
    sy = ndimage.gaussian_filter(vy, sigma, mode="constant")
    sw = ndimage.gaussian_filter(wt, sigma, mode="constant")
    floor = 1e-12 * sw.max()
    with np.errstate(divide="ignore", invalid="ignore"):
        fx = np.where(sw > floor, sx / sw, 0.0)
        fy = np.where(sw > floor, sy / sw, 0.0)
    Wmap = np.gradient(fx, axis=1) + np.gradient(fy, axis=0)
    return DivergenceMap(Wmap, sigma)


def detect_center_and_scale(W: DivergenceMap, field: SeedField | None = None,
                            patch_side: int = 128) -> CropState:
    """Sink of the field (maximum of -W) and the full width of its half-maximum lobe."""
    neg = -np.asarray(W.W if isinstance(W, DivergenceMap) else W)
    peak = float(neg.max())
    med = float(np.median(neg))
    if not np.isfinite(peak) or peak - med <= 1e-9 * max(1.0, abs(peak)):
        raise FlatMapError("divergence map has no distinct extremum")
    flat = int(np.argmax(neg))  # first in raster order on ties
    y, x = divmod(flat, neg.shape[1])
    half = 0.5 * (peak + med)
    labels, _ = ndimage.label(neg >= half)
    ys, xs = np.nonzero(labels == labels[y, x])
    width = max(xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
    side = max(neg.shape)
    diameter = float(np.clip(width, 16, side))
    return CropState((x + 0.5, y + 0.5), diameter, patch_side)


# -- rotation ---------------------------------------------------------------------

def rotation_grid(count: int = 60) -> np.ndarray:
    """Deterministic low-discrepancy unit quaternions (super-Fibonacci spiral)."""
    phi = math.sqrt(2.0)
    psi = 1.533751168755204288118041
    out = np.empty((count, 4))
    for i in range(count):
        s = i + 0.5
        r = math.sqrt(s / count)
        R = math.sqrt(1.0 - s / count)
        a = 2 * math.pi * s / phi
        b = 2 * math.pi * s / psi
        q = np.array([r * math.sin(a), r * math.cos(a), R * math.sin(b), R * math.cos(b)])
        out[i] = q if q[0] >= 0 else -q
    return out


def depth_from_crop(crop: CropState, K: CameraIntrinsics, points: np.ndarray,
                    margin: float = CROP_MARGIN) -> float:
    """Depth at which the model's bounding sphere spans the crop diameter."""
    extent = 2.0 * float(np.max(np.linalg.norm(points, axis=1)))
    return margin * 0.5 * (K.fx + K.fy) * extent / crop.diameter


@dataclass
class RotationSearch:
    pose: Pose
    index: int
    step_counts: list[int]


def init_rotation(image: np.ndarray, mesh: Mesh, K: CameraIntrinsics, decide,
                  crop: CropState, rotations=None, cfg: LoopConfig = LoopConfig(max_steps=40),
                  gt: Pose | None = None, depth: float | None = None,
                  steps: StepSizes = StepSizes(), detail: bool = False):
    """Episode from each grid rotation at the detected translation; fewest steps wins."""
    pts = model_points(mesh)
    scene = Scene(image, mesh, K, gt, pts)
    rots = rotation_grid() if rotations is None else np.asarray(rotations, dtype=np.float64)
    if len(rots) == 0:
        raise ValueError("rotation grid is empty")
    z = depth_from_crop(crop, K, pts) if depth is None else float(depth)
    u, v = crop.center
    t = ((u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z)
    best = None
    counts = []
    for i, q in enumerate(rots):
        final, trace = run_episode(decide, scene, Pose(q, t), cfg, steps)
        counts.append(len(trace))
        if best is None or len(trace) < counts[best[0]]:
            best = (i, final)
    result = RotationSearch(best[1], best[0], counts)
    return result if detail else result.pose


def detect(image: np.ndarray, mesh: Mesh, K: CameraIntrinsics, decide, probe_pose: Pose,
           grid_spacing: float = 16.0, smoothing: float | None = None,
           gt: Pose | None = None) -> tuple[CropState, SeedField, DivergenceMap]:
    field = seed_translation_field(image, mesh, K, decide, grid_spacing, probe_pose, gt=gt)
    dmap = divergence(field, smoothing)
    return detect_center_and_scale(dmap, field), field, dmap


def save_detection_debug(prefix, field: SeedField, dmap: DivergenceMap) -> None:
    """<prefix>_W.png heatmap, <prefix>_field.png seed plot, <prefix>_seeds.json."""
    from PIL import Image, ImageDraw

    prefix = str(prefix)
    neg = -dmap.W
    lo, hi = float(neg.min()), float(neg.max())
    norm = (neg - lo) / (hi - lo) if hi > lo else np.zeros_like(neg)
    heat = np.stack([norm, 1.0 - np.abs(2 * norm - 1), 1.0 - norm], axis=-1)
    Image.fromarray((heat * 255).astype(np.uint8)).save(prefix + "_W.png")
    H, W = field.shape
    canvas = Image.new("RGB", (W, H), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    L = 0.4 * field.spacing
    for c, vec, ok in zip(field.centers, field.vectors, field.valid):
        if ok:
            draw.line([tuple(c), tuple(c + L * vec)], fill=(200, 30, 30), width=1)
        else:
            draw.point(tuple(c), fill=(120, 120, 120))
    canvas.save(prefix + "_field.png")
    with open(prefix + "_seeds.json", "w") as fh:
        fh.write(field.to_json())
