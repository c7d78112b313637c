"""Synthetic training data: backgrounds, augmentation, seed offsets, samples."""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from poseact.geometry import (
    CameraIntrinsics, CropState, GeometryError, Pose, StepSizes, compute_crop,
    offset_pose, project_points, random_quaternion,
)
from poseact.mesh import Mesh, model_points, save_image, textured_cube, uv_sphere
from poseact.policy import oracle_decide
from poseact.render import (
    PALETTE, LightConfig, MaterialConfig, PointLight, crop_resize, rasterize,
    render_patch, save_depth_png,
)

log = logging.getLogger(__name__)

DEFAULT_K = CameraIntrinsics(320.0, 320.0, 160.0, 160.0, 320, 320)
MANIFEST_VERSION = 1


# -- seed groups -------------------------------------------------------------------

@dataclass(frozen=True)
class SeedGroup:
    """Offset magnitudes in action counts: (tx/ty, tz, rotation) ranges."""

    name: str
    txy: tuple[int, int]
    tz: tuple[int, int]
    rot: tuple[int, int]

    def axis_range(self, axis: int) -> tuple[int, int]:
        return self.txy if axis < 2 else self.tz if axis == 2 else self.rot


SMALL = SeedGroup("small", (1, 5), (1, 4), (1, 4))
LARGE = SeedGroup("large", (5, 30), (1, 15), (4, 20))
GROUP_NAMES = ("small", "large", "mixed", "random_small", "random_large")


def _draw(rng, lo_hi) -> int:
    return int(rng.integers(lo_hi[0], lo_hi[1] + 1))


def _signed(rng, lo_hi) -> int:
    mag = _draw(rng, lo_hi)
    return mag if rng.random() < 0.5 else -mag


def sample_seed_offset(group: str, rng: np.random.Generator) -> np.ndarray:
    """Signed per-axis action counts (tx, ty, tz, rx, ry, rz) for a seed group."""
    off = np.zeros(6, dtype=np.int64)
    if group in ("small", "large"):
        ranges = SMALL if group == "small" else LARGE
        choice = int(rng.integers(0, 13))  # 12 signed axes + stop
        if choice < 12:
            axis, neg = divmod(choice, 2)
            mag = _draw(rng, ranges.axis_range(axis))
            off[axis] = -mag if neg else mag
    elif group == "mixed":
        big = int(rng.integers(0, 6))
        for axis in range(6):
            off[axis] = _signed(rng, (LARGE if axis == big else SMALL).axis_range(axis))
    elif group in ("random_small", "random_large"):
        ranges = SMALL if group == "random_small" else LARGE
        for axis in range(6):
            off[axis] = _signed(rng, ranges.axis_range(axis))
    else:
        raise ValueError(f"unknown seed group {group!r}")
    return off


# -- backgrounds -------------------------------------------------------------------

class EmptyPoolError(ValueError):
    pass


def _fit(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Center-crop to the target aspect, then resize."""
    from PIL import Image

    h, w = img.shape[:2]
    target = width / height
    if w / h > target:
        cw, ch = int(round(h * target)), h
    else:
        cw, ch = w, int(round(w / target))
    x0, y0 = (w - cw) // 2, (h - ch) // 2
    crop = np.clip(np.round(img[y0:y0 + ch, x0:x0 + cw] * 255), 0, 255).astype(np.uint8)
    out = Image.fromarray(crop).resize((width, height), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64) / 255.0


def procedural_background(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Smooth color field plus random rectangles and stripes."""
    g = rng.uniform(0.0, 1.0, (4, 4, 3))
    img = ndimage.zoom(g, (height / 4, width / 4, 1), order=1, mode="nearest")[:height, :width]
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(3, 9))):
        x0, y0 = rng.integers(0, width), rng.integers(0, height)
        w, h = rng.integers(width // 16, width // 3), rng.integers(height // 16, height // 3)
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0, 1, 3)
    if rng.random() < 0.5:
        ang = rng.uniform(0, np.pi)
        period = rng.uniform(6, 30)
        phase = (xx * np.cos(ang) + yy * np.sin(ang)) / period
        stripes = (np.floor(phase) % 2)[..., None]
        img = img * (0.7 + 0.3 * stripes)
    return np.clip(img, 0.0, 1.0)


class BackgroundPool:
    """Images fitted to one resolution, sampled uniformly."""

    def __init__(self, images: list[np.ndarray]):
        if not images:
            raise EmptyPoolError("background pool is empty")
        self.images = images

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def from_directory(cls, path, width: int, height: int) -> "BackgroundPool":
        from PIL import Image, UnidentifiedImageError

        images = []
        for p in sorted(Path(path).iterdir()):
            if not p.is_file():
                continue
            try:
                with Image.open(p) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError):
                log.warning("skipping non-image file in background pool: %s", p)
                continue
            images.append(_fit(arr, width, height))
        return cls(images)

    @classmethod
    def procedural(cls, seed: int, count: int, width: int, height: int) -> "BackgroundPool":
        rng = np.random.default_rng([seed, 0xB6])
        return cls([procedural_background(rng, width, height) for _ in range(count)])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.images[int(rng.integers(0, len(self.images)))]


def sample_background(pool: BackgroundPool, rng: np.random.Generator) -> np.ndarray:
    return pool.sample(rng)


# -- augmentation ------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    p_motion: float = 0.75           # otherwise radial blur
    noise_sigma: float = 0.05
    jitter: tuple[float, float] = (0.95, 1.25)
    p_unlit: float = 0.2
    metallic: tuple[float, float] = (0.0, 0.85)
    smoothness: tuple[float, float] = (0.0, 0.8)
    n_lights: int = 5
    intensity: tuple[float, float] = (0.5, 1.5)
    occluder_crop: tuple[int, int] = (96, 128)
    occluder_side: tuple[int, int] = (32, 64)
    occluder_probs: tuple[float, ...] = (0.5, 0.125, 0.125, 0.125, 0.125)
    p_mask_crop: float = 0.25
    mask_side: tuple[int, int] = (72, 96)
    occluder_pool_size: int = 256

    def __post_init__(self):
        if abs(sum(self.occluder_probs) - 1.0) > 1e-9:
            raise ValueError("occluder count probabilities must sum to 1")


def sample_render_config(cfg: AugmentConfig, rng: np.random.Generator,
                         depth: float = 1.0) -> tuple[LightConfig, MaterialConfig, dict]:
    """Five point lights sharing one palette color, and a random material."""
    names = list(PALETTE)
    color_name = names[int(rng.integers(0, len(names)))]
    lights = []
    for _ in range(cfg.n_lights):
        pos = (rng.uniform(-1.5, 1.5) * depth, rng.uniform(-1.5, 1.5) * depth,
               rng.uniform(-0.5, 0.5) * depth)
        lights.append(PointLight(pos, float(rng.uniform(*cfg.intensity)), PALETTE[color_name]))
    if rng.random() < cfg.p_unlit:
        material = MaterialConfig("unlit")
    else:
        material = MaterialConfig("standard", float(rng.uniform(*cfg.metallic)),
                                  float(rng.uniform(*cfg.smoothness)))
    record = {"light_color": color_name, "light_intensity": [l.intensity for l in lights],
              "material": material.mode, "metallic": material.metallic,
              "smoothness": material.smoothness}
    return LightConfig(tuple(lights)), material, record


def motion_kernel(angle: float, taps: int = 9) -> np.ndarray:
    """Normalized line kernel of ``taps`` samples, bilinearly splatted."""
    k = np.zeros((taps, taps))
    c = taps // 2
    for s in np.arange(taps) - c:
        x, y = c + s * math.cos(angle), c + s * math.sin(angle)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                          (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            if 0 <= x0 + dx < taps and 0 <= y0 + dy < taps:
                k[y0 + dy, x0 + dx] += w
    return k / k.sum()


def motion_blur(img: np.ndarray, angle: float) -> np.ndarray:
    k = motion_kernel(angle)
    return np.stack([ndimage.convolve(img[..., c], k, mode="nearest")
                     for c in range(img.shape[-1])], axis=-1)


def radial_blur(img: np.ndarray, strength: float = 0.02, steps: int = 5) -> np.ndarray:
    """Average of ``steps`` zooms about the image center."""
    h, w = img.shape[:2]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    acc = np.zeros_like(img)
    for i in range(steps):
        s = 1.0 + strength * i
        offset = center - center / s
        for c in range(img.shape[-1]):
            acc[..., c] += ndimage.affine_transform(img[..., c], np.eye(2) / s, offset,
                                                    order=1, mode="nearest")
    return acc / steps


def color_jitter(img: np.ndarray, brightness: float, contrast: float,
                 saturation: float) -> np.ndarray:
    out = img * brightness
    out = out.mean() + (out - out.mean()) * contrast
    gray = out.mean(axis=-1, keepdims=True)
    out = gray + (out - gray) * saturation
    return np.clip(out, 0.0, 1.0)


def augment_image(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
                  record: dict | None = None) -> np.ndarray:
    """Blur (+ additive noise) then color jitter."""
    if rng.random() < cfg.p_motion:
        out = motion_blur(img, float(rng.uniform(0, np.pi)))
        kind = "motion"
    else:
        out = radial_blur(img)
        kind = "radial"
    out = np.clip(out + rng.normal(0.0, cfg.noise_sigma, out.shape), 0.0, 1.0)
    factors = rng.uniform(*cfg.jitter, size=3)
    out = color_jitter(out, *factors)
    if record is not None:
        record["blur"] = kind
        record["jitter"] = [float(f) for f in factors]
    return out


class OccluderPool:
    """Pre-rendered occluder patches (rgb + mask), 128 x 128."""

    def __init__(self, patches: list[tuple[np.ndarray, np.ndarray]]):
        self.patches = patches

    def __len__(self) -> int:
        return len(self.patches)

    @classmethod
    def build(cls, seed: int, count: int, side: int = 128) -> "OccluderPool":
        rng = np.random.default_rng([seed, 0x0CC])
        K = CameraIntrinsics(2.0 * side, 2.0 * side, side / 2, side / 2, side, side)
        sphere = uv_sphere(0.1)
        box = textured_cube(0.16, subdivisions=1, texture_size=16)
        patches = []
        while len(patches) < count:
            if rng.random() < 0.5:
                mesh = sphere
            else:
                # noise texture so occluders never look like the target cube
                tex = ndimage.zoom(rng.uniform(0, 1, (8, 12, 3)), (4, 4, 1), order=1)
                mesh = Mesh(box.vertices, box.faces, uv=box.uv, texture=tex)
            tint = rng.uniform(0.1, 1.0, 3)
            pose = Pose(random_quaternion(rng),
                        (rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(0.5, 0.8)))
            rp = rasterize(mesh, pose, K)
            if rp.mask.sum() < 16:
                continue
            patches.append((rp.rgb * tint, rp.mask.astype(np.float64)))
        return cls(patches)


def _paste_occluder(img: np.ndarray, occ: tuple[np.ndarray, np.ndarray], cfg: AugmentConfig,
                    rng: np.random.Generator) -> np.ndarray:
    rgb, mask = occ
    n_src = rgb.shape[0]
    cs = int(rng.integers(cfg.occluder_crop[0], min(cfg.occluder_crop[1], n_src) + 1))
    cx0 = int(rng.integers(0, n_src - cs + 1))
    cy0 = int(rng.integers(0, n_src - cs + 1))
    side = int(rng.integers(cfg.occluder_side[0], cfg.occluder_side[1] + 1))
    crop = CropState((cx0 + cs / 2, cy0 + cs / 2), float(cs), side)
    o_rgb = crop_resize(rgb, crop)
    o_mask = crop_resize(mask, crop)[..., None]
    n = img.shape[0]
    x0 = int(rng.integers(-side // 2, n - side // 2))
    y0 = int(rng.integers(-side // 2, n - side // 2))
    xa, ya = max(x0, 0), max(y0, 0)
    xb, yb = min(x0 + side, n), min(y0 + side, n)
    out = img.copy()
    sub_rgb = o_rgb[ya - y0:yb - y0, xa - x0:xb - x0]
    sub_m = o_mask[ya - y0:yb - y0, xa - x0:xb - x0]
    out[ya:yb, xa:xb] = sub_m * sub_rgb + (1 - sub_m) * out[ya:yb, xa:xb]
    return out


def augment_patch(patch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
                  occluders: OccluderPool | None = None,
                  record: dict | None = None) -> np.ndarray:
    """Blur, noise, color jitter, occluders, masked-region crop on an n x n patch.

    The input is the observed crop already composited onto its background;
    render-time material/light randomization happens before compositing.
    """
    rec = {} if record is None else record
    out = augment_image(np.asarray(patch, dtype=np.float64), cfg, rng, rec)
    count = int(rng.choice(len(cfg.occluder_probs), p=np.asarray(cfg.occluder_probs)))
    rec["occluders"] = count
    if occluders is not None and len(occluders):
        for _ in range(count):
            occ = occluders.patches[int(rng.integers(0, len(occluders)))]
            out = _paste_occluder(out, occ, cfg, rng)
    rec["mask_crop"] = bool(rng.random() < cfg.p_mask_crop)
    if rec["mask_crop"]:
        n = out.shape[0]
        side = int(rng.integers(cfg.mask_side[0], min(cfg.mask_side[1], n) + 1))
        x0 = int(rng.integers(0, n - side + 1))
        y0 = int(rng.integers(0, n - side + 1))
        kept = np.zeros_like(out)
        kept[y0:y0 + side, x0:x0 + side] = out[y0:y0 + side, x0:x0 + side]
        out = kept
    return out


# -- scenes -----------------------------------------------------------------------

def sample_gt_pose(mesh_points: np.ndarray, K: CameraIntrinsics, rng: np.random.Generator,
                   depth_range: tuple[float, float] = (0.5, 2.0), tries: int = 20) -> Pose:
    """Uniform rotation, uniform depth, image offset keeping the bbox in frame."""
    q = random_quaternion(rng)
    z = float(rng.uniform(*depth_range))
    pose = Pose(q, (0.0, 0.0, z))
    uv = project_points(pose, K, mesh_points)
    lo = uv.min(axis=0) - np.array([K.cx, K.cy])
    hi = uv.max(axis=0) - np.array([K.cx, K.cy])
    for _ in range(tries):
        u_lo, u_hi = -lo[0], K.width - hi[0]
        v_lo, v_hi = -lo[1], K.height - hi[1]
        u = rng.uniform(u_lo, u_hi) if u_hi > u_lo else K.cx
        v = rng.uniform(v_lo, v_hi) if v_hi > v_lo else K.cy
        cand = Pose(q, ((u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z))
        uv = project_points(cand, K, mesh_points)
        if uv.min() >= 0 and uv[:, 0].max() <= K.width and uv[:, 1].max() <= K.height:
            return cand
    return pose


def render_scene(mesh: Mesh, pose: Pose, K: CameraIntrinsics, background: np.ndarray,
                 lights: LightConfig | None = None,
                 material: MaterialConfig | None = None) -> np.ndarray:
    rp = rasterize(mesh, pose, K, lights, material)
    m = rp.mask.astype(bool)[..., None]
    return np.where(m, rp.rgb, background)


def synthetic_scene(mesh: Mesh, K: CameraIntrinsics, rng: np.random.Generator,
                    backgrounds: BackgroundPool | None = None,
                    augment: AugmentConfig | None = None, gt: Pose | None = None,
                    points: np.ndarray | None = None):
    """Observed image and its gt pose; ``augment`` adds lights/material/blur/jitter."""
    from poseact.policy import Scene

    pts = model_points(mesh) if points is None else points
    if gt is None:
        gt = sample_gt_pose(pts, K, rng)
    if backgrounds is None:
        bg = np.full((K.height, K.width, 3), 0.5)
    else:
        bg = backgrounds.sample(rng)
    if augment is None:
        image = render_scene(mesh, gt, K, bg)
    else:
        lights, material, _ = sample_render_config(augment, rng, gt.z)
        image = augment_image(render_scene(mesh, gt, K, bg, lights, material), augment, rng)
    return Scene(image, mesh, K, gt, pts)


# -- samples -----------------------------------------------------------------------

@dataclass
class Sample:
    stack: np.ndarray           # (n, n, 8) float32
    label: int
    gt: Pose
    hypothesis: Pose
    offsets: np.ndarray
    group: str
    record: dict = field(default_factory=dict)


@dataclass
class SampleContext:
    """Everything shared by the samples of one dataset or stream."""

    mesh: Mesh
    K: CameraIntrinsics = DEFAULT_K
    backgrounds: BackgroundPool | None = None
    occluders: OccluderPool | None = None
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    steps: StepSizes = field(default_factory=StepSizes)
    patch_side: int = 128
    points: np.ndarray | None = None

    def __post_init__(self):
        if self.points is None:
            self.points = model_points(self.mesh)

    @classmethod
    def default(cls, mesh: Mesh, seed: int, K: CameraIntrinsics = DEFAULT_K,
                background_dir=None, augment: AugmentConfig | None = AugmentConfig(),
                n_backgrounds: int = 32) -> "SampleContext":
        if background_dir is not None:
            bgs = BackgroundPool.from_directory(background_dir, K.width, K.height)
        else:
            bgs = BackgroundPool.procedural(seed, n_backgrounds, K.width, K.height)
        occ = OccluderPool.build(seed, augment.occluder_pool_size) if augment else None
        return cls(mesh, K, bgs, occ, augment)


def generate_sample(ctx: SampleContext, group: str, rng: np.random.Generator,
                    tries: int = 10, offsets=None) -> Sample:
    """Observed crop of an augmented gt render plus the clean hypothesis render,
    labelled with the oracle decision. ``offsets`` overrides the group draw."""
    K, steps = ctx.K, ctx.steps
    fixed = None if offsets is None else np.asarray(offsets, dtype=np.int64)
    for _ in range(tries):
        gt = sample_gt_pose(ctx.points, K, rng)
        offsets = sample_seed_offset(group, rng) if fixed is None else fixed
        hyp = offset_pose(gt, offsets, steps, K, rng)
        try:
            crop = compute_crop(hyp, K, ctx.points, ctx.patch_side)
        except GeometryError:
            continue
        break
    else:
        raise GeometryError("could not place a valid hypothesis")
    record: dict = {}
    bg = ctx.backgrounds.sample(rng) if ctx.backgrounds else np.full((K.height, K.width, 3), 0.5)
    if ctx.augment is not None:
        lights, material, rrec = sample_render_config(ctx.augment, rng, gt.z)
        record.update(rrec)
    else:
        lights = material = None
    # observed channel: gt object on its background, seen through the hypothesis crop
    obj = render_patch(ctx.mesh, gt, K, crop, lights, material)
    m = obj.mask.astype(bool)[..., None]
    obs = np.where(m, obj.rgb, crop_resize(bg, crop))
    if ctx.augment is not None:
        obs = augment_patch(obs, ctx.augment, rng, ctx.occluders, record)
    hyp_r = render_patch(ctx.mesh, hyp, K, crop)
    n = ctx.patch_side
    stack = np.empty((n, n, 8), dtype=np.float32)
    stack[..., 0:3] = obs
    stack[..., 3:6] = hyp_r.rgb
    stack[..., 6] = hyp_r.depth / hyp.z
    stack[..., 7] = hyp_r.mask
    label = oracle_decide(hyp, gt, crop, steps, K)
    return Sample(stack, label, gt, hyp, offsets, group, record)


def sample_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(base_seed), int(index)])


# -- datasets ---------------------------------------------------------------------

_WORKER_CTX: SampleContext | None = None


def _init_worker(ctx: SampleContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _write_sample(job) -> dict:
    index, group, base_seed, out = job
    ctx = _WORKER_CTX
    s = generate_sample(ctx, group, sample_rng(base_seed, index))
    sid = f"{index:06d}"
    root = Path(out)
    save_image(root / f"{sid}_obs.png", s.stack[..., 0:3])
    save_image(root / f"{sid}_rgb.png", s.stack[..., 3:6])
    save_depth_png(root / f"{sid}_depth.png", s.stack[..., 6] * s.hypothesis.z)
    from PIL import Image
    Image.fromarray((s.stack[..., 7] > 0).astype(np.uint8) * 255).save(root / f"{sid}_mask.png")
    meta = {"id": sid, "group": group, "seed": [base_seed, index], "label": s.label,
            "gt": s.gt.to_dict(), "hypothesis": s.hypothesis.to_dict(),
            "offsets": [int(o) for o in s.offsets], "augment": s.record}
    (root / f"{sid}.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return {"id": sid, "group": group, "label": s.label, "seed": [base_seed, index]}


def generate_dataset(ctx: SampleContext, counts: dict[str, int], out, workers: int = 1,
                     base_seed: int = 0, extra_meta: dict | None = None) -> dict:
    """Write samples and manifest.json; content depends only on inputs and seed."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    index = 0
    for group in GROUP_NAMES:
        for _ in range(int(counts.get(group, 0))):
            jobs.append((index, group, base_seed, str(out)))
            index += 1
    unknown = set(counts) - set(GROUP_NAMES)
    if unknown:
        raise ValueError(f"unknown seed groups: {sorted(unknown)}")
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as ex:
            entries = list(ex.map(_write_sample, jobs, chunksize=4))
    else:
        _init_worker(ctx)
        entries = [_write_sample(j) for j in jobs]
    manifest = {
        "version": MANIFEST_VERSION,
        "base_seed": int(base_seed),
        "counts": {g: int(counts.get(g, 0)) for g in GROUP_NAMES},
        "total": len(entries),
        "intrinsics": ctx.K.to_dict(),
        "steps": {"tx_ty": ctx.steps.tx_ty, "tz": ctx.steps.tz, "rot": ctx.steps.rot},
        "patch_side": ctx.patch_side,
        "augment": ctx.augment is not None,
        "samples": sorted(entries, key=lambda e: e["id"]),
    }
    if extra_meta:
        manifest["meta"] = extra_meta
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
