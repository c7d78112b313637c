"""Software rendering of RGB / depth / mask and the 8-channel patch stack."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from poseact.geometry import CameraIntrinsics, CropState, Pose
from poseact.mesh import Mesh
from poseact.raster import rasterize_triangles

AMBIENT = 0.2

PALETTE = {
    "blue": (0.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "green": (0.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}


@dataclass(frozen=True)
class PointLight:
    position: tuple[float, float, float]  # camera frame, meters
    intensity: float = 1.0
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class LightConfig:
    lights: tuple[PointLight, ...] = (PointLight((0.0, 0.0, 0.0)),)
    ambient: float = AMBIENT


@dataclass(frozen=True)
class MaterialConfig:
    mode: str = "standard"  # "standard" | "unlit"
    metallic: float = 0.0
    smoothness: float = 0.0

    def __post_init__(self):
        if self.mode not in ("standard", "unlit"):
            raise ValueError(f"unknown material mode {self.mode!r}")


@dataclass
class RenderPatch:
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    index: np.ndarray = field(default=None, repr=False)


def rasterize(mesh: Mesh, pose: Pose, K: CameraIntrinsics, lights: LightConfig | None = None,
              material: MaterialConfig | None = None) -> RenderPatch:
    """Z-buffered render of ``mesh`` at ``pose``; image size from ``K``."""
    lights = lights or LightConfig()
    material = material or MaterialConfig()
    W, H = int(K.width), int(K.height)
    pc = pose.transform(mesh.vertices)
    z = pc[:, 2]
    safe_z = np.where(z > 0, z, 1.0)
    px = np.stack([K.fx * pc[:, 0] / safe_z + K.cx, K.fy * pc[:, 1] / safe_z + K.cy], axis=1)
    depth, index, bary = rasterize_triangles(
        np.ascontiguousarray(px[mesh.faces]), np.ascontiguousarray(z[mesh.faces]), W, H)
    mask = index >= 0
    depth = np.where(mask, depth, 0.0)
    rgb = np.zeros((H, W, 3))
    if mask.any():
        fi = index[mask]
        b = bary[mask]
        albedo = _albedo(mesh, fi, b)
        if material.mode == "unlit":
            rgb[mask] = albedo
        else:
            ys, xs = np.nonzero(mask)
            d = depth[mask]
            pts = np.stack([(xs + 0.5 - K.cx) / K.fx * d, (ys + 0.5 - K.cy) / K.fy * d, d], axis=1)
            normals = (mesh.face_normals @ pose.R.T)[fi]
            # shade the side facing the camera
            flip = np.einsum("ij,ij->i", normals, pts) > 0
            normals[flip] *= -1
            rgb[mask] = _shade(albedo, pts, normals, lights, material)
    return RenderPatch(rgb, depth, mask.astype(np.uint8), index)


def _albedo(mesh: Mesh, fi: np.ndarray, b: np.ndarray) -> np.ndarray:
    if mesh.uv is not None:
        uv = np.einsum("nk,nkc->nc", b, mesh.uv[fi])
        return sample_texture(mesh.texture, uv)
    if mesh.vertex_colors is not None:
        return np.einsum("nk,nkc->nc", b, mesh.vertex_colors[mesh.faces[fi]])
    return np.full((len(fi), 3), 0.7)


def sample_texture(tex: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup; uv in [0, 1]^2 with v pointing up (OBJ convention)."""
    th, tw = tex.shape[:2]
    x = np.clip(uv[:, 0] * tw - 0.5, 0, tw - 1)
    y = np.clip((1.0 - uv[:, 1]) * th - 0.5, 0, th - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    wx = (x - x0)[:, None]
    wy = (y - y0)[:, None]
    top = tex[y0, x0] * (1 - wx) + tex[y0, x1] * wx
    bot = tex[y1, x0] * (1 - wx) + tex[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _shade(albedo, pts, normals, lights: LightConfig, material: MaterialConfig) -> np.ndarray:
    diffuse = np.full_like(albedo, lights.ambient)
    spec = np.zeros_like(albedo)
    ks = material.metallic
    shininess = 2.0 ** (1.0 + 10.0 * material.smoothness)
    view = -pts / np.linalg.norm(pts, axis=1, keepdims=True)
    # light energy is split across the rig so extra lights do not saturate
    share = 1.0 / max(len(lights.lights), 1)
    for light in lights.lights:
        to_light = np.asarray(light.position) - pts
        to_light /= np.maximum(np.linalg.norm(to_light, axis=1, keepdims=True), 1e-12)
        lam = np.maximum(np.einsum("ij,ij->i", normals, to_light), 0.0)[:, None]
        color = share * light.intensity * np.asarray(light.color)
        diffuse += lam * color
        if ks > 0:
            half = to_light + view
            half /= np.maximum(np.linalg.norm(half, axis=1, keepdims=True), 1e-12)
            nh = np.maximum(np.einsum("ij,ij->i", normals, half), 0.0)[:, None]
            spec += ks * (nh ** shininess) * (lam > 0) * color
    return np.clip(albedo * (1.0 - 0.5 * ks) * diffuse + spec, 0.0, 1.0)


def crop_resize(image: np.ndarray, crop: CropState) -> np.ndarray:
    """Bilinear resample of the square window ``crop`` to n x n.

    Samples outside the image domain are 0; inside, the border texels
    extend to the image edge.
    """
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    n = crop.patch_side
    D = crop.diameter
    offs = (np.arange(n) + 0.5) * (D / n) - 0.5 * D - 0.5
    xs = crop.center[0] + offs
    ys = crop.center[1] + offs
    vx = (xs >= -0.5) & (xs <= W - 0.5)
    vy = (ys >= -0.5) & (ys <= H - 0.5)
    xc = np.clip(xs, 0, W - 1)
    yc = np.clip(ys, 0, H - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = xc - x0
    wy = yc - y0
    if img.ndim == 3:
        wx = wx[None, :, None]
        wy = wy[:, None, None]
    else:
        wx = wx[None, :]
        wy = wy[:, None]
    r0, r1 = y0[:, None], y1[:, None]
    top = img[r0, x0] * (1 - wx) + img[r0, x1] * wx
    bot = img[r1, x0] * (1 - wx) + img[r1, x1] * wx
    out = top * (1 - wy) + bot * wy
    valid = vy[:, None] & vx[None, :]
    if img.ndim == 3:
        valid = valid[..., None]
    return np.where(valid, out, 0.0)


def render_patch(mesh: Mesh, pose: Pose, K: CameraIntrinsics, crop: CropState,
                 lights: LightConfig | None = None,
                 material: MaterialConfig | None = None) -> RenderPatch:
    """Render directly into the n x n crop window."""
    return rasterize(mesh, pose, K.for_crop(crop), lights, material)


def render_patch_stack(observed: np.ndarray, mesh: Mesh, pose: Pose, K: CameraIntrinsics,
                       crop: CropState, lights: LightConfig | None = None,
                       material: MaterialConfig | None = None,
                       observed_is_patch: bool = False) -> np.ndarray:
    """(n, n, 8): observed crop, rendered rgb, depth / pose z, mask."""
    obs = observed if observed_is_patch else crop_resize(observed, crop)
    rp = render_patch(mesh, pose, K, crop, lights, material)
    n = crop.patch_side
    stack = np.empty((n, n, 8))
    stack[..., 0:3] = obs
    stack[..., 3:6] = rp.rgb
    stack[..., 6] = rp.depth / pose.z
    stack[..., 7] = rp.mask
    return stack


def composite(render: RenderPatch, background: np.ndarray) -> np.ndarray:
    m = render.mask.astype(bool)[..., None]
    return np.where(m, render.rgb, background)


def save_patch_pngs(prefix, patch: RenderPatch) -> None:
    """<prefix>_rgb.png, <prefix>_mask.png and 16-bit millimeter <prefix>_depth.png."""
    from PIL import Image

    from poseact.mesh import save_image

    prefix = str(prefix)
    save_image(prefix + "_rgb.png", patch.rgb)
    Image.fromarray((patch.mask > 0).astype(np.uint8) * 255).save(prefix + "_mask.png")
    save_depth_png(prefix + "_depth.png", patch.depth)


def save_depth_png(path, depth: np.ndarray) -> None:
    from PIL import Image

    mm = np.clip(np.round(np.asarray(depth) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(Path(path)) as im:
        return np.asarray(im, dtype=np.float64) / 1000.0
