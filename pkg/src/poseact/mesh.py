"""Triangle meshes: OBJ loading, a procedural textured cube, model points."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


@dataclass(eq=False)
class Mesh:
    """Triangle mesh in model coordinates (meters).

    Appearance comes from either ``vertex_colors`` (V, 3) or a ``texture``
    (H, W, 3) addressed by per-corner ``uv`` (F, 3, 2); uv origin is the
    bottom-left texel corner as in OBJ.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None
    uv: np.ndarray | None = None
    texture: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.vertices) == 0 or len(self.faces) == 0:
            raise MeshError("mesh is empty")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise MeshError("face index out of range")
        if self.vertex_colors is not None:
            self.vertex_colors = np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3)
            if len(self.vertex_colors) != len(self.vertices):
                raise MeshError("vertex_colors must match vertices")
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 3, 2)
            if len(self.uv) != len(self.faces) or self.texture is None:
                raise MeshError("uv needs one entry per face and a texture")
            self.texture = np.asarray(self.texture, dtype=np.float64)

    @property
    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def bounding_radius(self) -> float:
        return float(np.max(np.linalg.norm(self.vertices, axis=1)))


def unique_points(mesh: Mesh) -> np.ndarray:
    return np.unique(np.round(mesh.vertices, 12), axis=0)


def farthest_point_sample(points: np.ndarray, count: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    chosen = [0]
    dist = np.linalg.norm(pts - pts[0], axis=1)
    for _ in range(1, count):
        i = int(np.argmax(dist))
        chosen.append(i)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[i], axis=1))
    return pts[np.sort(chosen)]


def model_points(mesh: Mesh, max_points: int = 4096) -> np.ndarray:
    pts = unique_points(mesh)
    if len(pts) > max_points:
        pts = farthest_point_sample(pts, max_points)
    return pts


# -- OBJ --------------------------------------------------------------------------

def load_obj(path, texture=None) -> Mesh:
    """Read a Wavefront OBJ (v / vt / f; polygons are fan-triangulated).

    ``texture`` may be an array or an image path; without it, a ``map_Kd``
    entry of a referenced .mtl file is used when present.
    """
    path = Path(path)
    verts, tex, faces, face_vt = [], [], [], []
    mtllibs = []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            tex.append([float(x) for x in parts[1:3]])
        elif tag == "f":
            vi, ti = [], []
            for item in parts[1:]:
                fields = item.split("/")
                vi.append(_obj_index(fields[0], len(verts)))
                ti.append(_obj_index(fields[1], len(tex)) if len(fields) > 1 and fields[1] else -1)
            for k in range(1, len(vi) - 1):
                faces.append([vi[0], vi[k], vi[k + 1]])
                face_vt.append([ti[0], ti[k], ti[k + 1]])
        elif tag == "mtllib":
            mtllibs.append(" ".join(parts[1:]))
    face_vt = np.asarray(face_vt, dtype=np.int64)
    if texture is None:
        texture = _texture_from_mtl(path.parent, mtllibs)
    elif not isinstance(texture, np.ndarray):
        texture = load_image(texture)
    uv = None
    if texture is not None and len(tex) and len(face_vt) and np.all(face_vt >= 0):
        uv = np.asarray(tex, dtype=np.float64)[face_vt]
    else:
        texture = None
    return Mesh(np.asarray(verts), np.asarray(faces), uv=uv, texture=texture,
                vertex_colors=None if uv is not None else np.full((len(verts), 3), 0.7))


def _obj_index(token: str, count: int) -> int:
    i = int(token)
    return i - 1 if i > 0 else count + i


def _texture_from_mtl(folder: Path, mtllibs) -> np.ndarray | None:
    for name in mtllibs:
        mtl = folder / name
        if not mtl.exists():
            continue
        for line in mtl.read_text().splitlines():
            parts = line.split()
            if parts and parts[0] == "map_Kd":
                return load_image(folder / " ".join(parts[1:]))
    return None


def save_obj(mesh: Mesh, path, texture_name: str | None = None) -> None:
    """Write ``mesh`` as OBJ; textured meshes also get a .mtl and a PNG."""
    path = Path(path)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    if mesh.uv is not None:
        texture_name = texture_name or path.stem + ".png"
        save_image(path.parent / texture_name, mesh.texture)
        (path.parent / (path.stem + ".mtl")).write_text(
            f"newmtl material0\nmap_Kd {texture_name}\n")
        lines.insert(0, f"mtllib {path.stem}.mtl")
        lines.extend(f"vt {u:.9g} {v:.9g}" for u, v in mesh.uv.reshape(-1, 2))
        for i, f in enumerate(mesh.faces):
            lines.append("f " + " ".join(f"{f[k] + 1}/{3 * i + k + 1}" for k in range(3)))
    else:
        lines.extend("f " + " ".join(str(i + 1) for i in f) for f in mesh.faces)
    path.write_text("\n".join(lines) + "\n")


# -- images -----------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(path, rgb: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# -- procedural meshes -------------------------------------------------------------

_FACE_COLORS = np.array([
    [0.85, 0.20, 0.15], [0.15, 0.55, 0.85], [0.20, 0.75, 0.25],
    [0.90, 0.80, 0.15], [0.70, 0.25, 0.75], [0.95, 0.55, 0.15],
])


def cube_texture(size: int = 64) -> np.ndarray:
    """3x2 atlas, one distinct colored, asymmetrically marked tile per face."""
    tile = size
    tex = np.zeros((2 * tile, 3 * tile, 3))
    yy, xx = np.mgrid[0:tile, 0:tile] / tile
    for f in range(6):
        r, c = divmod(f, 3)
        base = _FACE_COLORS[f]
        checker = ((np.floor(xx * 4) + np.floor(yy * 4)) % 2)[..., None]
        img = base * (0.75 + 0.25 * checker)
        # off-center marker breaks the in-plane symmetry of each face
        marker = ((xx - 0.25) ** 2 + (yy - 0.3) ** 2) < 0.12 ** 2
        img[marker] = 1.0 - base
        bar = (xx > 0.6) & (xx < 0.9) & (yy > 0.75) & (yy < 0.85)
        img[bar] = 0.05
        tex[r * tile:(r + 1) * tile, c * tile:(c + 1) * tile] = img
    return tex


def textured_cube(side: float = 0.2, subdivisions: int = 2, texture_size: int = 64) -> Mesh:
    """Axis-aligned cube centered at the origin with a per-face texture tile."""
    h = 0.5 * side
    n = subdivisions
    g = np.linspace(-1.0, 1.0, n + 1)
    # (normal axis, sign) per face; (a, b) span the face in right-handed order
    specs = [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]
    verts, faces, uvs = [], [], []
    for f, (axis, sign) in enumerate(specs):
        a, b = [(axis + 1) % 3, (axis + 2) % 3]
        if sign < 0:
            a, b = b, a
        r, c = divmod(f, 3)
        base = len(verts)
        for j in range(n + 1):
            for i in range(n + 1):
                p = np.zeros(3)
                p[axis] = sign * h
                p[a] = g[i] * h
                p[b] = g[j] * h
                verts.append(p)
        uv_grid = {}
        for j in range(n + 1):
            for i in range(n + 1):
                uv_grid[i, j] = ((c + i / n) / 3.0, 1.0 - (r + 1 - j / n) / 2.0)
        for j in range(n):
            for i in range(n):
                quad = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)]
                idx = [base + jj * (n + 1) + ii for ii, jj in quad]
                for tri in ((0, 1, 2), (0, 2, 3)):
                    faces.append([idx[k] for k in tri])
                    uvs.append([uv_grid[quad[k]] for k in tri])
    return Mesh(np.asarray(verts), np.asarray(faces), uv=np.asarray(uvs),
                texture=cube_texture(texture_size))


def uv_sphere(radius: float = 0.1, rings: int = 8, segments: int = 12, color=(0.6, 0.6, 0.6)) -> Mesh:
    verts = []
    for i in range(rings + 1):
        th = np.pi * i / rings
        for j in range(segments):
            ph = 2 * np.pi * j / segments
            verts.append([radius * np.sin(th) * np.cos(ph), radius * np.cos(th),
                          radius * np.sin(th) * np.sin(ph)])
    faces = []
    for i in range(rings):
        for j in range(segments):
            a = i * segments + j
            b = i * segments + (j + 1) % segments
            c = (i + 1) * segments + j
            d = (i + 1) * segments + (j + 1) % segments
            if i > 0:
                faces.append([a, b, c])
            if i < rings - 1:
                faces.append([b, d, c])
    colors = np.tile(np.asarray(color, dtype=np.float64), (len(verts), 1))
    return Mesh(np.asarray(verts), np.asarray(faces), vertex_colors=colors)
