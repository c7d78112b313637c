"""Triangle rasterization kernel with backend selection.

The compiled extension ``poseact._raster`` is used when it was built;
otherwise (or with ``POSEACT_PURE_PYTHON=1``) the numpy implementation
below is used. Both produce identical buffers.
"""
from __future__ import annotations

import os

import numpy as np


def rasterize_triangles_py(tri_px, tri_z, width: int, height: int, near: float = 1e-6):
    """Reference implementation, vectorized over each triangle's bounding box."""
    tri_px = np.ascontiguousarray(tri_px, dtype=np.float64)
    tri_z = np.ascontiguousarray(tri_z, dtype=np.float64)
    depth = np.full((height, width), np.inf)
    index = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3))
    for f in range(len(tri_px)):
        za, zb, zc = tri_z[f]
        if za <= near or zb <= near or zc <= near:
            continue
        (ax, ay), (bx, by), (cx, cy) = tri_px[f]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = int(max(np.floor(min(ax, bx, cx) - 0.5), 0.0))
        x1 = int(min(np.ceil(max(ax, bx, cx) - 0.5), width - 1.0))
        y0 = int(max(np.floor(min(ay, by, cy) - 0.5), 0.0))
        y1 = int(min(np.ceil(max(ay, by, cy) - 0.5), height - 1.0))
        if x1 < x0 or y1 < y0:
            continue
        px = np.arange(x0, x1 + 1) + 0.5
        py = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
        w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
        w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        if area > 0:
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        else:
            inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)
        if not inside.any():
            continue
        b0, b1, b2 = w0 / area, w1 / area, w2 / area
        with np.errstate(divide="ignore", invalid="ignore"):
            z = 1.0 / (b0 / za + b1 / zb + b2 / zc)
        win_d = depth[y0:y1 + 1, x0:x1 + 1]
        win_i = index[y0:y1 + 1, x0:x1 + 1]
        win = inside & ((z < win_d) | ((z == win_d) & (f < win_i)))
        if not win.any():
            continue
        win_d[win] = z[win]
        win_i[win] = f
        wb = bary[y0:y1 + 1, x0:x1 + 1]
        wb[win, 0] = (b0 / za * z)[win]
        wb[win, 1] = (b1 / zb * z)[win]
        wb[win, 2] = (b2 / zc * z)[win]
    return depth, index, bary


try:
    from poseact._raster import rasterize_triangles as rasterize_triangles_c
except ImportError:  # extension not built
    rasterize_triangles_c = None

if rasterize_triangles_c is not None and os.environ.get("POSEACT_PURE_PYTHON", "") in ("", "0"):
    rasterize_triangles = rasterize_triangles_c
    BACKEND = "cython"
else:
    rasterize_triangles = rasterize_triangles_py
    BACKEND = "python"
