# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled z-buffer triangle rasterizer.

Must stay bit-compatible with ``poseact.raster.rasterize_triangles_py``:
same edge functions, same pixel-center sampling, same z test and tie rule.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, INFINITY

cnp.import_array()


def rasterize_triangles(double[:, :, ::1] tri_px, double[:, ::1] tri_z,
                        int width, int height, double near=1e-6):
    """Rasterize projected triangles.

    tri_px: (F, 3, 2) pixel coordinates, tri_z: (F, 3) camera depths.
    Returns depth (H, W; inf where empty), index (H, W; -1 where empty) and
    perspective-correct barycentrics (H, W, 3).
    """
    cdef Py_ssize_t F = tri_px.shape[0]
    depth_arr = np.full((height, width), np.inf)
    index_arr = np.full((height, width), -1, dtype=np.int32)
    bary_arr = np.zeros((height, width, 3))
    cdef double[:, ::1] depth = depth_arr
    cdef int[:, ::1] index = index_arr
    cdef double[:, :, ::1] bary = bary_arr
    cdef Py_ssize_t f, x, y
    cdef int x0, x1, y0, y1
    cdef double ax, ay, bx, by, cx, cy, za, zb, zc, area, px, py
    cdef double w0, w1, w2, b0, b1, b2, inv_z, z
    for f in range(F):
        za = tri_z[f, 0]
        zb = tri_z[f, 1]
        zc = tri_z[f, 2]
        if za <= near or zb <= near or zc <= near:
            continue
        ax = tri_px[f, 0, 0]
        ay = tri_px[f, 0, 1]
        bx = tri_px[f, 1, 0]
        by = tri_px[f, 1, 1]
        cx = tri_px[f, 2, 0]
        cy = tri_px[f, 2, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = <int>max(floor(min(ax, min(bx, cx)) - 0.5), 0.0)
        x1 = <int>min(ceil(max(ax, max(bx, cx)) - 0.5), width - 1.0)
        y0 = <int>max(floor(min(ay, min(by, cy)) - 0.5), 0.0)
        y1 = <int>min(ceil(max(ay, max(by, cy)) - 0.5), height - 1.0)
        for y in range(y0, y1 + 1):
            py = y + 0.5
            for x in range(x0, x1 + 1):
                px = x + 0.5
                w0 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                w1 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                if area > 0:
                    if w0 < 0 or w1 < 0 or w2 < 0:
                        continue
                else:
                    if w0 > 0 or w1 > 0 or w2 > 0:
                        continue
                b0 = w0 / area
                b1 = w1 / area
                b2 = w2 / area
                inv_z = b0 / za + b1 / zb + b2 / zc
                z = 1.0 / inv_z
                if z < depth[y, x] or (z == depth[y, x] and f < index[y, x]):
                    depth[y, x] = z
                    index[y, x] = <int>f
                    bary[y, x, 0] = b0 / za * z
                    bary[y, x, 1] = b1 / zb * z
                    bary[y, x, 2] = b2 / zc * z
    return depth_arr, index_arr, bary_arr
