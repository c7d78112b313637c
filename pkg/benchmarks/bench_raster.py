"""Compare the compiled and numpy rasterization backends.

Usage: python benchmarks/bench_raster.py [--repeats N]
"""
import argparse
import time

import numpy as np

from poseact.datagen import DEFAULT_K
from poseact.geometry import Pose
from poseact.mesh import textured_cube, uv_sphere
from poseact.raster import rasterize_triangles_c, rasterize_triangles_py


def inputs(mesh, K):
    pose = Pose((0.9, 0.2, 0.3, 0.1), (0.01, -0.02, 0.9))
    pc = pose.transform(mesh.vertices)
    z = pc[:, 2]
    px = np.stack([K.fx * pc[:, 0] / z + K.cx, K.fy * pc[:, 1] / z + K.cy], axis=1)
    return np.ascontiguousarray(px[mesh.faces]), np.ascontiguousarray(z[mesh.faces])


def best_of(fn, args, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    K = DEFAULT_K
    cases = {"cube (12 tris)": textured_cube(), "sphere (4512 tris)": uv_sphere(0.1, 48, 48)}
    print(f"{'mesh':<20}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  identical")
    for name, mesh in cases.items():
        tri_px, tri_z = inputs(mesh, K)
        call = (tri_px, tri_z, K.width, K.height)
        tp, ref = best_of(rasterize_triangles_py, call, args.repeats)
        if rasterize_triangles_c is None:
            print(f"{name:<20}{tp * 1e3:>12.2f}{'n/a':>12}{'':>10}  extension not built")
            continue
        tc, out = best_of(rasterize_triangles_c, call, args.repeats)
        same = all(np.array_equal(a, b) for a, b in zip(ref, out))
        print(f"{name:<20}{tp * 1e3:>12.2f}{tc * 1e3:>12.2f}{tp / tc:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
