"""Rigid poses, pinhole projection, crops and the discrete pose actions.

Conventions
-----------
* Camera frame: x right, y down, z forward. Pixel (i, j) samples at
  (j + 0.5, i + 0.5).
* Quaternions are (w, x, y, z), Hamilton product.
* Actions are integers 0..12 in the order of ``ACTION_NAMES``. Rotations are
  about camera-frame axes through the object origin, so they never move the
  projected center.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

ACTION_NAMES = (
    "+tx", "-tx", "+ty", "-ty", "+tz", "-tz",
    "+rx", "-rx", "+ry", "-ry", "+rz", "-rz",
    "stop",
)
N_ACTIONS = 13
STOP = 12
CROP_MARGIN = 1.2
_QUAT_TOL = 1e-9


class GeometryError(ValueError):
    pass


class BehindCameraError(GeometryError):
    pass


class DegenerateProjectionError(GeometryError):
    pass


class InvalidActionError(GeometryError):
    pass


class DepthUnderflowError(GeometryError):
    pass


# -- quaternion helpers ------------------------------------------------------

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    h = 0.5 * angle
    return np.concatenate([[math.cos(h)], math.sin(h) * axis])


def quat_from_rotvec(rv) -> np.ndarray:
    rv = np.asarray(rv, dtype=np.float64)
    angle = float(np.linalg.norm(rv))
    if angle < 1e-300:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return quat_from_axis_angle(rv / angle, angle)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Rotation vector (radians) of ``q``, angle in [0, pi]."""
    if q[0] < 0:
        q = -q
    v = q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-300:
        return np.zeros(3)
    angle = 2.0 * math.atan2(s, q[0])
    return v * (angle / s)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_geodesic(a: np.ndarray, b: np.ndarray) -> float:
    """Rotation angle (radians) between two unit quaternions."""
    # atan2 of the relative rotation stays accurate near zero, unlike acos
    r = quat_mul(quat_conj(np.asarray(a, dtype=np.float64)), np.asarray(b, dtype=np.float64))
    return 2.0 * math.atan2(float(np.linalg.norm(r[1:])), abs(float(r[0])))


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation: normalized draw from a 4D isotropic Gaussian."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


# -- domain types -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Object-to-camera transform: x_cam = R(q) x_model + t (meters)."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(q))
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)):
            raise GeometryError("pose contains non-finite values")
        if abs(n - 1.0) > _QUAT_TOL:
            q = q / n
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls, t=(0.0, 0.0, 1.0)) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.asarray(t, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def z(self) -> float:
        return float(self.t[2])

    def transform(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """self * other (apply other first)."""
        return Pose(quat_mul(self.q, other.q), self.R @ other.t + self.t)

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["q"], dtype=np.float64), np.asarray(d["t"], dtype=np.float64))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "Pose":
        return cls.from_dict(json.loads(s))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return (quat_geodesic(self.q, other.q) <= atol
                and float(np.max(np.abs(self.t - other.t))) <= atol)

    def __repr__(self) -> str:
        return f"Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    def for_crop(self, crop: "CropState") -> "CameraIntrinsics":
        """Intrinsics of the n x n patch that ``crop`` cuts out of this image.

        The principal point of a patch camera may lie outside the patch, so
        the usual validation is skipped.
        """
        n = crop.patch_side
        s = n / crop.diameter
        x0 = crop.center[0] - 0.5 * crop.diameter
        y0 = crop.center[1] - 0.5 * crop.diameter
        cam = object.__new__(CameraIntrinsics)
        for k, v in (("fx", self.fx * s), ("fy", self.fy * s), ("cx", (self.cx - x0) * s),
                     ("cy", (self.cy - y0) * s), ("width", n), ("height", n)):
            object.__setattr__(cam, k, v)
        return cam


@dataclass(frozen=True)
class CropState:
    """Square crop around the projected model.

    ``depth`` is the z of the pose the crop was measured at; it fixes the
    unit of the tz action (a diameter change of ``tz * diameter``).
    """

    center: tuple[float, float]
    diameter: float
    patch_side: int = 128
    depth: float = 1.0

    def __post_init__(self):
        if not self.diameter > 0:
            raise GeometryError("crop diameter must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def to_dict(self) -> dict:
        return {"center": list(self.center), "diameter": self.diameter,
                "patch_side": self.patch_side, "depth": self.depth}


@dataclass(frozen=True)
class StepSizes:
    """Action units: pixels for tx/ty, fraction of the crop diameter for tz,
    degrees for rotations."""

    tx_ty: float = 3.0
    tz: float = 1.0 / 30.0
    rot: float = 3.0

    def __post_init__(self):
        if not (self.tx_ty > 0 and self.tz > 0 and self.rot > 0):
            raise GeometryError("step sizes must be strictly positive")

    def scaled(self, factor: float) -> "StepSizes":
        return StepSizes(self.tx_ty * factor, self.tz * factor, self.rot * factor)


# -- action vectors -------------------------------------------------------------

def action_vector(index: int) -> np.ndarray:
    """One-hot 13-vector for ``index``."""
    v = np.zeros(N_ACTIONS, dtype=np.int8)
    v[_check_action(index)] = 1
    return v


def action_index(action) -> int:
    """Accepts an int or a one-hot 13-vector."""
    if isinstance(action, (int, np.integer)):
        return _check_action(int(action))
    v = np.asarray(action)
    if v.shape != (N_ACTIONS,) or not np.all((v == 0) | (v == 1)) or int(v.sum()) != 1:
        raise InvalidActionError(f"not a one-hot action vector: {action!r}")
    return int(np.argmax(v))


def _check_action(index: int) -> int:
    if not 0 <= index < N_ACTIONS:
        raise InvalidActionError(f"action index out of range: {index}")
    return index


def split_action(index: int) -> tuple[np.ndarray, int]:
    """Direction vector in {-1,0,1}^6 and stop flag for an action."""
    index = _check_action(index)
    d = np.zeros(6, dtype=np.int64)
    if index == STOP:
        return d, 1
    d[index // 2] = 1 if index % 2 == 0 else -1
    return d, 0


def opposite(index: int) -> int:
    if index == STOP:
        return STOP
    return index + 1 if index % 2 == 0 else index - 1


def axis_action(axis: int, sign: int) -> int:
    return 2 * axis + (0 if sign > 0 else 1)


# -- projection & crops ---------------------------------------------------------

def project_points(pose: Pose, K: CameraIntrinsics, points) -> np.ndarray:
    pc = pose.transform(np.atleast_2d(points))
    z = pc[:, 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    u = K.fx * pc[:, 0] / z + K.cx
    v = K.fy * pc[:, 1] / z + K.cy
    return np.stack([u, v], axis=1)


def project_center(pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    t = pose.t
    if t[2] <= 0:
        raise BehindCameraError("object origin behind the camera")
    return np.array([K.fx * t[0] / t[2] + K.cx, K.fy * t[1] / t[2] + K.cy])


def compute_crop(pose: Pose, K: CameraIntrinsics, model_points,
                 patch_side: int = 128, margin: float = CROP_MARGIN) -> CropState:
    uv = project_points(pose, K, model_points)
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    w, h = hi - lo
    if not (w > 0 and h > 0):
        raise DegenerateProjectionError("projected bounding box has zero area")
    center = 0.5 * (lo + hi)
    return CropState((center[0], center[1]), float(max(w, h) * margin), patch_side, pose.z)


# -- actions ----------------------------------------------------------------------

_AXES = np.eye(3)


def apply_action(pose: Pose, crop: CropState, action, steps: StepSizes,
                 K: CameraIntrinsics) -> Pose:
    index = action_index(action)
    if index == STOP:
        return pose
    if pose.z <= 0:
        raise BehindCameraError("pose behind the camera")
    axis, sign = divmod(index, 2)
    sign = 1.0 if sign == 0 else -1.0
    t = pose.t
    if axis == 0:
        return Pose(pose.q, (t[0] + sign * steps.tx_ty * t[2] / K.fx, t[1], t[2]))
    if axis == 1:
        return Pose(pose.q, (t[0], t[1] + sign * steps.tx_ty * t[2] / K.fy, t[2]))
    if axis == 2:
        # projected diameter ~ 1/z: +tz shrinks it by tz * crop.diameter
        inv = 1.0 / t[2] - sign * steps.tz / crop.depth
        if inv <= 0:
            raise DepthUnderflowError("tz action would push the object to infinite depth")
        return Pose(pose.q, t * (1.0 / (inv * t[2])))
    dq = quat_from_axis_angle(_AXES[axis - 3], sign * math.radians(steps.rot))
    return Pose(quat_mul(dq, pose.q), t)


def retreat(pose: Pose, action: int, steps: StepSizes, K: CameraIntrinsics) -> Pose:
    """Pose Q such that undoing ``action`` from Q (with Q's own crop) gives ``pose``.

    ``retreat(P, a)`` puts the hypothesis one ``a`` step away from P, in the
    exact sense that ``apply_action(Q, crop(Q), opposite(a)) == P``.
    """
    index = _check_action(action)
    if index == STOP:
        return pose
    axis, sign = divmod(index, 2)
    if axis != 2:
        # tx/ty/rotation steps do not depend on the crop
        crop = CropState((0.0, 0.0), 1.0, depth=pose.z)
        return apply_action(pose, crop, index, steps, K)
    factor = (1.0 + steps.tz) if sign == 0 else (1.0 - steps.tz)
    return Pose(pose.q, pose.t * factor)


def offset_pose(pose: Pose, offsets, steps: StepSizes, K: CameraIntrinsics,
                rng: np.random.Generator | None = None) -> Pose:
    """Move ``pose`` by signed per-axis action counts, one unit at a time.

    ``offsets[a] = k`` places the result k actions of sign(k) away along axis
    a, so the greedy oracle needs exactly |k| opposite actions to return.
    Units are applied in random order when ``rng`` is given.
    """
    offsets = np.asarray(offsets, dtype=np.int64).reshape(6)
    units = []
    for axis, k in enumerate(offsets):
        units.extend([axis_action(axis, int(k))] * abs(int(k)))
    if rng is not None and units:
        units = [units[i] for i in rng.permutation(len(units))]
    for a in units:
        pose = retreat(pose, a, steps, K)
    return pose


# -- errors -------------------------------------------------------------------------

def error_components(P: Pose, P_gt: Pose, steps: StepSizes, crop: CropState,
                     K: CameraIntrinsics) -> np.ndarray:
    """Signed offsets of P from P_gt in action units.

    (center u, center v, relative diameter, rotation vector x, y, z); the
    rotation part is the camera-frame rotation vector of R_P R_gt^T.
    """
    du = K.fx * (P.t[0] / P.t[2] - P_gt.t[0] / P_gt.t[2]) / steps.tx_ty
    dv = K.fy * (P.t[1] / P.t[2] - P_gt.t[1] / P_gt.t[2]) / steps.tx_ty
    dw = crop.depth * (1.0 / P_gt.t[2] - 1.0 / P.t[2]) / steps.tz
    if np.array_equal(P.q, P_gt.q):
        rv = np.zeros(3)  # the product below leaves ~1e-16 residue
    else:
        rv = quat_to_rotvec(quat_mul(P.q, quat_conj(P_gt.q)))
    return np.concatenate([[du, dv, dw], np.degrees(rv) / steps.rot])


def pose_error(P: Pose, P_gt: Pose, steps: StepSizes, crop: CropState,
               K: CameraIntrinsics) -> float:
    """Action-unit distance: L1 over the translation components plus the
    geodesic rotation angle in rotation steps."""
    c = error_components(P, P_gt, steps, crop, K)
    return float(abs(c[0]) + abs(c[1]) + abs(c[2]) + math.sqrt(c[3] ** 2 + c[4] ** 2 + c[5] ** 2))


def pose_key(pose: Pose, steps: StepSizes, K: CameraIntrinsics,
             resolution: float = 0.25) -> tuple:
    """Quantized absolute pose, roughly ``resolution`` action units per cell."""
    u = K.fx * pose.t[0] / pose.t[2] / steps.tx_ty
    v = K.fy * pose.t[1] / pose.t[2] / steps.tx_ty
    w = math.log(pose.t[2]) / steps.tz
    r = pose.R.ravel() / math.radians(steps.rot)
    vals = np.concatenate([[u, v, w], r]) / resolution
    return tuple(int(x) for x in np.round(vals))


__all__ = [
    "ACTION_NAMES", "N_ACTIONS", "STOP", "Pose", "CameraIntrinsics", "CropState",
    "StepSizes", "GeometryError", "BehindCameraError", "DegenerateProjectionError",
    "InvalidActionError", "DepthUnderflowError", "project_points", "project_center",
    "compute_crop", "apply_action", "retreat", "offset_pose", "pose_error",
    "error_components", "pose_key", "action_vector", "action_index", "split_action",
    "opposite", "axis_action", "random_quaternion",
]
