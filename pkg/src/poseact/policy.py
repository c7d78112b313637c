"""The action decision loop: oracle policy, episodes, tracking."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from poseact.geometry import (
    N_ACTIONS, STOP, ACTION_NAMES, CameraIntrinsics, CropState, DepthUnderflowError, Pose,
    StepSizes, apply_action, compute_crop, pose_error, pose_key,
)
from poseact.mesh import Mesh, model_points
from poseact.render import LightConfig, render_patch_stack

log = logging.getLogger(__name__)

TIE_DECIMALS = 9


class MissingGroundTruthError(ValueError):
    pass


@dataclass(eq=False)
class Scene:
    """One observed frame of one object."""

    image: np.ndarray
    mesh: Mesh
    K: CameraIntrinsics
    gt: Pose | None = None
    points: np.ndarray | None = None

    def __post_init__(self):
        if self.points is None:
            self.points = model_points(self.mesh)


@dataclass(frozen=True)
class LoopConfig:
    max_steps: int = 30
    oscillation_check: bool = True
    quantization: float = 0.25
    patch_side: int = 128

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


class DecisionContext:
    """What a policy may look at for one decision; the patch stack is rendered lazily."""

    def __init__(self, scene: Scene, pose: Pose, crop: CropState, steps: StepSizes,
                 lights: LightConfig | None = None):
        self.scene = scene
        self.pose = pose
        self.crop = crop
        self.steps = steps
        self.lights = lights

    @property
    def K(self) -> CameraIntrinsics:
        return self.scene.K

    @property
    def gt(self) -> Pose | None:
        return self.scene.gt

    @cached_property
    def stack(self) -> np.ndarray:
        s = self.scene
        return render_patch_stack(s.image, s.mesh, self.pose, s.K, self.crop, self.lights)


class Policy(Protocol):
    def __call__(self, ctx: DecisionContext) -> int: ...


# -- oracle --------------------------------------------------------------------

def candidate_errors(current: Pose, gt: Pose, crop: CropState, steps: StepSizes,
                     K: CameraIntrinsics) -> np.ndarray:
    """pose_error after each of the 13 actions (inf where an action is impossible)."""
    errs = np.empty(N_ACTIONS)
    for a in range(N_ACTIONS):
        try:
            cand = apply_action(current, crop, a, steps, K)
        except DepthUnderflowError:
            errs[a] = np.inf
            continue
        errs[a] = pose_error(cand, gt, steps, crop, K)
    return errs


def oracle_decide(current: Pose, gt: Pose, crop: CropState, steps: StepSizes,
                  K: CameraIntrinsics) -> int:
    """Greedy best action; ties go to the lowest index.

    Errors are rounded first so that exact ties (say a tx and a tz step that
    both remove one unit) are not decided by floating point noise.
    """
    return int(np.argmin(np.round(candidate_errors(current, gt, crop, steps, K), TIE_DECIMALS)))


class OraclePolicy:
    """Decides with the ground-truth pose of the scene."""

    needs_stack = False

    def __call__(self, ctx: DecisionContext) -> int:
        return int(np.argmax(self.scores(ctx)))

    def scores(self, ctx: DecisionContext) -> np.ndarray:
        if ctx.gt is None:
            raise MissingGroundTruthError("the oracle policy needs a ground-truth pose")
        errs = candidate_errors(ctx.pose, ctx.gt, ctx.crop, ctx.steps, ctx.K)
        return -np.round(errs, TIE_DECIMALS)


class FunctionPolicy:
    """Wraps ``fn(ctx) -> action index``."""

    def __init__(self, fn: Callable[[DecisionContext], int], needs_stack: bool = True):
        self.fn = fn
        self.needs_stack = needs_stack

    def __call__(self, ctx: DecisionContext) -> int:
        return int(self.fn(ctx))


class AlternatingPolicy:
    """Cycles through a fixed action sequence regardless of input."""

    needs_stack = False

    def __init__(self, actions: Sequence[int] = (0, 1)):
        self.actions = tuple(actions)
        self.i = 0

    def __call__(self, ctx: DecisionContext) -> int:
        a = self.actions[self.i % len(self.actions)]
        self.i += 1
        return a


# -- episodes ---------------------------------------------------------------------

@dataclass
class TraceStep:
    pose: Pose
    action: int
    error: float | None = None


@dataclass
class DecisionTrace:
    steps: list[TraceStep] = field(default_factory=list)
    terminal_reason: str = ""

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]

    @property
    def errors(self) -> list[float | None]:
        return [s.error for s in self.steps]

    def to_jsonl(self, frame: int = 0) -> str:
        lines = []
        for i, s in enumerate(self.steps):
            rec = {"frame": frame, "step": i, "action": ACTION_NAMES[s.action],
                   "pose": s.pose.to_dict()}
            if s.error is not None:
                rec["error"] = s.error
            lines.append(json.dumps(rec))
        return "\n".join(lines) + ("\n" if lines else "")


def run_episode(decide: Policy, scene: Scene, init: Pose, cfg: LoopConfig = LoopConfig(),
                steps: StepSizes = StepSizes(), lights: LightConfig | None = None,
                record_errors: bool = True) -> tuple[Pose, DecisionTrace]:
    """Crop, render, decide and move until stop, a revisited pose, or max_steps."""
    pose = init
    trace = DecisionTrace()
    seen = {pose_key(pose, steps, scene.K, cfg.quantization)}
    reason = "max_steps"
    for _ in range(cfg.max_steps):
        crop = compute_crop(pose, scene.K, scene.points, cfg.patch_side)
        ctx = DecisionContext(scene, pose, crop, steps, lights)
        a = int(decide(ctx))
        err = None
        if record_errors and scene.gt is not None:
            err = pose_error(pose, scene.gt, steps, crop, scene.K)
        trace.steps.append(TraceStep(pose, a, err))
        if a == STOP:
            reason = "stop_action"
            break
        pose = apply_action(pose, crop, a, steps, scene.K)
        if cfg.oscillation_check:
            key = pose_key(pose, steps, scene.K, cfg.quantization)
            if key in seen:
                reason = "oscillation"
                break
            seen.add(key)
    trace.terminal_reason = reason
    return pose, trace


@dataclass
class Frame:
    image: np.ndarray
    gt: Pose | None = None


@dataclass
class FrameResult:
    pose: Pose
    trace: DecisionTrace
    reset: bool

    @property
    def n_decisions(self) -> int:
        return len(self.trace)


def track_sequence(decide: Policy, frames: Sequence[Frame], mesh: Mesh, K: CameraIntrinsics,
                   init: Pose, reset_every: int | None = None, cfg: LoopConfig = LoopConfig(),
                   steps: StepSizes = StepSizes(), lights: LightConfig | None = None
                   ) -> list[FrameResult]:
    """Warm-started per-frame episodes; every ``reset_every``-th frame restarts from its gt."""
    if not frames:
        raise ValueError("no frames")
    points = model_points(mesh)
    results = []
    pose = init
    for i, fr in enumerate(frames):
        reset = False
        if reset_every and i % reset_every == 0 and i > 0:
            if fr.gt is None:
                raise MissingGroundTruthError(f"frame {i} is a reset frame but has no gt pose")
            pose = fr.gt
            reset = True
        elif i == 0:
            reset = reset_every is not None
        if reset:
            log.info("frame %d: reset", i)
        scene = Scene(fr.image, mesh, K, fr.gt, points)
        pose, trace = run_episode(decide, scene, pose, cfg, steps, lights)
        results.append(FrameResult(pose, trace, reset))
    return results
