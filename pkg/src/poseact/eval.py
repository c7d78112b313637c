"""Pose metrics, the corruption/robustness sweep, shift correction, runtime."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from poseact.geometry import (
    CameraIntrinsics, GeometryError, Pose, StepSizes, compute_crop, offset_pose,
)
from poseact.mesh import Mesh, model_points
from poseact.policy import DecisionContext, LoopConfig, Scene, run_episode

# corruption is counted in these units; the policy moves three of them per action
BASE_STEPS = StepSizes(1.0, 1.0 / 90.0, 1.0)


@dataclass
class ModelPoints:
    points: np.ndarray
    diameter: float

    @classmethod
    def from_mesh(cls, mesh: Mesh, max_points: int = 4096) -> "ModelPoints":
        return cls.from_points(model_points(mesh, max_points))

    @classmethod
    def from_points(cls, points) -> "ModelPoints":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < 2:
            raise ValueError("need at least two model points")
        diameter = float(pdist(pts).max())
        if not diameter > 0:
            raise ValueError("model points are all coincident")
        return cls(pts, diameter)


def _pts(pts) -> np.ndarray:
    return pts.points if isinstance(pts, ModelPoints) else np.asarray(pts, dtype=np.float64)


def add_metric(P: Pose, gt: Pose, pts) -> float:
    """Mean distance between corresponding transformed model points."""
    x = _pts(pts)
    return float(np.mean(np.linalg.norm(P.transform(x) - gt.transform(x), axis=1)))


def adi_metric(P: Pose, gt: Pose, pts) -> float:
    """Mean distance from each gt-transformed point to the nearest P-transformed point."""
    x = _pts(pts)
    d, _ = cKDTree(P.transform(x)).query(gt.transform(x))
    return float(np.mean(d))


def success_rate(errors, diameter: float, fraction: float = 0.10) -> float:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors given")
    return 100.0 * float(np.count_nonzero(e < fraction * diameter)) / e.size


def add_auc(errors, max_threshold: float = 0.1) -> float:
    """Area under accuracy(t) = P(error < t) for t in [0, max_threshold], in percent.

    The step curve integrates in closed form: each error contributes
    max(T - e, 0) / T.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors given")
    if np.any(e < 0):
        raise ValueError("errors must be non-negative")
    return 100.0 * float(np.mean(np.clip(max_threshold - e, 0.0, None))) / max_threshold


def estimate_shift(pred, gt) -> np.ndarray:
    """Constant translation (gt - pred, averaged) that best aligns a sequence."""
    if len(pred) != len(gt) or len(pred) == 0:
        raise ValueError("need equal, non-empty pose sequences")
    diffs = np.array([g.t - p.t for p, g in zip(pred, gt)])
    return diffs.mean(axis=0)


def apply_shift(poses, shift) -> list[Pose]:
    return [Pose(p.q, p.t + np.asarray(shift)) for p in poses]


# -- robustness ---------------------------------------------------------------------

@dataclass(frozen=True)
class RobustnessConfig:
    delta: int = 6
    m_values: tuple[int, ...] = tuple(range(46))
    step_factor: float = 3.0            # policy step in corruption units
    cap: int = 200
    keyframe_rates: tuple[tuple[int, int, float], ...] = ((25, 30, 0.25), (31, 45, 0.10))
    seed: int = 0
    success_fraction: float = 0.10

    def __post_init__(self):
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if self.cap < 1:
            raise ValueError("cap must be >= 1")
        if any(m < 0 for m in self.m_values):
            raise ValueError("m must be non-negative")

    @property
    def policy_steps(self) -> StepSizes:
        return BASE_STEPS.scaled(self.step_factor)

    def keyframe_rate(self, m: int) -> float:
        for lo, hi, rate in self.keyframe_rates:
            if lo <= m <= hi:
                return rate
        return 1.0


def corruption_offsets(m: int, cfg: RobustnessConfig, rng: np.random.Generator) -> np.ndarray:
    """delta * m units per parameter with independent uniform random signs."""
    x = rng.uniform(-1.0, 1.0, 6)
    return (cfg.delta * m * np.where(x < 0, -1, 1)).astype(np.int64)


def corrupt_pose(gt: Pose, m: int, cfg: RobustnessConfig, crop, K: CameraIntrinsics,
                 rng: np.random.Generator) -> Pose:
    """Move gt by delta*m corruption units on each parameter, unit by unit in random order.

    ``crop`` is unused: every unit is defined relative to the pose it leaves.
    """
    if m < 0:
        raise ValueError("m must be non-negative")
    if m == 0:
        return gt
    return offset_pose(gt, corruption_offsets(m, cfg, rng), BASE_STEPS, K, rng)


@dataclass
class SweepEntry:
    m: int
    runs: int
    success: float            # percent converged
    mean_steps: float         # over all runs, failures counted at their length
    mean_steps_converged: float | None
    fails: float              # fraction not converged

    def to_dict(self) -> dict:
        return {"m": self.m, "runs": self.runs, "success": self.success,
                "mean_steps": self.mean_steps,
                "mean_steps_converged": self.mean_steps_converged, "fails": self.fails}


def robustness_sweep(decide, scenes: list[Scene], cfg: RobustnessConfig = RobustnessConfig(),
                     loop: LoopConfig | None = None) -> list[SweepEntry]:
    """Corrupt, run capped episodes, aggregate per m; seeded by (seed, m, scene)."""
    loop = loop or LoopConfig(max_steps=cfg.cap)
    steps = cfg.policy_steps
    out = []
    for m in cfg.m_values:
        pick = np.random.default_rng([cfg.seed, m, 0xF0])
        rate = cfg.keyframe_rate(m)
        chosen = [j for j in range(len(scenes)) if rate >= 1.0 or pick.random() < rate]
        if not chosen:
            chosen = [int(pick.integers(0, len(scenes)))]
        lengths, conv = [], []
        for j in chosen:
            sc = scenes[j]
            if sc.gt is None:
                raise ValueError("robustness scenes need a gt pose")
            rng = np.random.default_rng([cfg.seed, m, j])
            diameter = ModelPoints.from_points(sc.points).diameter
            try:
                init = corrupt_pose(sc.gt, m, cfg, None, sc.K, rng)
                final, trace = run_episode(decide, sc, init, loop, steps, record_errors=False)
            except GeometryError:
                lengths.append(cfg.cap)
                conv.append(False)
                continue
            ok = (trace.terminal_reason == "stop_action"
                  and add_metric(final, sc.gt, sc.points) < cfg.success_fraction * diameter)
            lengths.append(len(trace))
            conv.append(ok)
        lengths_a = np.array(lengths, dtype=np.float64)
        conv_a = np.array(conv)
        out.append(SweepEntry(
            m, len(chosen), 100.0 * float(conv_a.mean()), float(lengths_a.mean()),
            float(lengths_a[conv_a].mean()) if conv_a.any() else None,
            float(1.0 - conv_a.mean())))
    return out


def sweep_spearman(entries: list[SweepEntry]) -> float:
    from scipy.stats import spearmanr

    ms = [e.m for e in entries]
    steps = [e.mean_steps for e in entries]
    return float(spearmanr(ms, steps).statistic)


# -- learned-policy benchmark ------------------------------------------------------

@dataclass
class PolicyBenchmark:
    episodes: int
    first_decision_accuracy: float    # fraction agreeing with the oracle label
    add_success: float                # fraction ending with ADD < fraction * diameter
    mean_steps: float
    confusion: np.ndarray             # (13, 13) counts, rows = oracle label

    def to_dict(self) -> dict:
        return {"episodes": self.episodes,
                "first_decision_accuracy": self.first_decision_accuracy,
                "add_success": self.add_success, "mean_steps": self.mean_steps,
                "confusion": self.confusion.tolist()}


def policy_benchmark(decide, ctx, n: int, seed: int, groups=("small", "large"),
                     max_steps: int = 30, fraction: float = 0.10) -> PolicyBenchmark:
    """Held-out check of a policy against the oracle.

    Episode i draws its group round-robin and two independent streams keyed by
    (seed, i): one generated training-style sample scores the first decision,
    one augmented full scene is refined from a seed offset of the same group.
    """
    from poseact.datagen import generate_sample, sample_seed_offset, synthetic_scene

    pts = ModelPoints.from_points(ctx.points)
    conf = np.zeros((13, 13), dtype=np.int64)
    ok, lengths = [], []
    for i in range(n):
        group = groups[i % len(groups)]
        s = generate_sample(ctx, group, np.random.default_rng([seed, i, 0]))
        scene = Scene(np.zeros((ctx.K.height, ctx.K.width, 3)), ctx.mesh, ctx.K, s.gt, ctx.points)
        dctx = DecisionContext(scene, s.hypothesis, compute_crop(s.hypothesis, ctx.K, ctx.points,
                                                                 ctx.patch_side), ctx.steps)
        dctx.__dict__["stack"] = s.stack  # the generated patch stands in for a render
        conf[s.label, int(decide(dctx))] += 1
        rng = np.random.default_rng([seed, i, 1])
        scene = synthetic_scene(ctx.mesh, ctx.K, rng, ctx.backgrounds, ctx.augment,
                                points=ctx.points)
        init = offset_pose(scene.gt, sample_seed_offset(group, rng), ctx.steps, ctx.K, rng)
        try:
            final, trace = run_episode(decide, scene, init, LoopConfig(max_steps=max_steps,
                                                                       patch_side=ctx.patch_side),
                                       ctx.steps, record_errors=False)
        except GeometryError:
            ok.append(False)
            lengths.append(max_steps)
            continue
        ok.append(add_metric(final, scene.gt, pts) < fraction * pts.diameter)
        lengths.append(len(trace))
    return PolicyBenchmark(n, float(np.trace(conf)) / n, float(np.mean(ok)),
                           float(np.mean(lengths)), conf)


# -- runtime ----------------------------------------------------------------------

@dataclass
class RuntimeProfile:
    preprocess_ms: float
    inference_ms: float
    total_ms: float
    actions_per_frame: float
    cycles: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class _TimedPolicy:
    def __init__(self, decide):
        self.decide = decide
        self.pre, self.inf, self.tot = [], [], []

    def __call__(self, ctx: DecisionContext) -> int:
        t0 = time.perf_counter()
        ctx.stack  # patch preparation: crop + render
        t1 = time.perf_counter()
        a = self.decide(ctx)
        t2 = time.perf_counter()
        self.pre.append(t1 - t0)
        self.inf.append(t2 - t1)
        self.tot.append(t2 - t0)
        return a


def runtime_profile(decide, scene: Scene, episodes: int = 32, init: Pose | None = None,
                    cfg: LoopConfig = LoopConfig(), steps: StepSizes = StepSizes(),
                    min_cycles: int = 32) -> RuntimeProfile:
    """Wall-clock split of decision cycles; runs extra episodes until min_cycles."""
    init = scene.gt if init is None else init
    if init is None:
        raise ValueError("need an init pose or a scene gt")
    timed = _TimedPolicy(decide)
    lengths = []
    while len(lengths) < episodes or len(timed.tot) < min_cycles:
        _, trace = run_episode(timed, scene, init, cfg, steps, record_errors=False)
        lengths.append(len(trace))
    ms = lambda v: 1000.0 * float(np.mean(v))  # noqa: E731
    return RuntimeProfile(ms(timed.pre), ms(timed.inf), ms(timed.tot),
                          float(np.mean(lengths)), len(timed.tot))


# -- reports ----------------------------------------------------------------------

def write_report(path, per_object: dict | None = None, sweep: list[SweepEntry] | None = None,
                 extra: dict | None = None) -> dict:
    report = {"per_object": per_object or {},
              "sweep": [e.to_dict() for e in (sweep or [])]}
    if extra:
        report.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return report


def sweep_csv(sweep: list[SweepEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "runs", "success", "mean_steps", "mean_steps_converged", "fails"])
    for e in sweep:
        w.writerow([e.m, e.runs, e.success, e.mean_steps,
                    "" if e.mean_steps_converged is None else e.mean_steps_converged, e.fails])
    return buf.getvalue()


def overlay_contour(image: np.ndarray, mesh: Mesh, pose: Pose, K: CameraIntrinsics,
                    color=(0.0, 1.0, 0.0)) -> np.ndarray:
    """The image with the silhouette outline of ``mesh`` at ``pose`` drawn on it."""
    from poseact.render import rasterize

    mask = rasterize(mesh, pose, K).mask.astype(bool)
    edge = mask & ~ndimage.binary_erosion(mask)
    out = np.array(image, dtype=np.float64, copy=True)
    out[edge] = color
    return out


@dataclass
class ObjectReport:
    add: list[float] = field(default_factory=list)
    adi: list[float] = field(default_factory=list)

    def summary(self, diameter: float, symmetric: bool = False,
                shift: np.ndarray | None = None) -> dict:
        errs = self.adi if symmetric else self.add
        out = {"add_auc": add_auc(errs), "success_at_0.1d": success_rate(errs, diameter),
               "metric": "adi" if symmetric else "add"}
        if shift is not None:
            out["shift_mm"] = [float(v) * 1000.0 for v in shift]
        return out
