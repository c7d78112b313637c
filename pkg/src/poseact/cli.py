"""``pose-act`` command line entry point."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from poseact import config as cfgmod

log = logging.getLogger("poseact")

SUBCOMMANDS = ("gen-data", "train", "track", "detect", "eval", "robustness", "render-debug")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- shared helpers ------------------------------------------------------------------

def _load_mesh(spec: str | None):
    from poseact.mesh import load_obj, textured_cube

    if not spec or spec == "builtin:cube":
        return textured_cube()
    return load_obj(spec)


def _camera(cfg: dict):
    from poseact.geometry import CameraIntrinsics

    return CameraIntrinsics(cfg["camera.fx"], cfg["camera.fy"], cfg["camera.cx"],
                            cfg["camera.cy"], cfg["camera.width"], cfg["camera.height"])


def _steps(cfg: dict):
    from poseact.geometry import StepSizes

    return StepSizes(cfg["steps.tx_ty"], cfg["steps.tz"], cfg["steps.rot"])


def _loop(cfg: dict, max_steps: int | None = None):
    from poseact.policy import LoopConfig

    return LoopConfig(max_steps or cfg["loop.max_steps"], cfg["loop.oscillation_check"],
                      cfg["loop.quantization"], cfg["loop.patch_side"])


def _json_arg(text: str) -> dict:
    """Inline JSON or a path to a JSON file."""
    t = text.strip()
    if t.startswith("{"):
        return json.loads(t)
    return json.loads(Path(t).read_text(encoding="utf-8"))


def make_policy(spec: str):
    from poseact.network import NetworkPolicy, load_checkpoint
    from poseact.policy import OraclePolicy

    if spec == "oracle":
        return OraclePolicy()
    if spec.startswith("network:"):
        params, _ = load_checkpoint(spec.split(":", 1)[1])
        return NetworkPolicy(params)
    raise UsageError(f"--policy must be 'oracle' or 'network:<checkpoint>', got {spec!r}")


def _backgrounds(cfg: dict, K):
    from poseact.datagen import BackgroundPool

    if cfg["paths.backgrounds"]:
        return BackgroundPool.from_directory(cfg["paths.backgrounds"], K.width, K.height)
    return BackgroundPool.procedural(cfg["run.seed"], 16, K.width, K.height)


def _sequence(args, cfg: dict, mesh, K):
    """Frames for ``--scene synth`` or a sequence directory."""
    from poseact.scenes import load_sequence, synthetic_sequence

    if args.scene == "synth":
        rng = np.random.default_rng([cfg["run.seed"], 0x5E0])
        shift = tuple(float(v) for v in args.shift_px.split(","))
        if len(shift) != 2:
            raise UsageError("--shift-px takes 'dx,dy'")
        return synthetic_sequence(mesh, K, args.frames, rng, shift_px=shift,
                                  backgrounds=_backgrounds(cfg, K)), K
    return load_sequence(args.scene)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- subcommands -----------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    from poseact.datagen import GROUP_NAMES, AugmentConfig, SampleContext, generate_dataset

    K = _camera(cfg)
    if args.counts:
        counts = {}
        for part in args.counts.split(","):
            name, _, value = part.partition("=")
            counts[name.strip()] = int(value)
    else:
        counts = {g: cfg["data.per_group"] for g in GROUP_NAMES}
    augment = AugmentConfig() if cfg["data.augment"] else None
    meshes = args.mesh or ["builtin:cube"]
    out = Path(args.out)
    entries = []
    for i, spec in enumerate(meshes):
        target = out if len(meshes) == 1 else out / f"obj{i:02d}"
        bg = cfg["paths.backgrounds"] or None
        ctx = SampleContext.default(_load_mesh(spec), cfg["run.seed"], K, bg, augment)
        generate_dataset(ctx, counts, target, cfg["run.workers"], cfg["run.seed"],
                         extra_meta={"mesh": spec})
        entries.append({"mesh": spec, "dir": str(target.relative_to(out)) if target != out else ".",
                        "manifest_sha256": _sha256(target / "manifest.json")})
    if len(meshes) > 1:
        (out / "manifest.json").write_text(json.dumps(
            {"version": 1, "base_seed": cfg["run.seed"], "objects": entries},
            sort_keys=True, indent=1) + "\n")
    _emit({"manifest": str(out / "manifest.json"), "sha256": _sha256(out / "manifest.json"),
           "objects": entries})
    return 0


def cmd_train(args, cfg):
    from poseact.datagen import AugmentConfig, SampleContext
    from poseact.network import TrainConfig, load_checkpoint
    from poseact.train import StreamConfig, train_policy

    K = _camera(cfg)
    augment = AugmentConfig() if cfg["data.augment"] else None
    ctx = SampleContext.default(_load_mesh(cfg["paths.mesh"]), cfg["run.seed"], K,
                                cfg["paths.backgrounds"] or None, augment)
    tcfg = TrainConfig(cfg["train.batch_size"], cfg["train.learning_rate"], cfg["train.decay"],
                       cfg["train.decay_every"], cfg["train.steps"])
    scfg = StreamConfig(cfg["train.buffer_size"], cfg["train.refresh"])
    init = load_checkpoint(args.init)[0] if args.init else None
    _, hist = train_policy(ctx, cfg["train.steps"], cfg["run.seed"], tcfg, scfg,
                           checkpoint=args.out, params=init)
    tail = hist[-100:] if hist else [float("nan")]
    _emit({"checkpoint": args.out, "steps": len(hist), "final_loss_avg100": float(np.mean(tail))})
    return 0


def cmd_track(args, cfg):
    from poseact.policy import track_sequence

    mesh = _load_mesh(cfg["paths.mesh"])
    K = _camera(cfg)
    frames, K = _sequence(args, cfg, mesh, K)
    init = frames[0].gt
    if args.init:
        from poseact.geometry import Pose
        init = Pose.from_dict(_json_arg(args.init))
    if init is None:
        raise ValueError("no init pose: pass --init or provide a gt pose for frame 0")
    results = track_sequence(make_policy(args.policy), frames, mesh, K, init, args.reset_every,
                             _loop(cfg), _steps(cfg))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for i, r in enumerate(results):
                fh.write(r.trace.to_jsonl(i))
    decisions = [r.n_decisions for r in results]
    _emit({"frames": len(results), "resets": [i for i, r in enumerate(results) if r.reset],
           "decisions_per_frame": decisions,
           "mean_decisions": float(np.mean(decisions)),
           "final_pose": results[-1].pose.to_dict()})
    return 0


def cmd_detect(args, cfg):
    from poseact.datagen import synthetic_scene
    from poseact.detection import (
        detect, init_rotation, rotation_grid, save_detection_debug,
    )
    from poseact.geometry import CameraIntrinsics, Pose, project_center
    from poseact.mesh import load_image
    from poseact.policy import LoopConfig

    mesh = _load_mesh(cfg["paths.mesh"])
    K = _camera(cfg)
    gt = None
    if args.scene == "synth":
        rng = np.random.default_rng([cfg["run.seed"], 0xDE7])
        scene = synthetic_scene(mesh, K, rng, _backgrounds(cfg, K))
        image, gt = scene.image, scene.gt
    else:
        image = load_image(args.scene)
        if args.intrinsics:
            K = CameraIntrinsics.from_dict(_json_arg(args.intrinsics))
    decide = make_policy(args.policy)
    probe = Pose((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, cfg["detection.probe_depth"]))
    smoothing = cfg["detection.smoothing"] or None
    crop, field, dmap = detect(image, mesh, K, decide, probe, cfg["detection.grid_spacing"],
                               smoothing, gt=gt)
    if args.debug_dir:
        Path(args.debug_dir).mkdir(parents=True, exist_ok=True)
        save_detection_debug(Path(args.debug_dir) / "detect", field, dmap)
    out = {"center": list(crop.center), "diameter": crop.diameter,
           "valid_seeds": int(field.valid.sum()), "seeds": int(len(field.valid))}
    if not args.no_rotation:
        res = init_rotation(image, mesh, K, decide, crop, rotation_grid(cfg["detection.rotations"]),
                            LoopConfig(max_steps=cfg["detection.cap"]), gt=gt,
                            depth=gt.z if gt is not None else None, steps=_steps(cfg),
                            detail=True)
        out.update(pose=res.pose.to_dict(), rotation_index=res.index,
                   steps=res.step_counts[res.index])
    if gt is not None:
        c = project_center(gt, K)
        out["gt_center"] = c.tolist()
        out["center_error_px"] = float(np.hypot(*(np.asarray(crop.center) - c)))
    _emit(out)
    return 0


def cmd_eval(args, cfg):
    from poseact.eval import (
        ModelPoints, ObjectReport, add_metric, adi_metric, apply_shift, estimate_shift,
        overlay_contour, write_report,
    )
    from poseact.mesh import save_image
    from poseact.policy import track_sequence

    mesh = _load_mesh(cfg["paths.mesh"])
    K = _camera(cfg)
    frames, K = _sequence(args, cfg, mesh, K)
    if any(f.gt is None for f in frames):
        raise ValueError("evaluation needs a gt pose for every frame")
    mp = ModelPoints.from_mesh(mesh)
    results = track_sequence(make_policy(args.policy), frames, mesh, K, frames[0].gt,
                             args.reset_every, _loop(cfg), _steps(cfg))
    preds = [r.pose for r in results]
    gts = [f.gt for f in frames]
    rep = ObjectReport([add_metric(p, g, mp) for p, g in zip(preds, gts)],
                       [adi_metric(p, g, mp) for p, g in zip(preds, gts)])
    symmetric = bool(args.symmetric or cfg["eval.symmetric"])
    shift = estimate_shift(preds, gts)
    corrected = apply_shift(preds, shift)
    corr = ObjectReport([add_metric(p, g, mp) for p, g in zip(corrected, gts)],
                        [adi_metric(p, g, mp) for p, g in zip(corrected, gts)])
    name = Path(cfg["paths.mesh"]).stem if cfg["paths.mesh"] else "cube"
    per_object = {name: dict(rep.summary(mp.diameter, symmetric, shift),
                             corrected=corr.summary(mp.diameter, symmetric),
                             diameter=mp.diameter, frames=len(frames),
                             mean_decisions=float(np.mean([r.n_decisions for r in results])))}
    report = write_report(args.out, per_object) if args.out else {"per_object": per_object}
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("frame,add,adi,decisions\n")
            for i, (a, d, r) in enumerate(zip(rep.add, rep.adi, results)):
                fh.write(f"{i},{a!r},{d!r},{r.n_decisions}\n")
    if args.overlay_dir:
        od = Path(args.overlay_dir)
        od.mkdir(parents=True, exist_ok=True)
        for i, (f, p) in enumerate(zip(frames, preds)):
            save_image(od / f"{i:06d}.png", overlay_contour(f.image, mesh, p, K))
    _emit(report)
    return 0


def _sweep_one(job):
    from poseact.eval import robustness_sweep

    decide, scenes, rcfg = job
    return robustness_sweep(decide, scenes, rcfg)


def robustness_scenes(mesh, K, seed: int, count: int):
    """Sweep scenes: gt depth in [1.0, 1.5] m on procedural backgrounds."""
    from poseact.datagen import BackgroundPool, sample_gt_pose, synthetic_scene
    from poseact.mesh import model_points

    pts = model_points(mesh)
    bgs = BackgroundPool.procedural(seed, 4, K.width, K.height)
    scenes = []
    for j in range(count):
        rng = np.random.default_rng([seed, 0x20B, j])
        gt = sample_gt_pose(pts, K, rng, (1.0, 1.5))
        scenes.append(synthetic_scene(mesh, K, rng, bgs, gt=gt, points=pts))
    return scenes


def cmd_robustness(args, cfg):
    import dataclasses

    from poseact.eval import RobustnessConfig, sweep_csv, sweep_spearman, write_report

    mesh = _load_mesh(cfg["paths.mesh"])
    K = _camera(cfg)
    decide = make_policy(args.policy)
    scenes = robustness_scenes(mesh, K, cfg["run.seed"], cfg["robustness.scenes"])
    m_values = tuple(range(args.m_min, cfg["robustness.m_max"] + 1))
    if not m_values:
        raise UsageError("empty m range")
    rcfg = RobustnessConfig(delta=cfg["robustness.delta"], m_values=m_values,
                            cap=cfg["robustness.cap"], seed=cfg["run.seed"])
    jobs = [(decide, scenes, dataclasses.replace(rcfg, m_values=(m,))) for m in m_values]
    workers = cfg["run.workers"]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_sweep_one, jobs))
    else:
        parts = [_sweep_one(j) for j in jobs]
    sweep = [e for part in parts for e in part]
    extra = {"config": {"delta": rcfg.delta, "cap": rcfg.cap, "seed": rcfg.seed,
                        "scenes": len(scenes), "policy": args.policy}}
    if len(sweep) >= 3 and len({e.mean_steps for e in sweep}) > 1:
        extra["spearman_steps_vs_m"] = sweep_spearman(sweep)
    report = write_report(args.out, sweep=sweep, extra=extra) if args.out else \
        {"per_object": {}, "sweep": [e.to_dict() for e in sweep], **extra}
    if args.csv:
        Path(args.csv).write_text(sweep_csv(sweep), encoding="utf-8")
    _emit(report)
    return 0


def cmd_render_debug(args, cfg):
    from poseact.geometry import CameraIntrinsics, Pose, compute_crop
    from poseact.mesh import model_points, save_image
    from poseact.render import MaterialConfig, rasterize, render_patch_stack, save_patch_pngs

    mesh = _load_mesh(cfg["paths.mesh"])
    K = CameraIntrinsics.from_dict(_json_arg(args.intrinsics)) if args.intrinsics else _camera(cfg)
    pose = Pose.from_dict(_json_arg(args.pose)) if args.pose else Pose.identity()
    material = MaterialConfig("unlit") if args.unlit else None
    rp = rasterize(mesh, pose, K, material=material)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_patch_pngs(args.out, rp)
    out = {"rgb": args.out + "_rgb.png", "depth": args.out + "_depth.png",
           "mask": args.out + "_mask.png", "pixels": int(rp.mask.sum())}
    if args.patch:
        crop = compute_crop(pose, K, model_points(mesh), cfg["loop.patch_side"])
        stack = render_patch_stack(rp.rgb, mesh, pose, K, crop, material=material)
        save_image(args.out + "_patch_obs.png", stack[..., 0:3])
        save_image(args.out + "_patch_rgb.png", stack[..., 3:6])
        out["crop"] = crop.to_dict()
    _emit(out)
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pose-act", description="Pose estimation as a sequence of discrete actions.")
    p.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def common(sp, policy=False, workers=False, mesh=True):
        sp.add_argument("--config", help=f"config file (default: ${cfgmod.ENV_VAR})")
        sp.add_argument("--seed", type=int, help="global rng seed")
        if mesh:
            sp.add_argument("--mesh", help="OBJ mesh (default: builtin textured cube)")
        if policy:
            sp.add_argument("--policy", default="oracle", help="oracle | network:<checkpoint>")
        if workers:
            sp.add_argument("--workers", type=int, help="parallel worker processes")

    def sequence(sp):
        sp.add_argument("--scene", default="synth", help="'synth' or a sequence directory")
        sp.add_argument("--frames", type=int, default=45, help="frames for --scene synth")
        sp.add_argument("--shift-px", default="3,0", help="per-frame image motion 'dx,dy'")
        sp.add_argument("--reset-every", type=int, default=None, help="restart from gt every N frames")

    s = sub.add_parser("gen-data", help="generate a synthetic training dataset")
    common(s, workers=True, mesh=False)
    s.add_argument("--mesh", action="append", help="OBJ mesh; repeat for a mesh set")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--per-group", type=int, help="samples per seed group")
    s.add_argument("--counts", help="per-group counts, e.g. small=10,large=5")
    s.add_argument("--backgrounds", help="directory of background images")
    s.add_argument("--no-augment", action="store_true", help="disable augmentation")

    s = sub.add_parser("train", help="train the decision network on the sample stream")
    common(s)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--steps", type=int, help="training steps")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float, help="initial learning rate")
    s.add_argument("--buffer-size", type=int, help="replay buffer samples")
    s.add_argument("--refresh", type=int, help="new samples per step")
    s.add_argument("--backgrounds", help="directory of background images")
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--init", help="checkpoint to continue from")

    s = sub.add_parser("track", help="track an object through a frame sequence")
    common(s, policy=True)
    sequence(s)
    s.add_argument("--init", help="initial pose JSON (default: gt of frame 0)")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--out", help="JSONL decision trace output")

    s = sub.add_parser("detect", help="localize the object via the divergence field")
    common(s, policy=True)
    s.add_argument("--scene", default="synth", help="'synth' or an image path")
    s.add_argument("--intrinsics", help="intrinsics JSON (inline or file)")
    s.add_argument("--grid-spacing", type=float)
    s.add_argument("--smoothing", type=float)
    s.add_argument("--rotations", type=int, help="rotation grid size")
    s.add_argument("--no-rotation", action="store_true", help="skip rotation search")
    s.add_argument("--debug-dir", help="write W / field heatmaps and seed JSON here")

    s = sub.add_parser("eval", help="track and report ADD/ADI, AUC and shift")
    common(s, policy=True)
    sequence(s)
    s.add_argument("--symmetric", action="store_true", help="use ADI")
    s.add_argument("--out", help="JSON report path")
    s.add_argument("--csv", help="per-frame CSV path")
    s.add_argument("--overlay-dir", help="write contour overlays here")

    s = sub.add_parser("robustness", help="corruption sweep over m")
    common(s, policy=True, workers=True)
    s.add_argument("--m-min", type=int, default=0)
    s.add_argument("--m-max", type=int)
    s.add_argument("--delta", type=int)
    s.add_argument("--cap", type=int)
    s.add_argument("--scenes", type=int, help="number of sweep scenes")
    s.add_argument("--out", help="JSON report path")
    s.add_argument("--csv", help="CSV export path")

    s = sub.add_parser("render-debug", help="render rgb/depth/mask PNGs for one pose")
    common(s)
    s.add_argument("--pose", help='pose JSON {"q":[w,x,y,z],"t":[x,y,z]} (inline or file)')
    s.add_argument("--intrinsics", help="intrinsics JSON (inline or file)")
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--unlit", action="store_true")
    s.add_argument("--patch", action="store_true", help="also write the cropped patch stack")
    return p


_OVERRIDES = {
    "seed": "run.seed", "workers": "run.workers", "per_group": "data.per_group",
    "steps": "train.steps", "batch_size": "train.batch_size", "lr": "train.learning_rate",
    "buffer_size": "train.buffer_size", "refresh": "train.refresh",
    "backgrounds": "paths.backgrounds", "max_steps": "loop.max_steps",
    "grid_spacing": "detection.grid_spacing", "smoothing": "detection.smoothing",
    "rotations": "detection.rotations", "m_max": "robustness.m_max",
    "delta": "robustness.delta", "cap": "robustness.cap", "scenes": "robustness.scenes",
}

_HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "track": cmd_track, "detect": cmd_detect,
    "eval": cmd_eval, "robustness": cmd_robustness, "render-debug": cmd_render_debug,
}


def resolve_config(args) -> dict:
    cfg = cfgmod.load_config(getattr(args, "config", None))
    over = {key: getattr(args, attr) for attr, key in _OVERRIDES.items() if hasattr(args, attr)}
    if isinstance(getattr(args, "mesh", None), str):
        over["paths.mesh"] = args.mesh
    if getattr(args, "no_augment", False):
        over["data.augment"] = False
    cfg = cfgmod.merge_overrides(cfg, over)
    if cfg["run.workers"] <= 0:
        from poseact.datagen import default_workers
        cfg["run.workers"] = default_workers()
    return cfg


def _error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("pose-act: a subcommand is required: " + ", ".join(SUBCOMMANDS))
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = resolve_config(args)
        log.info("resolved config: %s", cfgmod.dump_config(cfg))
        return _HANDLERS[args.command](args, cfg)
    except UsageError as e:
        _error("usage", str(e))
        return 2
    except cfgmod.ConfigError as e:
        _error("config", str(e))
        return 2
    except Exception as e:  # noqa: BLE001 - every failure becomes exit 1
        log.debug("failure", exc_info=True)
        _error(type(e).__name__, str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
