"""``semsplat`` command-line driver: generate, run, eval, query, bench."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, format_config, load_config
from .dataset import (
    DatasetError,
    DatasetManifest,
    read_dataset,
    read_embeddings,
    read_manifest,
    read_trajectory,
    write_dataset,
    write_trajectory,
)
from .estimator import GaussianFeatureSLAM, evaluate_map
from .geometry import CameraIntrinsics, Pose
from .mapper import read_checkpoint, write_checkpoint
from .metrics import Trajectory, ate_rmse, format_report, query_mask, segment_by_query
from .rasterizer import RenderSettings, render_feature, render_geometric
from .synthgen import SceneSpec, build_synthetic_scene, generate_trajectory, render_ground_truth

DEFAULT_CLASSES = ("wall", "floor", "ceiling", "object")

_PALETTE = np.array([[200, 200, 200], [60, 60, 220], [230, 230, 40], [220, 40, 40],
                     [40, 180, 60], [160, 60, 200], [240, 140, 20], [20, 170, 170]], np.uint8)


class CLIError(RuntimeError):
    pass


def _save_rgb(path, img):
    Image.fromarray(np.clip(np.rint(np.asarray(img) * 255), 0, 255).astype(np.uint8)).save(path)


def _save_labels(path, labels):
    rgb = np.zeros(labels.shape + (3,), np.uint8)
    ok = labels != 255
    rgb[ok] = _PALETTE[labels[ok] % len(_PALETTE)]
    Image.fromarray(rgb).save(path)


def _class_names(n: int) -> tuple:
    names = list(DEFAULT_CLASSES[:n])
    names += [f"class{i}" for i in range(len(names), n)]
    return tuple(names)


# -- generate -----------------------------------------------------------------

def cmd_generate(args) -> dict:
    names = _class_names(args.classes)
    spec = SceneSpec(class_names=names, feature_dim=args.feature_dim, density=args.density,
                     seed=args.seed)
    scene = build_synthetic_scene(spec)
    cam = CameraIntrinsics.from_fov(args.width, args.height, args.hfov)
    poses = generate_trajectory(args.trajectory, args.frames * args.loops, scene, loops=args.loops)
    frames = render_ground_truth(scene, poses, cam, depth_noise=args.depth_noise, seed=args.seed)
    manifest = DatasetManifest(len(frames), cam, args.feature_dim, class_names=names,
                               extra={"seed": args.seed, "trajectory": args.trajectory,
                                      "loops": args.loops, "depth_noise": repr(args.depth_noise)})
    write_dataset(frames, poses, manifest, args.out, scene.class_embeddings)
    return {"frames": len(frames), "gaussians": len(scene.gaussians), "classes": ",".join(names),
            "dataset": str(args.out)}


# -- run ----------------------------------------------------------------------

def _estimator(args) -> GaussianFeatureSLAM:
    params = load_config(args.config) if args.config else {}
    if args.seed is not None:
        params["seed"] = args.seed
    if args.mode is not None:
        params["mode"] = args.mode
    est = GaussianFeatureSLAM()
    est.set_params(**params)
    return est


def cmd_run(args) -> dict:
    est = _estimator(args)
    frames, gt_poses, manifest = read_dataset(args.dataset)
    emb = read_embeddings(args.dataset) if (Path(args.dataset) / "embeddings.bin").exists() else None
    est.fit(frames, gt_poses, intrinsics=manifest.intrinsics, class_embeddings=emb)
    out = Path(args.out)
    (out / "renders").mkdir(parents=True, exist_ok=True)
    write_checkpoint(est.map_, out / "checkpoint.splf")
    write_trajectory(out / "trajectory.txt", est.trajectory_.timestamps, est.trajectory_.poses)
    (out / "config.txt").write_text(format_config(est.get_params()))
    for kf in est.map_.keyframes:
        r = est.render(kf.pose)
        _save_rgb(out / "renders" / f"{kf.frame_index:06d}_color.png", r.color)
        if emb is not None:
            _save_labels(out / "renders" / f"{kf.frame_index:06d}_label.png",
                         segment_by_query(r.feature, emb))
    gt = Trajectory([f.timestamp for f in frames], gt_poses)
    report = est.evaluate(frames, gt, emb).as_dict()
    report["inserted"] = sum(est.inserted_)
    (out / "report.txt").write_text(format_report(report))
    (out / "timings.txt").write_text(format_report({f"wall_time_{k}": v
                                                    for k, v in est.timings_.items()}))
    return report


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> dict:
    scene = read_checkpoint(args.checkpoint)
    frames, gt_poses, manifest = read_dataset(args.dataset)
    emb = read_embeddings(args.dataset) if (Path(args.dataset) / "embeddings.bin").exists() else None
    poses = gt_poses
    est_traj = None
    if args.trajectory:
        stamps, est_poses = read_trajectory(args.trajectory)
        est_traj = Trajectory(stamps, est_poses)
        if len(est_poses) != len(frames):
            raise CLIError(f"trajectory has {len(est_poses)} poses, dataset has {len(frames)} frames")
        poses = est_poses
    idx = range(0, len(frames), args.every)
    settings = RenderSettings(K=args.K)
    report = evaluate_map(scene, manifest.intrinsics, settings, [frames[i] for i in idx],
                          [poses[i] for i in idx], emb)
    items = report.as_dict()
    if est_traj is not None:
        items["ate_rmse"] = ate_rmse(est_traj, Trajectory([f.timestamp for f in frames], gt_poses))
    else:
        del items["ate_rmse"]
    items["views"] = len(idx)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "eval.txt").write_text(format_report(items))
    return items


# -- query --------------------------------------------------------------------

def _parse_pose(text: str) -> Pose:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 7:
        raise CLIError("--pose expects 7 numbers: tx ty tz qx qy qz qw (camera-to-world)")
    tx, ty, tz, qx, qy, qz, qw = vals
    return Pose([qw, qx, qy, qz], [tx, ty, tz]).inverse()


def cmd_query(args) -> dict:
    manifest = read_manifest(args.dataset)
    names = list(manifest.class_names)
    if args.class_name not in names:
        raise CLIError(f"unknown class {args.class_name!r}; known classes: {', '.join(names)}")
    emb = read_embeddings(args.dataset)
    query = emb[names.index(args.class_name)]
    scene = read_checkpoint(args.checkpoint)
    label = None
    if args.pose:
        pose = _parse_pose(args.pose)
    else:
        frames, gt_poses, _ = read_dataset(args.dataset)
        pose, label = gt_poses[args.frame], frames[args.frame].label
    render = render_geometric(scene, pose, manifest.intrinsics, RenderSettings(K=args.K))
    heat, mask = query_mask(render_feature(scene, render.topk), query, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_rgb(out / "heat.png", np.repeat(np.clip(heat, 0, 1)[..., None], 3, axis=2))
    Image.fromarray((mask * 255).astype(np.uint8)).save(out / "mask.png")
    items = {"class": args.class_name, "threshold": float(args.threshold),
             "mask_fraction": float(mask.mean())}
    if label is not None:
        gt = label == names.index(args.class_name)
        union = np.sum(gt | mask)
        items["mask_iou"] = float(np.sum(gt & mask) / union) if union else 1.0
    return items


# -- bench --------------------------------------------------------------------

def cmd_bench(args) -> dict:
    from .bench import feature_pass_times

    rows = feature_pass_times(args.gaussians, args.size, tuple(args.dims), tuple(args.ks),
                              args.repeats, args.seed)
    items = {f"feature_pass_seconds_D{D}_K{K}": t for D, K, t in rows}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench.txt").write_text(format_report(items))
    return items


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semsplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=100, help="frames per loop")
    g.add_argument("--loops", type=int, default=1, help="times the path is traversed")
    g.add_argument("--trajectory", choices=("orbit", "lawnmower"), default="orbit")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--depth-noise", type=float, default=0.0)
    g.add_argument("--density", type=float, default=24.0)
    g.add_argument("--width", type=int, default=80)
    g.add_argument("--height", type=int, default=60)
    g.add_argument("--hfov", type=float, default=70.0)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="track and map a dataset")
    r.add_argument("--dataset", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=("deterministic", "concurrent"))
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a checkpoint against a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--trajectory", help="estimated TUM trajectory; ground truth poses otherwise")
    e.add_argument("--every", type=int, default=1, help="evaluate every n-th frame")
    e.add_argument("--K", type=int, default=3)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("query", help="open-vocabulary style class query")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--dataset", required=True, help="supplies intrinsics and class embeddings")
    q.add_argument("--class", dest="class_name", required=True)
    q.add_argument("--pose", help="camera-to-world 'tx ty tz qx qy qz qw'")
    q.add_argument("--frame", type=int, default=0, help="use this frame's ground-truth pose")
    q.add_argument("--threshold", type=float, default=0.5)
    q.add_argument("--K", type=int, default=3)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_query)

    b = sub.add_parser("bench", help="feature-pass throughput table")
    b.add_argument("--gaussians", type=int, default=10_000)
    b.add_argument("--size", type=int, default=256)
    b.add_argument("--dims", type=int, nargs="+", default=[16, 64])
    b.add_argument("--ks", type=int, nargs="+", default=[1, 3, 5, 10])
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        items = args.func(args)
    except (ConfigError, DatasetError, CLIError, ValueError) as e:
        print(f"semsplat {args.command}: error: {e}", file=sys.stderr)
        return 2
    sys.stdout.write(format_report(items))
    return 0


if __name__ == "__main__":
    sys.exit(main())
