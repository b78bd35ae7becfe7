"""Command-line entry point: ``lifemap <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io as fio
from .detect import BatchAccumulator, DetectorConfig, frame_points
from .errors import LifemapError
from .field import FeatureField, FieldTrainer, TrainConfig, determine_scene_box, render_views
from .harness import emit_report, load_config, run_experiment, run_noise_sweep
from .query import embed_query, relevancy_volume
from .scene import (
    CameraIntrinsics,
    build_scene,
    generate_trajectory,
    load_scene_spec,
    perturb_pose,
    render_observation,
    window_encode,
)


def _intrinsics(args):
    f = args.focal
    return CameraIntrinsics(f, f, (args.width - 1) / 2, (args.height - 1) / 2, args.width, args.height)


def cmd_simulate(args):
    scene = build_scene(load_scene_spec(args.scene))
    K = _intrinsics(args)
    rng = np.random.default_rng(args.seed)
    phase = 2.0 * np.pi * args.phase / args.frames
    poses = generate_trajectory(scene, args.frames, phase=phase)
    obs = []
    for k, pose in enumerate(poses):
        rec = perturb_pose(pose, np.deg2rad(args.sigma_rot), args.sigma_trans, rng)
        o = render_observation(scene, pose, K, args.scale, args.period * 10000 + k, rec)
        o.period = args.period
        obs.append(o)
    if args.append and os.path.exists(args.out):
        obs = fio.load_dataset(args.out) + obs
    fio.save_dataset(args.out, obs)
    print(f"wrote {len(obs)} frames to {args.out}")


def cmd_train(args):
    obs = fio.load_dataset(args.dataset)
    for o in obs:
        if o.feature_map is None:
            o.feature_map = window_encode(o.semantic, o.scale, o.stride).astype(np.float32)
    if args.init and os.path.exists(args.init):
        field = fio.load_checkpoint(args.init)
    else:
        box = determine_scene_box([o.pose for o in obs], [o.depth for o in obs], obs[0].intrinsics)
        field = FeatureField(box, feature_dim=obs[0].semantic.shape[-1], seed=args.seed)
    trainer = FieldTrainer(field, TrainConfig(steps_per_period=args.steps), seed=args.seed)
    for o in obs:
        trainer.add_frame(o)
    for i in range(args.steps):
        loss = trainer.step()
        if args.verbose and (i + 1) % 100 == 0:
            print(f"step {i + 1}: loss {loss:.5f}")
    fio.save_checkpoint(args.out, field)
    print(f"trained {args.steps} steps on {len(obs)} frames, final loss {trainer.history[-1]:.5f}; wrote {args.out}")


def cmd_detect(args):
    field = fio.load_checkpoint(args.field)
    obs = [o for o in fio.load_dataset(args.dataset) if args.period is None or o.period == args.period]
    det = DetectorConfig(method=args.method, tau=args.tau, additive_renorm=args.additive)
    acc = BatchAccumulator(det)
    regions = []
    if args.heatmaps:
        os.makedirs(args.heatmaps, exist_ok=True)
    for o in obs:
        if o.feature_map is None:
            o.feature_map = window_encode(o.semantic, o.scale, o.stride).astype(np.float32)
        depth, fine, coarse = render_views(field, o.pose, o.intrinsics)
        rendered = (depth, fine, coarse, window_encode(fine, o.scale, o.stride))
        pts, heat, _ = frame_points(o, rendered, det)
        if args.heatmaps:
            lo, hi = (0.0, 1.0) if det.method == "depth" else (-1.0, 1.0)
            fio.write_pgm(os.path.join(args.heatmaps, f"heat_{o.frame_id:06d}.pgm"), heat.values, lo, hi)
        if acc.add(pts):
            regions += acc.flush()
    if acc.n_frames:
        regions += acc.flush()
    meta = {"method": det.method, "tau": det.tau, "eps": det.eps, "min_pts": det.min_pts, "frames": len(obs)}
    if args.out:
        fio.write_regions(args.out, regions, meta)
    for r in regions:
        print(json.dumps(r.as_dict()))
    print(f"{len(regions)} change regions from {len(obs)} frames")


def cmd_query(args):
    field = fio.load_checkpoint(args.field)
    scene = build_scene(load_scene_spec(args.scene))
    q = embed_query(args.label, scene, np.deg2rad(args.theta))
    res = relevancy_volume(field, q, args.resolution, args.opacity_floor)
    if res.no_content:
        print(json.dumps({"label": args.label, "no_content": True}))
    else:
        print(json.dumps({"label": args.label, "argmax": [float(v) for v in res.argmax], "value": res.value}))
    if args.slice:
        z = res.values.shape[2] // 2
        fio.write_pgm(args.slice, np.nan_to_num(res.values[:, :, z].T, nan=-1.0), -1.0, 1.0)


def cmd_run_experiment(args):
    cfg = load_config(args.config, method=args.method, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)

    def keep(period, mapper, output):
        if mapper.field is not None:
            fio.save_checkpoint(os.path.join(args.out, f"field_p{period}.llff"), mapper.field)
        fio.write_regions(os.path.join(args.out, f"regions_p{period}.json"), output.regions,
                          {"period": period, "method": cfg.method})
        for heat in mapper.heatmaps[: args.heatmaps]:
            lo = 0.0 if heat.method == "depth" else -1.0
            fio.write_pgm(os.path.join(args.out, f"heat_p{period}_{heat.frame_id:06d}.pgm"), heat.values, lo, 1.0)

    if args.noise_sweep:
        seeds = range(cfg.seed, cfg.seed + args.sweep_seeds)
        for level, reps in run_noise_sweep(cfg, seeds).items():
            path = emit_report(reps, os.path.join(args.out, f"metrics_rot{level:g}.csv"))
            acc = np.mean([r.decision_accuracy for r in reps])  # nan unless NoChange
            ratio = np.mean([r.mask_ratio for r in reps])
            print(f"sigma_rot={level:g} deg: decision accuracy {acc:.2f} mask ratio {ratio:.4f} -> {path}")
        return

    rep = run_experiment(cfg, on_period=keep)
    path = emit_report(rep, os.path.join(args.out, "metrics.csv"))
    for p in rep.periods:
        print(f"period {p.period}: decision={p.decision} regions={p.n_regions} recall={p.recall:.3f} "
              f"mask={p.mask_ratio:.4f} moved={p.query_acc_moved:.3f} static={p.query_acc_static:.3f}")
    print(f"wrote {path}")


def cmd_serve_mapper(args):
    from .transport import RoleConfig, run_mapper_role

    if args.checkpoint_dir:
        os.makedirs(args.checkpoint_dir, exist_ok=True)
    outs = run_mapper_role(RoleConfig(addr=args.listen, checkpoint_dir=args.checkpoint_dir),
                           ready=lambda a: print(f"listening on {a[0]}:{a[1]}", flush=True))
    print(f"session finished after {len(outs)} periods")


def cmd_serve_robot(args):
    from .transport import RoleConfig, run_robot_role

    cfg = load_config(args.scenario, method=args.method, seed=args.seed)
    rep = run_robot_role(RoleConfig(addr=args.connect, experiment=cfg))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        emit_report(rep, os.path.join(args.out, "metrics.csv"))
    for p in rep.periods:
        print(f"period {p.period}: decision={p.decision} regions={p.n_regions} frames={p.frames_requested}")


def build_parser():
    ap = argparse.ArgumentParser(prog="lifemap", description="Lifelong semantic mapping on a synthetic tabletop.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a trajectory of a scene into a dataset file")
    p.add_argument("--scene", required=True, help="scene spec (YAML)")
    p.add_argument("--out", required=True, help="dataset file (.llrf)")
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--period", type=int, default=0)
    p.add_argument("--phase", type=float, default=0.0, help="trajectory offset in frame spacings")
    p.add_argument("--sigma-rot", type=float, default=0.0, help="pose noise, degrees")
    p.add_argument("--sigma-trans", type=float, default=0.0, help="pose noise, meters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--append", action="store_true", help="append to an existing dataset")
    p.add_argument("--width", type=int, default=80)
    p.add_argument("--height", type=int, default=60)
    p.add_argument("--focal", type=float, default=80.0)
    p.add_argument("--scale", type=float, default=0.25)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit a feature field to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="checkpoint file (.llff)")
    p.add_argument("--init", help="continue from this checkpoint")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="find change regions in new frames against a field")
    p.add_argument("--field", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--period", type=int, help="only frames of this period")
    p.add_argument("--method", choices=("semantic", "depth"), default="semantic")
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--additive", action="store_true", help="additive re-normalization variant")
    p.add_argument("--out", help="regions file (.json or text)")
    p.add_argument("--heatmaps", help="directory for PGM heatmaps")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("query", help="locate an object by its embedding")
    p.add_argument("--field", required=True)
    p.add_argument("--scene", required=True, help="scene spec holding the label catalog")
    p.add_argument("--label", required=True)
    p.add_argument("--theta", type=float, default=10.0, help="query perturbation, degrees")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--opacity-floor", type=float, default=0.5)
    p.add_argument("--slice", help="write the mid-height relevancy slice as PGM")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("run-experiment", help="run a full multi-period trial")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=("semantic", "depth"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out")
    p.add_argument("--heatmaps", type=int, default=0, help="heatmaps to export per period")
    p.add_argument("--noise-sweep", action="store_true", help="repeat over the built-in pose-noise levels")
    p.add_argument("--sweep-seeds", type=int, default=5, help="seeds per noise level")
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("serve-mapper", help="run the mapper role and wait for a robot")
    p.add_argument("--listen", default=None, help="host:port (default $LIFEMAP_MAPPER_ADDR)")
    p.add_argument("--checkpoint-dir", default=None)
    p.set_defaults(func=cmd_serve_mapper)

    p = sub.add_parser("serve-robot", help="run the robot role against a mapper")
    p.add_argument("--connect", default=None, help="host:port (default $LIFEMAP_MAPPER_ADDR)")
    p.add_argument("--scenario", required=True, help="experiment config (YAML)")
    p.add_argument("--method", choices=("semantic", "depth"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_serve_robot)

    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except LifemapError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
