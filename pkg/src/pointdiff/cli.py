"""Command-line entry point: ``pointdiff <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .dataset import (
    PipelineConfig,
    SceneSpec,
    build_map,
    generate_synthetic_scene,
    make_pair,
    sensor_pose,
)
from .geometry import crop_range, fps, range_mask, sample_without_replacement, transform
from .metrics import DEFAULT_IOU_RESOLUTIONS, evaluate
from .noise_model import ModelConfig, ToyNoisePredictor, TrainConfig, train
from .refinement import RefineConfig, RefineNet, make_refine_example, refine_upsample, train_refine
from .sampler import SamplerConfig, build_initial_noisy, sample
from .schedule import make_linear_schedule

log = logging.getLogger("pointdiff")

CONFIG_TYPES = (SamplerConfig, TrainConfig, RefineConfig, PipelineConfig, ModelConfig)


class CLIError(Exception):
    pass


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _run_config(args) -> io.RunConfig:
    rc = io.RunConfig(*CONFIG_TYPES)
    if getattr(args, "config", None):
        rc.load(args.config)
    return rc


def _flag_values(args, keys) -> dict:
    return {k: getattr(args, k, None) for k in keys}


def _schedule(args):
    return make_linear_schedule(args.diffusion_steps, args.beta_start, args.beta_end)


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    out = Path(args.out)
    spec = SceneSpec(extent=args.extent, n_boxes=args.boxes, n_gt=args.gt_points,
                     n_azimuth=args.azimuth_steps)
    for i in range(args.scenes):
        seed = args.seed + i
        gt, scan = generate_synthetic_scene(spec, seed)
        pose = sensor_pose(spec)
        scene = out / f"scene_{i:04d}"
        io.write_scene(scene, transform(scan, pose.inverse()), pose, gt)
        io.write_ply(scene / "gt.ply", transform(gt, pose.inverse()))
        log.info("%s: %d map points, %d scan points", scene, len(gt), len(scan))
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


# ---------------------------------------------------------------- train

def _load_pairs(data_dir, pipeline: PipelineConfig, seed: int):
    pairs = []
    for i, d in enumerate(io.scene_dirs(data_dir)):
        scan, pose, world = io.read_scene(d)
        pairs.append(make_pair(scan, pose, world, pipeline, seed + i))
    return pairs


def _write_history(path, history):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)


def _train_model(args, rc, overrides=None):
    flags = _flag_values(args, (
        "epochs", "learning_rate", "r", "p_null", "seed", "batch_size", "lr_halving_period",
        "weight_decay", "passes_per_epoch", "points_per_step", "t_sampling"))
    tc = rc.build(TrainConfig, **{**flags, **(overrides or {})})
    mc = rc.build(ModelConfig, **_flag_values(args, (
        "d_t", "d_c", "layer_dims", "n_condition_points", "encoder_hidden", "coord_scale")))
    pc = rc.build(PipelineConfig, **_flag_values(args, ("range_m", "n_input", "n_gt")))
    pairs = _load_pairs(args.data, pc, tc.seed)
    model = ToyNoisePredictor(mc, seed=tc.seed)
    history = train(model, pairs, _schedule(args), tc)
    return model, history


def cmd_train(args) -> int:
    from .plotting import plot_loss_history

    rc = _run_config(args)
    model, history = _train_model(args, rc)
    io.save_noise_model(args.out, model)
    stem = Path(args.out)
    _write_history(stem.with_suffix(".history.csv"), history)
    plot_loss_history(history, stem.with_suffix(".loss.png"))
    for h in history:
        print(f"epoch={h['epoch']} lr={h['lr']:.3g} loss={h['total']:.6f} diff={h['diff']:.6f} "
              f"mean={h['mean']:.6f} std={h['std']:.6f}")
    return 0


def cmd_train_refine(args) -> int:
    from .plotting import plot_loss_history

    rc = _run_config(args)
    cfg = rc.build(RefineConfig, **_flag_values(args, (
        "kappa", "max_offset", "jitter_sigma", "hidden", "epochs", "learning_rate", "seed",
        "batch_size", "coord_scale")))
    pc = rc.build(PipelineConfig, **_flag_values(args, ("range_m",)))
    examples = []
    for i, d in enumerate(io.scene_dirs(args.data)):
        scan, pose, world = io.read_scene(d)
        local = transform(world, pose.inverse())
        region = local[range_mask(local, pc.range_m)]
        if args.points and len(region) > args.points:
            region = sample_without_replacement(region, args.points, cfg.seed + i)
        examples.append(make_refine_example(region, cfg.jitter_sigma, cfg.seed + 1000 + i))
    net = RefineNet(cfg, seed=cfg.seed)
    history = train_refine(net, examples, cfg)
    io.save_refine_model(args.out, net)
    recs = [{"epoch": i, "total": v, "diff": v, "mean": 0.0, "std": 0.0} for i, v in enumerate(history)]
    plot_loss_history(recs, Path(args.out).with_suffix(".loss.png"), "Refinement loss")
    for i, v in enumerate(history):
        print(f"epoch={i} refine_loss={v:.6f}")
    return 0


# ---------------------------------------------------------------- complete

def _prepare_scan(scan, pc: PipelineConfig, seed: int):
    scan = crop_range(scan, pc.range_m)
    if len(scan) > pc.n_input:
        scan = fps(scan, pc.n_input, seed)
    return scan


def run_completion(model, scan, sched, sc: SamplerConfig, stats=None):
    """Complete a prepared scan; returns (completed, initial noisy cloud)."""
    init = build_initial_noisy(scan, sc.replicate, sched, sc.seed)
    cond = model.encode(scan)

    def record(t, x, eps_c, eps):
        if stats is not None:
            stats.append((t, float(eps_c.mean()), float(eps_c.std())))

    return sample(model, cond, init, sched, sc, callback=record), init


def cmd_complete(args) -> int:
    rc = _run_config(args)
    sc = rc.build(SamplerConfig, **_flag_values(args, (
        "steps", "s", "replicate", "seed", "solver", "stochastic", "sigma_mode")))
    pc = rc.build(PipelineConfig, **_flag_values(args, ("range_m", "n_input")))
    model = io.load_noise_model(args.model)
    scan = _prepare_scan(io.read_cloud(args.input), pc, sc.seed)
    stats = []
    out, init = run_completion(model, scan, _schedule(args), sc, stats)
    if args.refine_model:
        out = refine_upsample(out, io.load_refine_model(args.refine_model))
    io.write_ply(args.out, out)
    if args.save_init:
        io.write_ply(args.save_init, init)
    if args.noise_stats:
        with open(args.noise_stats, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t", "mean", "std"])
            w.writerows(stats)
    print(f"wrote {len(out)} points to {args.out}")
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    pred = io.read_cloud(args.pred)
    gt = io.read_cloud(args.gt)
    report = evaluate(pred, gt, _floats(args.iou_res), args.jsd_res)
    print(report.to_json() if args.json else report.to_kv(), end="\n" if args.json else "")
    if args.out:
        Path(args.out).write_text(report.to_kv())
        with open(Path(args.out).with_suffix(".jsonl"), "a") as f:
            f.write(report.to_json() + "\n")
        from .plotting import plot_bev

        plot_bev(pred, gt, args.jsd_res, Path(args.out).with_suffix(".bev.png"))
    return 0


# ---------------------------------------------------------------- build-map

def cmd_build_map(args) -> int:
    rc = _run_config(args)
    pc = rc.build(PipelineConfig, dedup_resolution=args.dedup)
    scan_files = sorted(Path(args.scans).glob("*.bin"))
    if not scan_files:
        raise CLIError(f"{args.scans}: no .bin scans")
    poses = io.read_poses(args.poses)
    if len(poses) < len(scan_files):
        raise CLIError(f"{args.poses}: {len(poses)} poses for {len(scan_files)} scans")
    labels = None
    if args.labels:
        labels = []
        for f in scan_files:
            lf = Path(args.labels) / (f.stem + ".label")
            if not lf.exists():
                raise CLIError(f"missing label file {lf}")
            labels.append(io.read_labels(lf))
    scans = [(io.read_kitti_bin(f), p) for f, p in zip(scan_files, poses)]
    world = build_map(scans, labels, pc)
    io.write_ply(args.out, world)
    print(f"wrote {len(world)} map points to {args.out}")
    return 0


# ---------------------------------------------------------------- sweep

SWEEP_PARAMS = {
    "reg-weight": ("r", True, "r"),
    "null-prob": ("p_null", True, "p"),
    "guidance": ("s", False, "s"),
    "steps": ("steps", False, "steps"),
    "replicate": ("replicate", False, "K"),
}


def cmd_sweep(args) -> int:
    from .plotting import plot_noise_stats, plot_sweep

    if args.param not in SWEEP_PARAMS:
        raise CLIError(f"unknown sweep parameter {args.param!r}; choose from {sorted(SWEEP_PARAMS)}")
    key, retrain, symbol = SWEEP_PARAMS[args.param]
    values = _floats(args.values)
    rc = _run_config(args)
    sched = _schedule(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pc = rc.build(PipelineConfig, **_flag_values(args, ("range_m", "n_input", "n_gt")))
    base_sc = rc.build(SamplerConfig, **_flag_values(args, ("steps", "s", "replicate", "seed", "solver")))
    scenes = [io.read_scene(d) for d in io.scene_dirs(args.data)]
    model = None
    rows, noise = [], {}
    for v in values:
        if retrain or model is None:
            model, _ = _train_model(args, rc, {key: v} if retrain else None)
        sc = rc.build(SamplerConfig, **{**vars(base_sc), **({} if retrain else {key: type(getattr(base_sc, key))(v)})})
        cds, stats = [], []
        for i, (scan, pose, world) in enumerate(scenes):
            pair = make_pair(scan, pose, world, pc, sc.seed + i)
            per_step = []
            completed, _ = run_completion(model, pair.input, sched, sc, per_step)
            cds.append(evaluate(completed, pair.gt, DEFAULT_IOU_RESOLUTIONS).cd)
            stats.append(per_step)
        noise[f"{symbol}={v:g}"] = np.mean(np.asarray(stats, dtype=np.float64), axis=0)
        rows.append({"param": args.param, "value": v, "cd": float(np.mean(cds))})
        log.info("%s=%g mean CD %.4f", args.param, v, rows[-1]["cd"])
    table = (f"{symbol} | " + " | ".join(f"{r['value']:.1f}" for r in rows) + "\n"
             + "CD [m] | " + " | ".join(f"{r['cd']:.3f}" for r in rows) + "\n")
    (out / "sweep.txt").write_text(table)
    with open(out / "sweep.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    with open(out / "noise_stats.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run", "step_index", "t", "mean", "std"])
        for label, arr in noise.items():
            for j, (t, m, s) in enumerate(arr):
                w.writerow([label, j + 1, int(round(t)), m, s])
    plot_noise_stats(noise, out / "noise_stats.png")
    plot_sweep(args.param, [r["value"] for r in rows], [r["cd"] for r in rows], out / "sweep.png")
    print(table, end="")
    return 0


# ---------------------------------------------------------------- parser

def _add_schedule_flags(p):
    p.add_argument("--diffusion-steps", type=int, default=1000, help="T")
    p.add_argument("--beta-start", type=float, default=3.5e-5)
    p.add_argument("--beta-end", type=float, default=0.007)


def _add_model_flags(p):
    p.add_argument("--d-t", dest="d_t", type=int)
    p.add_argument("--d-c", dest="d_c", type=int)
    p.add_argument("--layer-dims", dest="layer_dims", type=_ints, help="comma-separated widths")
    p.add_argument("--n-cond", dest="n_condition_points", type=int)
    p.add_argument("--encoder-hidden", dest="encoder_hidden", type=int)
    p.add_argument("--coord-scale", dest="coord_scale", type=float)


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="directory of scene folders")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--lr-halving", dest="lr_halving_period", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--reg-weight", dest="r", type=float, help="noise regularization weight (default 5.0)")
    p.add_argument("--null-prob", dest="p_null", type=float, help="null-token probability (default 0.1)")
    p.add_argument("--passes-per-epoch", dest="passes_per_epoch", type=int)
    p.add_argument("--points-per-step", dest="points_per_step", type=int)
    p.add_argument("--t-sampling", dest="t_sampling", choices=("uniform", "stratified"))
    p.add_argument("--n-input", dest="n_input", type=int)
    p.add_argument("--n-gt", dest="n_gt", type=int)
    p.add_argument("--range", dest="range_m", type=float)
    p.add_argument("--seed", type=int)
    _add_model_flags(p)


def _add_sampler_flags(p):
    p.add_argument("--steps", type=int, help="denoising steps (default 50)")
    p.add_argument("--guidance", dest="s", type=float, help="guidance weight (default 6.0)")
    p.add_argument("--replicate", type=int, help="scan replication factor K (default 10)")
    p.add_argument("--solver", choices=("ddim", "ddpm"))
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointdiff", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gt-points", type=int, default=2000)
    p.add_argument("--extent", type=float, default=12.0)
    p.add_argument("--boxes", type=int, default=4)
    p.add_argument("--azimuth-steps", type=int, default=90)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the noise predictor")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_train_flags(p)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-refine", help="train the refinement network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--kappa", type=int)
    p.add_argument("--max-offset", dest="max_offset", type=float)
    p.add_argument("--jitter", dest="jitter_sigma", type=float)
    p.add_argument("--hidden", type=_ints)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--coord-scale", dest="coord_scale", type=float)
    p.add_argument("--range", dest="range_m", type=float)
    p.add_argument("--points", type=int, default=0, help="points per training example (0 = all)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_refine)

    p = sub.add_parser("complete", help="complete a single scan")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--refine-model")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_sampler_flags(p)
    p.add_argument("--stochastic", action="store_const", const=True)
    p.add_argument("--sigma-mode", dest="sigma_mode", choices=("std", "verbatim"))
    p.add_argument("--n-input", dest="n_input", type=int)
    p.add_argument("--range", dest="range_m", type=float)
    p.add_argument("--save-init", help="also write the initial noisy cloud")
    p.add_argument("--noise-stats", help="CSV of per-step predicted-noise mean/std")
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("eval", help="compare a completion with ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--iou-res", default=",".join(f"{r:g}" for r in DEFAULT_IOU_RESOLUTIONS))
    p.add_argument("--jsd-res", type=float, default=0.5)
    p.add_argument("--json", action="store_true", help="print one JSON object instead of key=value")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("build-map", help="aggregate posed scans into a static map")
    p.add_argument("--scans", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--labels")
    p.add_argument("--dedup", type=float, help="voxel size for duplicate removal")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("sweep", help="retrain/resample over one parameter and tabulate CD")
    p.add_argument("--param", required=True, help=", ".join(SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config")
    _add_train_flags(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", dest="s", type=float)
    p.add_argument("--replicate", type=int)
    p.add_argument("--solver", choices=("ddim", "ddpm"))
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, OSError) as e:
        print(f"pointdiff {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
