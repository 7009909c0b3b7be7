"""Command-line entry point.

Subcommands: gen-synth, train-motion, infer-mask, track, map, run, eval.
All randomness is controlled by --seed; same config + same seed gives
byte-identical outputs on one platform.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, PipelineConfig, config_echo, load_config
from .datasets import load_tum_sequence
from .features import extract_features
from .fileio import save_pgm
from .geometry import load_tum_trajectory
from .metrics import SequenceResult, emit_report, mask_iou, psnr
from .mapping import adaptive_ssim_map
from .motion import (MotionInferenceState, MotionModelParams, infer_mask,
                     train_step)
from .optim import Adam
from .synth import SceneSpec, generate_sequence, write_sequence
from .tracking import evaluate_ate

log = logging.getLogger("dynsplat")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="master RNG seed")
    p.add_argument("--backend", choices=["synthetic", "file"],
                   help="feature backend (default from config)")
    p.add_argument("--feature-dir", help="GGDT feature files for the file backend")
    p.add_argument("--verbose", action="store_true")


def _load_cfg(args) -> PipelineConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "backend", None):
        overrides["backend.backend"] = args.backend
    if getattr(args, "feature_dir", None):
        overrides["backend.feature_dir"] = args.feature_dir
    cfg = load_config(args.config, overrides)
    if args.verbose:
        cfg.verbose = True
        logging.basicConfig(level=logging.INFO)
    return cfg


def cmd_gen_synth(args) -> int:
    cfg = _load_cfg(args)
    moving = args.distractor == "moving"
    radius = 0.0 if args.distractor == "none" else args.radius
    spec = SceneSpec(
        height=args.size, width=args.size, n_frames=args.frames, seed=cfg.seed,
        distractor_radius=radius,
        distractor_velocity=(0.04, 0.01) if moving else (0.0, 0.0),
        camera_translation_step=(0.0, 0.0, 0.0) if args.camera == "still"
        else (0.015, 0.0, 0.0),
    )
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        seq = generate_sequence(spec)
    write_sequence(seq, args.out)
    print(f"wrote {spec.n_frames} frames to {args.out}")
    return 0


def cmd_train_motion(args) -> int:
    cfg = _load_cfg(args)
    data_dir = Path(args.data)
    seq_dirs = [data_dir] if (data_dir / "rgb.txt").is_file() else sorted(
        d for d in data_dir.iterdir() if (d / "rgb.txt").is_file())
    if not seq_dirs:
        raise FileNotFoundError(f"no sequences under {data_dir}")
    featseqs = []
    for d in seq_dirs:
        seq = load_tum_sequence(d)
        if seq.gt_masks is None:
            raise FileNotFoundError(f"{d}: training needs masks_gt/")
        feats = [extract_features(f, cfg.backend) for f in seq.frames]
        featseqs.append((feats, seq.gt_masks))
    params = MotionModelParams.init(cfg.backend.channels, cfg.motion.num_heads,
                                    seed=cfg.seed)
    opt = Adam(lr=cfg.motion.learning_rate)
    weights = cfg.motion.loss_weights()
    rng = np.random.default_rng(cfg.seed)
    steps = args.steps if args.steps is not None else cfg.motion.train_steps
    losses = []
    for step in range(steps):
        size = min(cfg.motion.batch_size, len(featseqs))
        batch = [featseqs[i] for i in rng.choice(len(featseqs), size, replace=False)]
        losses.append(train_step(params, opt, batch, weights,
                                 cfg.motion.queue_capacity))
        if args.verbose and (step + 1) % 50 == 0:
            log.info("step %d loss %.5f", step + 1, losses[-1])
    params.save(args.out)
    print(f"trained {steps} steps, loss {losses[0]:.5f} -> {losses[-1]:.5f}, "
          f"checkpoint at {args.out}")
    return 0


def cmd_infer_mask(args) -> int:
    cfg = _load_cfg(args)
    seq = load_tum_sequence(args.seq)
    params = MotionModelParams.load(args.ckpt)
    state = MotionInferenceState(capacity=cfg.motion.queue_capacity)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    radius = args.radius if args.radius is not None else cfg.motion.dilation_radius
    for frame in seq.frames:
        mask = infer_mask(frame, state, params, cfg.backend, radius=radius)
        save_pgm(out / f"{frame.index:06d}.pgm", mask.data)
    print(f"wrote {len(seq.frames)} masks to {out}")
    return 0


def _load_mask_dir(path: str, n: int) -> list[np.ndarray]:
    from .fileio import load_pgm

    masks = []
    for i in range(n):
        m = load_pgm(Path(path) / f"{i:06d}.pgm")
        masks.append((m > 0.5).astype(np.float64))
    return masks


def cmd_track(args) -> int:
    cfg = _load_cfg(args)
    seq = load_tum_sequence(args.seq)
    masks = (_load_mask_dir(args.masks, len(seq.frames)) if args.masks
             else pipeline.resolve_masks(seq, cfg, None)[0])
    depths = pipeline.resolve_depths(seq, args.depth_dir)
    track = pipeline.track_sequence(seq, masks, depths, cfg)
    from .geometry import save_tum_trajectory

    save_tum_trajectory(args.out, track.stamped_poses)
    if args.trace:
        from .tracking import save_cost_trace

        save_cost_trace(args.trace, track.trace)
    print(f"tracked {len(track.graph.keyframes)} keyframes, "
          f"final cost {track.trace[-1][1]:.6g}, trajectory at {args.out}")
    return 0


def cmd_map(args) -> int:
    cfg = _load_cfg(args)
    seq = load_tum_sequence(args.seq)
    masks = (_load_mask_dir(args.masks, len(seq.frames)) if args.masks
             else pipeline.resolve_masks(seq, cfg, None)[0])
    depths = pipeline.resolve_depths(seq, args.depth_dir)
    traj, _ = load_tum_trajectory(args.traj)
    # keyframes = trajectory entries matched to frame timestamps
    from .tracking import associate_timestamps

    pairs = associate_timestamps([t for t, _ in traj], seq.timestamps)
    kf_ids = [j for _, j in pairs]
    kf_poses = [traj[i][1] for i, _ in pairs]
    result = pipeline.map_sequence(seq, masks, depths, kf_ids, kf_poses, cfg)
    pipeline._save_map_checkpoint(result.gmap, Path(args.out))
    if args.trace:
        pipeline.save_loss_trace(args.trace, result.trace)
    if args.renders:
        from .fileio import save_ppm
        from .splat import render

        rd = Path(args.renders)
        rd.mkdir(parents=True, exist_ok=True)
        h, w = seq.frames[0].pixels.shape[:2]
        for n, t in enumerate(kf_ids):
            res = render(result.gmap, kf_poses[n], seq.intrinsics, h, w,
                         truncate_sigma=cfg.mapping.truncate_sigma)
            save_ppm(rd / f"{t:06d}.ppm", np.clip(res.color, 0, 1))
    print(f"mapped {len(kf_ids)} keyframes into {len(result.gmap)} gaussians, "
          f"checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    seq = load_tum_sequence(args.seq)
    est, _ = load_tum_trajectory(args.traj)
    rmse_m, std_m = evaluate_ate(est, seq.gt_poses)
    psnr_v = ssim_v = iou_v = float("nan")
    if args.renders:
        from .fileio import load_image
        from .tracking import associate_timestamps

        pairs = associate_timestamps([t for t, _ in est], seq.timestamps)
        psnrs, ssims = [], []
        for _, t in pairs:
            rp = Path(args.renders) / f"{t:06d}.ppm"
            if not rp.is_file():
                continue
            rendered = load_image(rp)
            static = (1.0 - seq.gt_masks[t]) if seq.gt_masks is not None \
                else np.ones(rendered.shape[:2])
            psnrs.append(psnr(rendered, seq.frames[t].pixels, static))
            smap, valid = adaptive_ssim_map(rendered, seq.frames[t].pixels, static)
            if valid.any():
                ssims.append(float(smap[valid].mean()))
        psnr_v = float(np.mean(psnrs)) if psnrs else float("nan")
        ssim_v = float(np.mean(ssims)) if ssims else float("nan")
    if args.masks and seq.gt_masks is not None:
        pred = _load_mask_dir(args.masks, len(seq.frames))
        ious = [mask_iou(pred[t], seq.gt_masks[t]) for t in range(len(seq.frames))
                if seq.gt_masks[t].sum() > 0 or pred[t].sum() > 0]
        iou_v = float(np.mean(ious)) if ious else 1.0
    result = SequenceResult(Path(args.seq).name, rmse_m * 100, std_m * 100,
                            psnr_v, ssim_v, iou_v)
    emit_report([result], args.out, config_echo=config_echo(cfg))
    print(f"ATE RMSE {rmse_m * 100:.3f} cm, report at {Path(args.out) / 'metrics.csv'}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    result = pipeline.run(args.seq, args.out, cfg, ckpt=args.ckpt,
                          depth_dir=args.depth_dir)
    print(f"run complete: ATE {result.ate_rmse_cm:.3f} cm, "
          f"PSNR {result.psnr_db:.2f} dB, SSIM {result.ssim:.4f}, "
          f"mask IoU {result.mask_iou:.3f}; metrics at {Path(args.out) / 'metrics.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynsplat",
                                 description="dynamic-scene SLAM toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--distractor", choices=["none", "moving", "static"],
                   default="moving")
    p.add_argument("--radius", type=float, default=0.45)
    p.add_argument("--camera", choices=["lateral", "still"], default="lateral")
    _add_common(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train-motion", help="train the motion-mask model")
    p.add_argument("--data", required=True, help="sequence dir or dir of dirs")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_common(p)
    p.set_defaults(func=cmd_train_motion)

    p = sub.add_parser("infer-mask", help="run mask inference over a sequence")
    p.add_argument("--seq", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--radius", type=int)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_infer_mask)

    p = sub.add_parser("track", help="masked dense bundle adjustment")
    p.add_argument("--seq", required=True)
    p.add_argument("--masks", help="PGM mask dir (default: masks_gt/)")
    p.add_argument("--depth-dir", help="GGDT depth dir (default: depth_gt/)")
    p.add_argument("--out", required=True, help="TUM trajectory output")
    p.add_argument("--trace", help="cost trace CSV")
    _add_common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("map", help="build the Gaussian map along a trajectory")
    p.add_argument("--seq", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--masks")
    p.add_argument("--depth-dir")
    p.add_argument("--out", required=True, help="map checkpoint directory")
    p.add_argument("--renders", help="directory for rendered keyframes")
    p.add_argument("--trace", help="mapping loss trace CSV")
    _add_common(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("eval", help="evaluate a trajectory (and renders)")
    p.add_argument("--seq", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--renders")
    p.add_argument("--masks")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="infer-mask -> track -> map -> eval")
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="motion model checkpoint (default: gt masks)")
    p.add_argument("--depth-dir")
    _add_common(p)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
