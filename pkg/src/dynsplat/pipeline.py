"""End-to-end orchestration: mask inference -> tracking -> mapping -> eval.

Each stage is usable on its own (the CLI maps one subcommand to each); the
run() helper chains them on a sequence directory and emits metrics.csv.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig, config_echo
from .datasets import Sequence, load_tum_sequence
from .features import extract_features, load_depth
from .fileio import save_checkpoint, save_pgm, save_ppm
from .geometry import Pose, save_tum_trajectory
from .mapping import (KeyframeObservation, UncertaintyModel, adaptive_ssim_map,
                      insert_gaussians, optimize_map, uncertainty_train_step)
from .metrics import SequenceResult, emit_report, mask_iou, psnr
from .motion import MotionInferenceState, MotionModelParams, infer_mask
from .optim import Adam
from .splat import GaussianMap, render
from .tracking import (FrameGraph, evaluate_ate, masked_dba_solve,
                       save_cost_trace, select_keyframes_and_edges)

log = logging.getLogger(__name__)


def predict_masks(seq: Sequence, params: MotionModelParams,
                  cfg: PipelineConfig) -> list[np.ndarray]:
    state = MotionInferenceState(capacity=cfg.motion.queue_capacity)
    masks = []
    for frame in seq.frames:
        m = infer_mask(frame, state, params, cfg.backend,
                       radius=cfg.motion.dilation_radius)
        masks.append(m.data)
    return masks


def resolve_masks(seq: Sequence, cfg: PipelineConfig,
                  ckpt: str | None) -> tuple[list[np.ndarray], str]:
    """Prefer model inference when a checkpoint is given, else fall back to
    the sequence's ground-truth masks."""
    if ckpt is not None:
        params = MotionModelParams.load(ckpt)
        return predict_masks(seq, params, cfg), "predicted"
    if seq.gt_masks is not None:
        return [m.copy() for m in seq.gt_masks], "ground_truth"
    raise FileNotFoundError(
        "no motion checkpoint given and sequence has no masks_gt/")


def resolve_depths(seq: Sequence, depth_dir: str | None) -> list[np.ndarray]:
    if depth_dir is not None:
        return [load_depth(depth_dir, i).data for i in range(len(seq.frames))]
    if seq.gt_depths is not None:
        return [d.copy() for d in seq.gt_depths]
    raise FileNotFoundError("no depth source: pass --depth-dir or provide depth_gt/")


@dataclass
class TrackResult:
    graph: FrameGraph
    stamped_poses: list[tuple[float, Pose]]
    trace: list[tuple[int, float, float]]


def track_sequence(seq: Sequence, masks: list[np.ndarray],
                   depths: list[np.ndarray], cfg: PipelineConfig) -> TrackResult:
    graph = select_keyframes_and_edges(seq.frames, masks, depths, cfg.tracking,
                                       timestamps=seq.timestamps)
    h = seq.frames[0].pixels.shape[0]
    w = seq.frames[0].pixels.shape[1]
    g = cfg.tracking.grid_size
    intr_g = seq.intrinsics.scaled(g / w, g / h)
    trace = masked_dba_solve(graph, intr_g, cfg.tracking)
    stamped = [(kf.timestamp, kf.pose.copy()) for kf in graph.keyframes]
    return TrackResult(graph, stamped, trace)


@dataclass
class MapResult:
    gmap: GaussianMap
    observations: list[KeyframeObservation]
    keyframe_ids: list[int]
    trace: list[float]
    uncertainty: UncertaintyModel


def map_sequence(seq: Sequence, masks: list[np.ndarray], depths: list[np.ndarray],
                 keyframe_ids: list[int], kf_poses: list[Pose],
                 cfg: PipelineConfig) -> MapResult:
    """Incremental mapping over the keyframes at the given poses."""
    mcfg = cfg.mapping
    weights = mcfg.weights
    h, w = seq.frames[0].pixels.shape[:2]
    intr = seq.intrinsics
    gmap = GaussianMap()
    model = UncertaintyModel.init(cfg.backend.channels, mcfg.uncertainty_hidden,
                                  seed=cfg.seed)
    u_opt = Adam(lr=1e-2)
    rng = np.random.default_rng(cfg.seed)
    observations: list[KeyframeObservation] = []
    trace: list[float] = []
    for n, t in enumerate(keyframe_ids):
        img = seq.frames[t].pixels
        mask_t = masks[t]
        pose = kf_poses[n]
        insert_gaussians(gmap, img, depths[t], mask_t, pose, intr,
                         k_neighbors=mcfg.k_neighbors, rng=rng,
                         stride=mcfg.insert_stride,
                         truncate_sigma=mcfg.truncate_sigma)
        feats = extract_features(seq.frames[t], cfg.backend)
        res = render(gmap, pose, intr, h, w, truncate_sigma=mcfg.truncate_sigma)
        for _ in range(mcfg.uncertainty_steps):
            uncertainty_train_step(model, u_opt, feats.data, res.color, res.depth,
                                   img, depths[t], mask_t, weights)
        u_map = model.forward(feats.data, (h, w))
        observations.append(KeyframeObservation(img, depths[t], pose,
                                                1.0 - mask_t, u_map))
        window = observations[-mcfg.keyframe_window:]
        trace += optimize_map(gmap, window, intr, mcfg.iters_per_keyframe,
                              weights, lr=mcfg.learning_rate,
                              truncate_sigma=mcfg.truncate_sigma)
    if mcfg.final_iters:
        trace += optimize_map(gmap, observations, intr, mcfg.final_iters,
                              weights, lr=mcfg.learning_rate,
                              truncate_sigma=mcfg.truncate_sigma)
    return MapResult(gmap, observations, list(keyframe_ids), trace, model)


def evaluate_run(seq: Sequence, name: str, stamped_poses, map_result: MapResult,
                 masks_used: list[np.ndarray], mask_source: str,
                 cfg: PipelineConfig) -> SequenceResult:
    """Trajectory + static-region rendering metrics for one sequence."""
    ate_rmse = ate_std = float("nan")
    if seq.gt_poses:
        rmse_m, std_m = evaluate_ate(stamped_poses, seq.gt_poses)
        ate_rmse, ate_std = rmse_m * 100.0, std_m * 100.0
    eval_masks = seq.gt_masks if seq.gt_masks is not None else masks_used
    eval_source = "ground_truth" if seq.gt_masks is not None else mask_source
    h, w = seq.frames[0].pixels.shape[:2]
    psnrs, ssims = [], []
    for n, t in enumerate(map_result.keyframe_ids):
        pose = map_result.observations[n].pose
        res = render(map_result.gmap, pose, seq.intrinsics, h, w,
                     truncate_sigma=cfg.mapping.truncate_sigma)
        static = 1.0 - eval_masks[t]
        if static.sum() == 0:
            continue
        psnrs.append(psnr(res.color, seq.frames[t].pixels, static))
        smap, valid = adaptive_ssim_map(res.color, seq.frames[t].pixels, static,
                                        cfg.mapping.weights.ssim_window,
                                        n_min=cfg.mapping.weights.ssim_n_min)
        if valid.any():
            ssims.append(float(smap[valid].mean()))
    iou = float("nan")
    if seq.gt_masks is not None:
        ious = [mask_iou(masks_used[t], seq.gt_masks[t])
                for t in range(len(seq.frames))
                if seq.gt_masks[t].sum() > 0 or masks_used[t].sum() > 0]
        iou = float(np.mean(ious)) if ious else 1.0
    return SequenceResult(
        sequence=name,
        ate_rmse_cm=float(ate_rmse),
        ate_std_cm=float(ate_std),
        psnr_db=float(np.mean(psnrs)) if psnrs else float("nan"),
        ssim=float(np.mean(ssims)) if ssims else float("nan"),
        mask_iou=iou,
        extras={"eval_mask_source": eval_source, "mask_source": mask_source,
                "n_keyframes": len(map_result.keyframe_ids),
                "n_gaussians": len(map_result.gmap)},
    )


def run(seq_dir: str | Path, out_dir: str | Path, cfg: PipelineConfig,
        ckpt: str | None = None, depth_dir: str | None = None,
        name: str | None = None) -> SequenceResult:
    """Full chain on one sequence directory; writes artifacts to out_dir."""
    seq_dir = Path(seq_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or seq_dir.name
    seq = load_tum_sequence(seq_dir)
    if seq.skipped_lines:
        log.info("skipped %d malformed list lines", seq.skipped_lines)
    masks, mask_source = resolve_masks(seq, cfg, ckpt)
    depths = resolve_depths(seq, depth_dir)

    mask_dir = out_dir / "masks"
    mask_dir.mkdir(exist_ok=True)
    for i, m in enumerate(masks):
        save_pgm(mask_dir / f"{i:06d}.pgm", m)

    track = track_sequence(seq, masks, depths, cfg)
    save_tum_trajectory(out_dir / "traj.txt", track.stamped_poses)
    save_cost_trace(out_dir / "dba_trace.csv", track.trace)

    kf_ids = [kf.index for kf in track.graph.keyframes]
    kf_poses = [kf.pose for kf in track.graph.keyframes]
    map_result = map_sequence(seq, masks, depths, kf_ids, kf_poses, cfg)
    _save_map_checkpoint(map_result.gmap, out_dir / "map.ggd")
    save_loss_trace(out_dir / "map_trace.csv", map_result.trace)
    renders_dir = out_dir / "renders"
    renders_dir.mkdir(exist_ok=True)
    h, w = seq.frames[0].pixels.shape[:2]
    for n, t in enumerate(kf_ids):
        res = render(map_result.gmap, kf_poses[n], seq.intrinsics, h, w,
                     truncate_sigma=cfg.mapping.truncate_sigma)
        save_ppm(renders_dir / f"{t:06d}.ppm", np.clip(res.color, 0, 1))

    result = evaluate_run(seq, name, track.stamped_poses, map_result, masks,
                          mask_source, cfg)
    est = np.array([p.translation for _, p in track.stamped_poses])
    gt_assoc = [seq.gt_poses[j][1].translation
                for _, j in seq.associations] if seq.gt_poses else []
    trajectories = {name: (est[:, :2], np.array(gt_assoc)[:, :2])} if len(gt_assoc) else None
    emit_report([result], out_dir, trajectories, config_echo(cfg))
    return result


def save_loss_trace(path, trace: list[float]) -> None:
    lines = ["iter,loss"] + [f"{i},{v:.12g}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")


def _save_map_checkpoint(gmap: GaussianMap, path: Path) -> None:
    save_checkpoint(path, {
        "mu": gmap.mu, "opacity": gmap.opacity, "scale": gmap.scale,
        "quat": gmap.quat, "color": gmap.color,
        "static_flag": gmap.static_flag.astype(np.float64),
    })


def load_map_checkpoint(path: str | Path) -> GaussianMap:
    from .fileio import load_checkpoint

    arrays = load_checkpoint(path)
    return GaussianMap(arrays["mu"], arrays["opacity"], arrays["scale"],
                       arrays["quat"], arrays["color"],
                       arrays["static_flag"] > 0.5)
