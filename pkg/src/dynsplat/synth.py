"""Synthetic desk-scale sequences with exact ground truth.

The scene is a textured background plane plus an optional textured moving
disk (the distractor) on a nearer plane, ray-cast per pixel.  Ground-truth
poses, depths, and dynamic masks fall out of the same closed-form
intersection, so they are mutually consistent by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import ImageFrame
from .fileio import save_pgm, save_ppm, save_tensor
from .geometry import CameraIntrinsics, Pose, pixel_rays, save_tum_trajectory, so3_exp

FRAME_RATE = 30.0


def _random_texture(rng: np.random.Generator, n_waves: int = 6,
                    base: float = 0.5, contrast: float = 0.35,
                    freq_scale: float = 1.0):
    """Smooth per-channel Fourier texture over world (x, y) in meters."""
    freqs = rng.uniform(0.3, 1.6, size=(3, n_waves, 2)) * freq_scale
    phases = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
    amps = rng.uniform(0.3, 1.0, size=(3, n_waves))
    amps = amps / amps.sum(axis=1, keepdims=True) * contrast

    def tex(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape + (3,))
        for c in range(3):
            acc = np.full_like(x, base)
            for k in range(n_waves):
                acc = acc + amps[c, k] * np.sin(
                    2 * np.pi * (freqs[c, k, 0] * x + freqs[c, k, 1] * y) + phases[c, k]
                )
            out[..., c] = acc
        return np.clip(out, 0.02, 0.98)

    return tex


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    n_frames: int = 30
    seed: int = 0
    fx: float = 70.0
    fy: float = 70.0
    background_depth: float = 3.0        # world plane z = const
    distractor_depth: float = 1.8
    distractor_radius: float = 0.45      # meters; <= 0 disables the distractor
    distractor_start: tuple[float, float] = (-0.45, 0.0)
    distractor_velocity: tuple[float, float] = (0.035, 0.0)  # meters / frame
    camera_translation_step: tuple[float, float, float] = (0.01, 0.0, 0.0)
    camera_yaw_step: float = 0.0         # radians / frame, about camera y
    # texture (base level, contrast, frequency scale); the distractor class
    # is deliberately distinctive, like recognizable moving objects in real
    # footage
    background_texture: tuple[float, float, float] = (0.42, 0.22, 1.0)
    distractor_texture: tuple[float, float, float] = (0.82, 0.14, 2.5)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy,
                                (self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def distractor_moving(self) -> bool:
        return self.distractor_radius > 0 and (
            abs(self.distractor_velocity[0]) > 0 or abs(self.distractor_velocity[1]) > 0
        )


@dataclass
class SyntheticSequence:
    spec: SceneSpec
    frames: list[ImageFrame]
    poses: list[Pose]                  # world <- camera, ground truth
    masks: list[np.ndarray]            # HxW {0,1}, 1 = moving distractor
    depths: list[np.ndarray]           # HxW camera-frame depth, meters
    timestamps: list[float] = field(default_factory=list)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.spec.intrinsics

    def stamped_poses(self) -> list[tuple[float, Pose]]:
        return list(zip(self.timestamps, self.poses))


def camera_pose(spec: SceneSpec, t: int) -> Pose:
    dx, dy, dz = spec.camera_translation_step
    rot = so3_exp([0.0, spec.camera_yaw_step * t, 0.0])
    return Pose(rot, np.array([dx * t, dy * t, dz * t]))


def render_frame(spec: SceneSpec, t: int, tex_bg, tex_d):
    intr = spec.intrinsics
    pose = camera_pose(spec, t)
    dirs_cam = pixel_rays(intr, spec.height, spec.width)       # z component = 1
    dirs_w = dirs_cam @ pose.rotation.T
    origin = pose.translation

    def plane_hit(z_plane: float):
        denom = dirs_w[..., 2]
        with np.errstate(divide="ignore"):
            s = (z_plane - origin[2]) / denom
        ok = (denom > 1e-9) & (s > 1e-6)
        pts = origin + s[..., None] * dirs_w
        return s, pts, ok

    s_bg, pts_bg, ok_bg = plane_hit(spec.background_depth)
    if not np.all(ok_bg):
        raise ValueError("camera must face the background plane everywhere")
    color = tex_bg(pts_bg[..., 0], pts_bg[..., 1])
    depth = s_bg.copy()  # ray z-component is 1, so the parameter is camera depth
    hit_d = np.zeros((spec.height, spec.width), dtype=bool)

    if spec.distractor_radius > 0:
        s_d, pts_d, ok_d = plane_hit(spec.distractor_depth)
        cx = spec.distractor_start[0] + spec.distractor_velocity[0] * t
        cy = spec.distractor_start[1] + spec.distractor_velocity[1] * t
        local_x = pts_d[..., 0] - cx
        local_y = pts_d[..., 1] - cy
        hit_d = ok_d & (local_x**2 + local_y**2 <= spec.distractor_radius**2)
        color[hit_d] = tex_d(local_x[hit_d], local_y[hit_d])
        depth[hit_d] = s_d[hit_d]

    mask = (hit_d & spec.distractor_moving()).astype(np.float64)
    return color, depth, mask, pose


def generate_sequence(spec: SceneSpec) -> SyntheticSequence:
    """Deterministic for a fixed spec (seed included)."""
    if spec.n_frames < 2:
        raise ValueError("need at least 2 frames")
    if all(abs(v) < 1e-12 for v in spec.camera_translation_step) and spec.camera_yaw_step == 0:
        warnings.warn("degenerate camera path: zero baseline", stacklevel=2)
    rng = np.random.default_rng(spec.seed)
    b = spec.background_texture
    d = spec.distractor_texture
    tex_bg = _random_texture(rng, base=b[0], contrast=b[1], freq_scale=b[2])
    tex_d = _random_texture(rng, base=d[0], contrast=d[1], freq_scale=d[2])
    frames, poses, masks, depths, stamps = [], [], [], [], []
    for t in range(spec.n_frames):
        color, depth, mask, pose = render_frame(spec, t, tex_bg, tex_d)
        frames.append(ImageFrame(t, color, timestamp=t / FRAME_RATE))
        poses.append(pose)
        masks.append(mask)
        depths.append(depth)
        stamps.append(t / FRAME_RATE)
    return SyntheticSequence(spec, frames, poses, masks, depths, stamps)


def write_sequence(seq: SyntheticSequence, outdir: str | Path) -> None:
    """Sequence directory layout shared with the TUM-style loader:

    rgb/%06d.ppm, masks_gt/%06d.pgm, depth_gt/%06d.ggdt,
    rgb.txt, groundtruth.txt, intrinsics.txt
    """
    outdir = Path(outdir)
    for sub in ("rgb", "masks_gt", "depth_gt"):
        (outdir / sub).mkdir(parents=True, exist_ok=True)
    rgb_lines = []
    for t, frame in enumerate(seq.frames):
        name = f"{t:06d}"
        save_ppm(outdir / "rgb" / f"{name}.ppm", frame.pixels)
        save_pgm(outdir / "masks_gt" / f"{name}.pgm", seq.masks[t])
        save_tensor(outdir / "depth_gt" / f"{name}.ggdt", seq.depths[t])
        rgb_lines.append(f"{seq.timestamps[t]:.6f} rgb/{name}.ppm")
    (outdir / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    save_tum_trajectory(outdir / "groundtruth.txt", seq.stamped_poses())
    intr = seq.intrinsics
    (outdir / "intrinsics.txt").write_text(
        f"{intr.fx} {intr.fy} {intr.cx} {intr.cy}\n"
    )


def blob_training_set(seed: int, n_sequences: int, n_frames: int = 6,
                      size: int = 64, moving: bool = True,
                      static_every: int = 0) -> list[SyntheticSequence]:
    """Static-camera sequences for motion-model training: a textured disk
    wandering over a fixed textured background (or no disk at all).

    static_every > 0 replaces every k-th sequence with a disk-free one so
    the model also sees all-static supervision; every other sequence adds
    slight lateral camera motion for robustness to tracking-style input.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_sequences):
        want_blob = moving and not (static_every and (i + 1) % static_every == 0)
        if want_blob:
            angle = rng.uniform(0, 2 * np.pi)
            speed = rng.uniform(0.05, 0.08)
            vel = (speed * np.cos(angle), speed * np.sin(angle))
            start = (rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25))
            radius = rng.uniform(0.30, 0.38)
        else:
            vel, start, radius = (0.0, 0.0), (0.0, 0.0), 0.0
        cam_step = (0.02, 0.0, 0.0) if i % 2 == 1 else (0.0, 0.0, 0.0)
        spec = SceneSpec(
            height=size, width=size, n_frames=n_frames,
            seed=int(rng.integers(0, 2**31)),
            distractor_radius=radius, distractor_start=start,
            distractor_velocity=vel,
            camera_translation_step=cam_step,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out.append(generate_sequence(spec))
    return out
