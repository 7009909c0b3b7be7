"""TUM-layout sequence loading with timestamp association."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import ImageFrame
from .fileio import load_image, load_pgm
from .geometry import CameraIntrinsics, Pose, load_tum_trajectory
from .tracking import associate_timestamps

# fallback when the directory ships no intrinsics.txt (TUM default camera)
DEFAULT_INTRINSICS = CameraIntrinsics(525.0, 525.0, 319.5, 239.5)


@dataclass
class Sequence:
    frames: list[ImageFrame]
    gt_poses: list[tuple[float, Pose]]
    intrinsics: CameraIntrinsics
    associations: list[tuple[int, int]]     # (frame idx, gt idx) within 20 ms
    gt_masks: list[np.ndarray] | None = None
    gt_depths: list[np.ndarray] | None = None
    skipped_lines: int = 0
    root: Path | None = None

    @property
    def timestamps(self) -> list[float]:
        return [f.timestamp for f in self.frames]


def load_tum_sequence(root: str | Path, max_dt: float = 0.02,
                      load_gt_extras: bool = True) -> Sequence:
    """Load a TUM-layout directory: rgb/ + rgb.txt + groundtruth.txt, with
    optional intrinsics.txt, masks_gt/, depth_gt/ (our synthetic layout).

    Malformed list lines are skipped and counted.
    """
    root = Path(root)
    rgb_list = root / "rgb.txt"
    gt_file = root / "groundtruth.txt"
    if not rgb_list.is_file() or not gt_file.is_file():
        raise FileNotFoundError(f"{root}: expected rgb.txt and groundtruth.txt")
    skipped = 0
    frames: list[ImageFrame] = []
    for line in rgb_list.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            skipped += 1
            continue
        try:
            ts = float(parts[0])
        except ValueError:
            skipped += 1
            continue
        img_path = root / parts[1]
        if not img_path.is_file():
            skipped += 1
            continue
        frames.append(ImageFrame(len(frames), load_image(img_path), timestamp=ts))
    gt_poses, gt_skipped = load_tum_trajectory(gt_file)
    skipped += gt_skipped

    intr = DEFAULT_INTRINSICS
    intr_file = root / "intrinsics.txt"
    if intr_file.is_file():
        vals = [float(v) for v in intr_file.read_text().split()[:4]]
        intr = CameraIntrinsics(*vals)

    associations = associate_timestamps([f.timestamp for f in frames],
                                        [t for t, _ in gt_poses], max_dt)
    masks = depths = None
    if load_gt_extras:
        from .fileio import load_tensor

        mask_dir = root / "masks_gt"
        if mask_dir.is_dir():
            masks = [load_pgm(mask_dir / f"{i:06d}.pgm") for i in range(len(frames))]
            masks = [(m > 0.5).astype(np.float64) for m in masks]
        depth_dir = root / "depth_gt"
        if depth_dir.is_dir():
            depths = [load_tensor(depth_dir / f"{i:06d}.ggdt") for i in range(len(frames))]
    return Sequence(frames, gt_poses, intr, associations, masks, depths,
                    skipped, root)
