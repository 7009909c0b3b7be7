"""Per-frame feature maps and metric depth, from a pluggable backend.

Two backends: ``synthetic`` pools the image into non-overlapping patches
and applies a fixed seeded random linear projection to C channels (cheap,
deterministic, keeps spatial locality); ``file`` ingests tensors written
by an external network.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fileio import load_tensor


class IngestionError(ValueError):
    """File backend input missing or with unexpected shape."""


class DepthValidationError(ValueError):
    """Depth grid contains nonpositive or non-finite values."""


@dataclass
class ImageFrame:
    index: int
    pixels: np.ndarray  # HxWx3, values in [0,1]
    timestamp: float | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        h, w = self.pixels.shape[:2]
        if h < 8 or w < 8:
            raise ValueError(f"frame {self.index}: image must be at least 8x8, got {h}x{w}")
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"frame {self.index}: expected HxWx3 pixels")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError(f"frame {self.index}: channel values outside [0,1]")


@dataclass
class FeatureMap:
    data: np.ndarray  # H'xW'xC
    source_frame: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map has non-finite entries")


@dataclass
class DepthEstimate:
    data: np.ndarray  # HxW, meters, > 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        bad = int(np.sum(~(np.isfinite(self.data) & (self.data > 0))))
        if bad:
            raise DepthValidationError(
                f"depth grid has {bad} nonpositive or non-finite pixel(s)"
            )


@dataclass
class BackendConfig:
    backend: str = "synthetic"  # "synthetic" | "file"
    feat_height: int = 16
    feat_width: int = 16
    channels: int = 32
    seed: int = 0
    feature_dir: str | None = None
    depth_dir: str | None = None

    def __post_init__(self):
        if self.backend not in ("synthetic", "file"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if min(self.feat_height, self.feat_width, self.channels) <= 0:
            raise ValueError("feature dimensions must be positive")


def patch_average(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Adaptive average pooling over non-overlapping (interval) patches.

    Cell (i, j) averages input rows [floor(i*H/out_h), ceil((i+1)*H/out_h))
    and likewise for columns, so any (H, W) -> (out_h, out_w) works and the
    map is linear in the input.
    """
    h, w = image.shape[:2]
    out = np.empty((out_h, out_w) + image.shape[2:], dtype=np.float64)
    row_edges = [(int(np.floor(i * h / out_h)), int(np.ceil((i + 1) * h / out_h))) for i in range(out_h)]
    col_edges = [(int(np.floor(j * w / out_w)), int(np.ceil((j + 1) * w / out_w))) for j in range(out_w)]
    for i, (r0, r1) in enumerate(row_edges):
        band = image[r0:r1]
        for j, (c0, c1) in enumerate(col_edges):
            out[i, j] = band[:, c0:c1].mean(axis=(0, 1))
    return out


def _projection_matrix(cfg: BackendConfig) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    return rng.standard_normal((3, cfg.channels)) / np.sqrt(3.0)


def extract_features(frame: ImageFrame, cfg: BackendConfig) -> FeatureMap:
    """Deterministic per-frame feature map of shape (H', W', C)."""
    if cfg.backend == "file":
        if cfg.feature_dir is None:
            raise IngestionError("file backend requires feature_dir")
        path = Path(cfg.feature_dir) / f"{frame.index:06d}.ggdt"
        if not path.is_file():
            raise IngestionError(f"missing feature file {path}")
        data = load_tensor(path)
        expected = (cfg.feat_height, cfg.feat_width, cfg.channels)
        if data.shape != expected:
            raise IngestionError(
                f"{path}: expected shape {expected}, got {data.shape}"
            )
        return FeatureMap(data, frame.index)
    pooled = patch_average(frame.pixels, cfg.feat_height, cfg.feat_width)
    data = pooled @ _projection_matrix(cfg)  # zero bias: linear in intensities
    return FeatureMap(data, frame.index)


def load_depth(depth_dir: str | Path, frame_index: int) -> DepthEstimate:
    path = Path(depth_dir) / f"{frame_index:06d}.ggdt"
    if not path.is_file():
        raise IngestionError(f"missing depth file {path}")
    data = load_tensor(path)
    if data.ndim != 2:
        raise IngestionError(f"{path}: expected rank-2 depth grid, got rank {data.ndim}")
    return DepthEstimate(data)
