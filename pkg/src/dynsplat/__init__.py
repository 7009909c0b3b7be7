"""dynsplat: monocular dynamic-scene SLAM toolkit.

Motion-mask extraction over a FIFO feature queue, masked dense bundle
adjustment for pose tracking, and an uncertainty-aware incremental
Gaussian-splat map with a distractor-adaptive SSIM loss.
"""

__version__ = "0.1.0"
