"""Uncertainty-aware incremental mapping on the Gaussian map.

Pieces, in pipeline order: insertion of new Gaussians with KD-tree static
fill for occluded (dynamic) regions; a shallow per-pixel uncertainty
network trained against rendering error with a motion-prior target; the
mapping loss (uncertainty-divided photometric + isotropy regularizer +
distractor-adaptive SSIM); and a projected-Adam optimization loop over
all Gaussian attributes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .fileio import load_checkpoint, save_checkpoint
from .geometry import CameraIntrinsics, Pose, unproject
from .motion import bilinear_upsample, bilinear_upsample_adjoint
from .optim import Adam
from .splat import GaussianMap, render, render_backward

log = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
U_FLOOR = 1e-3


# --- windowed sums -------------------------------------------------------------


def window_sum(arr: np.ndarray, window: int) -> np.ndarray:
    """Sum over an odd (window x window) box around each pixel, windows
    clipped at the image boundary; integral-image implementation."""
    pad = window // 2
    h, w = arr.shape
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = arr.cumsum(axis=0).cumsum(axis=1)
    r0 = np.clip(np.arange(h) - pad, 0, h)
    r1 = np.clip(np.arange(h) + pad + 1, 0, h)
    c0 = np.clip(np.arange(w) - pad, 0, w)
    c1 = np.clip(np.arange(w) + pad + 1, 0, w)
    return (ii[np.ix_(r1, c1)] - ii[np.ix_(r0, c1)]
            - ii[np.ix_(r1, c0)] + ii[np.ix_(r0, c0)])


def _window_sum_direct(arr: np.ndarray, window: int) -> np.ndarray:
    """Same box sum by explicit window enumeration (distinct summation
    path, kept for the S == 1 reference via plain_ssim_map)."""
    pad = window // 2
    h, w = arr.shape
    padded = np.zeros((h + 2 * pad, w + 2 * pad))
    padded[pad:pad + h, pad:pad + w] = arr
    return sliding_window_view(padded, (window, window)).sum(axis=(2, 3))


def plain_ssim_map(img_x: np.ndarray, img_y: np.ndarray, window: int = 11,
                   c1: float = SSIM_C1, c2: float = SSIM_C2) -> np.ndarray:
    """Uniform-window SSIM map (channel-averaged), boundary windows clipped.

    Deliberately built on a different summation path (explicit window
    enumeration) so it serves as a distinct reference for the adaptive
    variant's S == 1 case.
    """
    h, w = img_x.shape[:2]
    count = _window_sum_direct(np.ones((h, w)), window)
    out = np.zeros((h, w))
    xs = img_x if img_x.ndim == 3 else img_x[..., None]
    ys = img_y if img_y.ndim == 3 else img_y[..., None]
    for c in range(xs.shape[2]):
        x, y = xs[..., c], ys[..., c]
        mux = _window_sum_direct(x, window) / count
        muy = _window_sum_direct(y, window) / count
        m2x = _window_sum_direct(x * x, window) / count
        m2y = _window_sum_direct(y * y, window) / count
        mxy = _window_sum_direct(x * y, window) / count
        varx = m2x - mux**2
        vary = m2y - muy**2
        cov = mxy - mux * muy
        out += ((2 * mux * muy + c1) * (2 * cov + c2)) / (
            (mux**2 + muy**2 + c1) * (varx + vary + c2))
    return out / xs.shape[2]


def adaptive_ssim_map(img_x: np.ndarray, img_y: np.ndarray, static: np.ndarray,
                      window: int = 11, c1: float = SSIM_C1, c2: float = SSIM_C2,
                      n_min: int = 2):
    """Distractor-adaptive SSIM: window statistics are renormalized over the
    static pixels inside each window, so dynamic pixels neither contribute
    nor pollute neighbouring windows.

    Returns (ssim_map, valid); pixels whose window holds fewer than n_min
    static pixels are invalid and must be excluded from any loss mean.
    """
    h, w = static.shape
    n_ad = window_sum(static, window)
    valid = n_ad >= max(n_min, 1)
    n_safe = np.where(valid, n_ad, 1.0)
    xs = img_x if img_x.ndim == 3 else img_x[..., None]
    ys = img_y if img_y.ndim == 3 else img_y[..., None]
    out = np.zeros((h, w))
    for c in range(xs.shape[2]):
        x, y = xs[..., c] * static, ys[..., c] * static
        mux = window_sum(x, window) / n_safe
        muy = window_sum(y, window) / n_safe
        m2x = window_sum(x * xs[..., c], window) / n_safe
        m2y = window_sum(y * ys[..., c], window) / n_safe
        mxy = window_sum(x * ys[..., c], window) / n_safe
        varx = m2x - mux**2
        vary = m2y - muy**2
        cov = mxy - mux * muy
        out += ((2 * mux * muy + c1) * (2 * cov + c2)) / (
            (mux**2 + muy**2 + c1) * (varx + vary + c2))
    out = np.where(valid, out / xs.shape[2], 0.0)
    return out, valid


def adaptive_ssim_backward(img_x: np.ndarray, img_y: np.ndarray, static: np.ndarray,
                           upstream: np.ndarray, window: int = 11,
                           c1: float = SSIM_C1, c2: float = SSIM_C2,
                           n_min: int = 2) -> np.ndarray:
    """d(sum upstream * ssim_map)/d img_x. upstream must be zero on invalid
    pixels; static pixels' gradient only (dynamic pixels get exactly 0)."""
    n_ad = window_sum(static, window)
    valid = n_ad >= max(n_min, 1)
    n_safe = np.where(valid, n_ad, 1.0)
    g = np.where(valid, upstream, 0.0)
    xs = img_x if img_x.ndim == 3 else img_x[..., None]
    ys = img_y if img_y.ndim == 3 else img_y[..., None]
    nc = xs.shape[2]
    grad = np.zeros_like(xs, dtype=np.float64)
    for c in range(nc):
        x, y = xs[..., c], ys[..., c]
        sx, sy = x * static, y * static
        mux = window_sum(sx, window) / n_safe
        muy = window_sum(sy, window) / n_safe
        m2x = window_sum(sx * x, window) / n_safe
        mxy = window_sum(sx * y, window) / n_safe
        m2y = window_sum(sy * y, window) / n_safe
        varx = m2x - mux**2
        vary = m2y - muy**2
        cov = mxy - mux * muy
        a1 = 2 * mux * muy + c1
        a2 = 2 * cov + c2
        b1 = mux**2 + muy**2 + c1
        b2 = varx + vary + c2
        ssim = a1 * a2 / (b1 * b2)
        ds_dmux = (2 * muy * a2 - 2 * muy * a1) / (b1 * b2) \
            - ssim * (2 * mux / b1 - 2 * mux / b2)
        ds_dm2x = -ssim / b2
        ds_dmxy = 2 * a1 / (b1 * b2)
        gc = g / nc
        coeff_mu = window_sum(gc * ds_dmux / n_safe, window)
        coeff_m2 = window_sum(gc * ds_dm2x / n_safe, window)
        coeff_xy = window_sum(gc * ds_dmxy / n_safe, window)
        grad[..., c] = static * (coeff_mu + 2 * x * coeff_m2 + y * coeff_xy)
    return grad if img_x.ndim == 3 else grad[..., 0]


# --- uncertainty model ----------------------------------------------------------


@dataclass
class UncertaintyModel:
    """Shallow per-pixel MLP from backbone features to a positive scalar;
    softplus output with a small floor keeps it strictly positive."""

    channels: int
    hidden: int = 16
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, channels: int, hidden: int = 16, seed: int = 0) -> "UncertaintyModel":
        rng = np.random.default_rng(seed)
        arrays = {
            "w1": rng.standard_normal((channels, hidden)) / np.sqrt(channels),
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal((hidden, 1)) / np.sqrt(hidden),
            "b2": np.zeros(1),
        }
        return cls(channels=channels, hidden=hidden, arrays=arrays)

    def forward(self, features: np.ndarray, out_hw: tuple[int, int],
                cache: dict | None = None) -> np.ndarray:
        hp, wp, c = features.shape
        f = features.reshape(-1, c)
        z1 = np.tanh(f @ self.arrays["w1"] + self.arrays["b1"])
        raw = (z1 @ self.arrays["w2"] + self.arrays["b2"]).reshape(hp, wp)
        u_low = np.logaddexp(0.0, raw) + U_FLOOR
        u = bilinear_upsample(u_low, out_hw[0], out_hw[1])
        if cache is not None:
            cache.update(f=f, z1=z1, raw=raw, hp=hp, wp=wp)
        return u

    def backward(self, du: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        dlow = bilinear_upsample_adjoint(du, cache["hp"], cache["wp"])
        draw = (dlow * _sigmoid(cache["raw"])).reshape(-1, 1)
        grads = {
            "w2": cache["z1"].T @ draw,
            "b2": draw.sum(axis=0),
        }
        dz1 = draw @ self.arrays["w2"].T
        dpre = dz1 * (1.0 - cache["z1"] ** 2)
        grads["w1"] = cache["f"].T @ dpre
        grads["b1"] = dpre.sum(axis=0)
        return grads

    def save(self, path) -> None:
        meta = {"meta_channels": np.array([self.channels]),
                "meta_hidden": np.array([self.hidden])}
        save_checkpoint(path, {**self.arrays, **meta})

    @classmethod
    def load(cls, path) -> "UncertaintyModel":
        arrays = load_checkpoint(path)
        channels = int(arrays.pop("meta_channels")[0])
        hidden = int(arrays.pop("meta_hidden")[0])
        return cls(channels=channels, hidden=hidden, arrays=arrays)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


@dataclass
class MappingLossWeights:
    # mapping loss (rendered vs input)
    lam_photo: float = 1.0
    lam_iso: float = 10.0
    lam_ssim: float = 0.2
    lambda_d: float = 0.5          # depth/color balance inside the photometric term
    # uncertainty loss
    u_lam_render: float = 1.0
    u_lam_prior: float = 1.0
    u_lam_reg: float = 0.1
    t_max: float = 0.1             # target inverse uncertainty on dynamic pixels
    ssim_window: int = 11
    ssim_n_min: int = 2

    def __post_init__(self):
        vals = [self.lam_photo, self.lam_iso, self.lam_ssim, self.lambda_d,
                self.u_lam_render, self.u_lam_prior, self.u_lam_reg]
        if min(vals) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")


def l3dgs_loss(i_r: np.ndarray, d_r: np.ndarray, image: np.ndarray,
               d_est: np.ndarray, u_map: np.ndarray, lambda_d: float) -> float:
    """Uncertainty-divided photometric + depth L1 (unmasked form)."""
    u2 = u_map**2
    lc = float(np.mean(np.abs(i_r - image) / u2[..., None]))
    ld = float(np.mean(np.abs(d_r - d_est) / u2))
    return (1.0 - lambda_d) * lc + lambda_d * ld


def uncertainty_loss(u_map: np.ndarray, i_r: np.ndarray, d_r: np.ndarray,
                     image: np.ndarray, d_est: np.ndarray, mask: np.ndarray,
                     weights: MappingLossWeights, want_grad: bool = False):
    """Loss for the uncertainty net: rendering error divided by U^2, a
    motion-prior term pulling 1/U toward t_max on dynamic pixels, and a
    log barrier keeping U from growing without bound."""
    u2 = u_map**2
    res_c = np.abs(i_r - image).sum(axis=2)
    res_d = np.abs(d_r - d_est)
    n = u_map.size
    l_render = (1.0 - weights.lambda_d) * float(np.mean(np.abs(i_r - image) / u2[..., None])) \
        + weights.lambda_d * float(np.mean(res_d / u2))
    inv_u = 1.0 / u_map
    l_prior = float(np.sum(mask * np.abs(inv_u - weights.t_max)))
    l_reg = float(np.mean(np.log(u_map)))
    loss = (weights.u_lam_render * l_render + weights.u_lam_prior * l_prior
            + weights.u_lam_reg * l_reg)
    if not want_grad:
        return loss
    du = np.zeros_like(u_map)
    du += weights.u_lam_render * (1.0 - weights.lambda_d) * res_c * (-2.0 / u_map**3) / (3 * n)
    du += weights.u_lam_render * weights.lambda_d * res_d * (-2.0 / u_map**3) / n
    du += weights.u_lam_prior * mask * np.sign(inv_u - weights.t_max) * (-1.0 / u2)
    du += weights.u_lam_reg / (n * u_map)
    return loss, du


def uncertainty_train_step(model: UncertaintyModel, optimizer: Adam,
                           features: np.ndarray, i_r, d_r, image, d_est, mask,
                           weights: MappingLossWeights) -> float:
    cache: dict = {}
    u = model.forward(features, image.shape[:2], cache)
    loss, du = uncertainty_loss(u, i_r, d_r, image, d_est, mask, weights,
                                want_grad=True)
    grads = model.backward(du, cache)
    optimizer.step(model.arrays, grads)
    return loss


# --- insertion -------------------------------------------------------------------


def _retire_revealed_fills(gmap: GaussianMap, mask: np.ndarray, pose, intr,
                           h: int, w: int) -> int:
    """Drop occlusion-fill placeholders whose pixel is now observed static:
    the background they stood in for is visible, so the real observation
    replaces the guess."""
    fills = ~gmap.static_flag
    if not fills.any():
        return 0
    cam = (gmap.mu[fills] - pose.translation) @ pose.rotation
    z = cam[:, 2]
    front = z > 1e-6
    u = np.where(front, intr.fx * cam[:, 0] / np.where(front, z, 1.0) + intr.cx, -1)
    v = np.where(front, intr.fy * cam[:, 1] / np.where(front, z, 1.0) + intr.cy, -1)
    ui = np.round(u).astype(int)
    vi = np.round(v).astype(int)
    inside = front & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
    revealed = inside.copy()
    revealed[inside] = mask[vi[inside], ui[inside]] < 0.5
    if not revealed.any():
        return 0
    keep = np.ones(len(gmap), dtype=bool)
    keep[np.flatnonzero(fills)[revealed]] = False
    gmap.keep(keep)
    return int(revealed.sum())


@dataclass
class InsertionRecord:
    """What insert_gaussians did, for inspection and oracle testing."""

    static_px: np.ndarray          # (Ns, 2) (u, v) static candidates
    static_depth: np.ndarray       # (Ns,)
    static_color: np.ndarray       # (Ns, 3)
    fill_px: np.ndarray            # (Nf, 2) dynamic candidates that got filled
    fill_depth: np.ndarray         # (Nf,) sampled neighbor depth
    fill_color: np.ndarray         # (Nf, 3) sampled neighbor color
    skipped_dynamic: int = 0


def insert_gaussians(gmap: GaussianMap, image: np.ndarray, depth_map: np.ndarray,
                     mask: np.ndarray, pose: Pose, intr: CameraIntrinsics,
                     k_neighbors: int = 10, rng: np.random.Generator | None = None,
                     stride: int = 1, alpha_threshold: float = 0.5,
                     base_opacity: float = 0.5, base_radius: float = 0.1,
                     fill_scale_factor: float = 2.0, fill_opacity: float = 0.8,
                     truncate_sigma: float | None = 3.0) -> InsertionRecord:
    """Add Gaussians for newly observed pixels of one keyframe.

    Candidates are stride-grid pixels not yet explained by the map: static
    pixels count only alpha from static-flagged Gaussians (occlusion fills
    are placeholders, so background revealed from behind a distractor
    still gets real Gaussians), dynamic pixels count total alpha. Static
    candidates unproject at their own depth with the pixel color, opacity
    0.5, isotropic radius 0.1. Dynamic candidates sample one of their k
    nearest static candidates (KD-tree on pixel coordinates) and take its
    depth and color, then get expanded scale and raised opacity to counter
    sparsity in occluded regions.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    h, w = depth_map.shape
    _retire_revealed_fills(gmap, mask, pose, intr, h, w)
    if len(gmap):
        alpha_total = render(gmap, pose, intr, h, w,
                             truncate_sigma=truncate_sigma).alpha
        if gmap.static_flag.all():
            alpha_static = alpha_total
        else:
            static_part = GaussianMap(gmap.mu[gmap.static_flag],
                                      gmap.opacity[gmap.static_flag],
                                      gmap.scale[gmap.static_flag],
                                      gmap.quat[gmap.static_flag],
                                      gmap.color[gmap.static_flag],
                                      gmap.static_flag[gmap.static_flag])
            alpha_static = render(static_part, pose, intr, h, w,
                                  truncate_sigma=truncate_sigma).alpha
    else:
        alpha_total = alpha_static = np.zeros((h, w))
    vv, uu = np.mgrid[0:h:stride, 0:w:stride]
    cand_u = uu.reshape(-1)
    cand_v = vv.reshape(-1)
    dyn_all = mask[cand_v, cand_u] > 0.5
    seen = np.where(dyn_all, alpha_total[cand_v, cand_u],
                    alpha_static[cand_v, cand_u])
    new = seen < alpha_threshold
    cand_u, cand_v = cand_u[new], cand_v[new]
    dyn = mask[cand_v, cand_u] > 0.5
    su, sv = cand_u[~dyn], cand_v[~dyn]
    du_, dv_ = cand_u[dyn], cand_v[dyn]

    static_px = np.stack([su, sv], axis=1) if su.size else np.zeros((0, 2))
    static_depth = depth_map[sv, su] if su.size else np.zeros(0)
    static_color = image[sv, su] if su.size else np.zeros((0, 3))

    def _append(px_u, px_v, depths, colors, radius, opac, flag):
        if px_u.size == 0:
            return
        pix = np.stack([px_u, px_v], axis=1).astype(np.float64)
        cam = unproject(pix, depths, intr)
        world = pose.apply(cam)
        n = px_u.size
        gmap.append(world, np.full(n, opac), np.full((n, 3), radius),
                    np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), colors,
                    np.full(n, flag, dtype=bool))

    _append(su, sv, static_depth, static_color, base_radius, base_opacity, True)

    record = InsertionRecord(static_px, static_depth, static_color,
                             np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))
    if du_.size:
        if su.size == 0:
            log.warning("no static candidates in frame; skipping occlusion "
                        "fill for %d dynamic pixels", du_.size)
            record.skipped_dynamic = int(du_.size)
            return record
        tree = cKDTree(static_px)
        kq = min(k_neighbors, su.size)
        _, nn = tree.query(np.stack([du_, dv_], axis=1), k=kq)
        nn = np.atleast_2d(nn)
        if nn.shape[0] != du_.size:  # k == 1 returns transposed shape
            nn = nn.reshape(du_.size, kq)
        pick = rng.integers(0, kq, size=du_.size)
        chosen = nn[np.arange(du_.size), pick]
        fill_depth = static_depth[chosen]
        fill_color = static_color[chosen]
        _append(du_, dv_, fill_depth, fill_color,
                base_radius * fill_scale_factor, fill_opacity, False)
        record.fill_px = np.stack([du_, dv_], axis=1)
        record.fill_depth = fill_depth
        record.fill_color = fill_color
    gmap.project_valid()
    return record


# --- mapping loss and optimization ------------------------------------------------


def isotropy_loss(scale: np.ndarray, want_grad: bool = False):
    """Mean over Gaussians of ||scale - mean(scale)||_1 (anisotropy penalty)."""
    if scale.shape[0] == 0:
        return (0.0, np.zeros_like(scale)) if want_grad else 0.0
    mean_s = scale.mean(axis=1, keepdims=True)
    dev = scale - mean_s
    loss = float(np.abs(dev).sum(axis=1).mean())
    if not want_grad:
        return loss
    sgn = np.sign(dev)
    grad = (sgn - sgn.mean(axis=1, keepdims=True)) / scale.shape[0]
    return loss, grad


def mapping_loss(gmap: GaussianMap, pose: Pose, intr: CameraIntrinsics,
                 image: np.ndarray, d_est: np.ndarray, u_map: np.ndarray,
                 static: np.ndarray, weights: MappingLossWeights,
                 want_grads: bool = False, truncate_sigma: float | None = 3.0,
                 background=(0.0, 0.0, 0.0)):
    """Masked Eq.-style mapping loss. Static-masked photometric term (so
    dynamic pixels carry exactly zero gradient), isotropy regularizer, and
    1 - mean valid adaptive SSIM."""
    h, w = image.shape[:2]
    res = render(gmap, pose, intr, h, w, background=background,
                 truncate_sigma=truncate_sigma, want_cache=want_grads)
    u2 = u_map**2
    n_static = float(static.sum())
    if n_static > 0:
        lc = float(np.sum(static[..., None] * np.abs(res.color - image) / u2[..., None])
                   / (3.0 * n_static))
        ld = float(np.sum(static * np.abs(res.depth - d_est) / u2) / n_static)
    else:
        lc = ld = 0.0
    l_photo = (1.0 - weights.lambda_d) * lc + weights.lambda_d * ld

    ssim_map, valid = adaptive_ssim_map(res.color, image, static,
                                        weights.ssim_window, n_min=weights.ssim_n_min)
    n_valid = int(valid.sum())
    l_ssim = float(1.0 - ssim_map[valid].mean()) if n_valid else 0.0

    l_iso = isotropy_loss(gmap.scale)
    total = (weights.lam_photo * l_photo + weights.lam_iso * l_iso
             + weights.lam_ssim * l_ssim)
    parts = {"photo": l_photo, "iso": l_iso, "ssim": l_ssim,
             "render": res}
    if not want_grads:
        return total, parts

    dcolor = np.zeros_like(res.color)
    ddepth = np.zeros_like(res.depth)
    if n_static > 0:
        dcolor += (weights.lam_photo * (1.0 - weights.lambda_d)
                   * static[..., None] * np.sign(res.color - image)
                   / u2[..., None] / (3.0 * n_static))
        ddepth += (weights.lam_photo * weights.lambda_d
                   * static * np.sign(res.depth - d_est) / u2 / n_static)
    if n_valid:
        upstream = np.where(valid, -weights.lam_ssim / n_valid, 0.0)
        dcolor += adaptive_ssim_backward(res.color, image, static, upstream,
                                         weights.ssim_window,
                                         n_min=weights.ssim_n_min)
    grads = render_backward(gmap, res.cache, dcolor, ddepth)
    _, diso = isotropy_loss(gmap.scale, want_grad=True)
    grads["scale"] = grads["scale"] + weights.lam_iso * diso
    return total, parts, grads


@dataclass
class KeyframeObservation:
    """One keyframe's inputs to map optimization."""

    image: np.ndarray
    depth: np.ndarray       # D_est at full resolution
    pose: Pose
    static: np.ndarray      # HxW static component (1 - dynamic mask)
    u_map: np.ndarray       # HxW positive uncertainty


class MapDivergence(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


DEFAULT_LR_SCALE = {"mu": 0.2, "opacity": 5.0, "scale": 0.5, "quat": 0.2, "color": 2.5}


def optimize_map(gmap: GaussianMap, observations: list[KeyframeObservation],
                 intr: CameraIntrinsics, iters: int,
                 weights: MappingLossWeights | None = None, lr: float = 1e-2,
                 prune_every: int = 100, prune_opacity: float = 0.005,
                 truncate_sigma: float | None = 3.0,
                 background=(0.0, 0.0, 0.0)) -> list[float]:
    """Projected Adam over all Gaussian attributes; each iteration takes one
    gradient step on the mean loss across the whole keyframe window.
    Returns the per-step loss trace."""
    if not observations:
        raise ValueError("need at least one keyframe observation")
    weights = weights or MappingLossWeights()
    opt = Adam(lr=lr)
    trace: list[float] = []
    bad_streak = 0
    n_obs = len(observations)
    for step in range(iters):
        total = 0.0
        grads: dict[str, np.ndarray] | None = None
        for obs in observations:
            loss, _parts, g = mapping_loss(
                gmap, obs.pose, intr, obs.image, obs.depth, obs.u_map,
                obs.static, weights, want_grads=True,
                truncate_sigma=truncate_sigma, background=background)
            total += loss / n_obs
            if grads is None:
                grads = {k: v / n_obs for k, v in g.items()}
            else:
                for k, v in g.items():
                    grads[k] += v / n_obs
        if not np.isfinite(total):
            raise MapDivergence(f"non-finite mapping loss at step {step}", trace)
        trace.append(total)
        if step > 0:
            if total > 10.0 * trace[0]:
                bad_streak += 1
                if bad_streak >= 10:
                    raise MapDivergence(
                        f"loss exceeded 10x initial for {bad_streak} steps", trace)
            else:
                bad_streak = 0
        opt.step(gmap.params(), grads, lr_scale=DEFAULT_LR_SCALE)
        gmap.project_valid()
        if prune_every and (step + 1) % prune_every == 0:
            keep = gmap.opacity >= prune_opacity
            if not keep.all():
                gmap.keep(keep)
                for name in ("mu", "opacity", "scale", "quat", "color"):
                    opt.filter_state(name, keep)
    return trace
