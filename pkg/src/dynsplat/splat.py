"""Incremental 3D Gaussian map and a depth-sorted alpha-blending renderer
with hand-derived gradients.

Rendering projects each Gaussian to an image-plane 2x2 covariance
(perspective-Jacobian EWA), sorts globally by camera depth (stable, so
ties break by insertion index), and alpha-blends front to back per pixel.
The backward pass reuses the forward's pixel/Gaussian pair list and
returns gradients for every Gaussian attribute; the test suite checks
them against central finite differences.

Rendering is a pure read of the map (parallelizable across pixels);
gradient accumulation per Gaussian uses a fixed reduction order, and map
mutation (append/prune/optimizer steps) is single-writer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ALPHA_MAX = 0.99
ALPHA_FLOOR = 1e-3   # depth normalization floor
Z_NEAR = 1e-3
OPACITY_MIN, OPACITY_MAX = 1e-4, 1.0 - 1e-4
SCALE_MIN = 1e-5

PARAM_NAMES = ("mu", "opacity", "scale", "quat", "color")


@dataclass
class GaussianMap:
    mu: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    opacity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quat: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # (w,x,y,z)
    color: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    static_flag: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return self.mu.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def append(self, mu, opacity, scale, quat, color, static_flag) -> None:
        self.mu = np.concatenate([self.mu, np.atleast_2d(mu)])
        self.opacity = np.concatenate([self.opacity, np.atleast_1d(opacity)])
        self.scale = np.concatenate([self.scale, np.atleast_2d(scale)])
        self.quat = np.concatenate([self.quat, np.atleast_2d(quat)])
        self.color = np.concatenate([self.color, np.atleast_2d(color)])
        self.static_flag = np.concatenate([self.static_flag, np.atleast_1d(static_flag)])

    def keep(self, keep_mask: np.ndarray) -> None:
        for name in PARAM_NAMES + ("static_flag",):
            setattr(self, name, getattr(self, name)[keep_mask])

    def project_valid(self) -> None:
        """Clamp every attribute back into its valid range."""
        np.clip(self.opacity, OPACITY_MIN, OPACITY_MAX, out=self.opacity)
        np.clip(self.scale, SCALE_MIN, None, out=self.scale)
        np.clip(self.color, 0.0, 1.0, out=self.color)
        norms = np.linalg.norm(self.quat, axis=1, keepdims=True)
        self.quat = self.quat / np.where(norms > 0, norms, 1.0)

    def covariances(self) -> np.ndarray:
        rq = quat_to_rot(_normalize_rows(self.quat))
        return np.einsum("nij,nj,nkj->nik", rq, self.scale**2, rq)


def _normalize_rows(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def quat_to_rot(qn: np.ndarray) -> np.ndarray:
    """(N,4) unit quaternions (w,x,y,z) to (N,3,3) rotation matrices."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    rot = np.empty((len(qn), 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - z * w)
    rot[:, 0, 2] = 2 * (x * z + y * w)
    rot[:, 1, 0] = 2 * (x * y + z * w)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - x * w)
    rot[:, 2, 0] = 2 * (x * z - y * w)
    rot[:, 2, 1] = 2 * (y * z + x * w)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def _quat_rot_backward(qn: np.ndarray, drot: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the (already normalized) quaternion."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    zero = np.zeros_like(w)
    dw = 2 * np.stack([
        np.stack([zero, -z, y], axis=1),
        np.stack([z, zero, -x], axis=1),
        np.stack([-y, x, zero], axis=1),
    ], axis=1)
    dx = 2 * np.stack([
        np.stack([zero, y, z], axis=1),
        np.stack([y, -2 * x, -w], axis=1),
        np.stack([z, w, -2 * x], axis=1),
    ], axis=1)
    dy = 2 * np.stack([
        np.stack([-2 * y, x, w], axis=1),
        np.stack([x, zero, z], axis=1),
        np.stack([-w, z, -2 * y], axis=1),
    ], axis=1)
    dz = 2 * np.stack([
        np.stack([-2 * z, -w, x], axis=1),
        np.stack([w, -2 * z, y], axis=1),
        np.stack([x, y, zero], axis=1),
    ], axis=1)
    return np.stack([
        np.einsum("nij,nij->n", drot, dw),
        np.einsum("nij,nij->n", drot, dx),
        np.einsum("nij,nij->n", drot, dy),
        np.einsum("nij,nij->n", drot, dz),
    ], axis=1)


def _ragged_pairs(x0, x1, y0, y1):
    """Enumerate (gaussian, pixel) pairs over per-Gaussian inclusive bboxes."""
    widths = x1 - x0 + 1
    areas = widths * (y1 - y0 + 1)
    total = int(areas.sum())
    gid = np.repeat(np.arange(len(areas)), areas)
    starts = np.concatenate([[0], np.cumsum(areas)[:-1]])
    offs = np.arange(total) - np.repeat(starts, areas)
    wrep = np.repeat(widths, areas)
    px = np.repeat(x0, areas) + offs % wrep
    py = np.repeat(y0, areas) + offs // wrep
    return gid, px, py


@dataclass
class RenderResult:
    color: np.ndarray       # (H, W, 3)
    depth: np.ndarray       # (H, W), alpha-normalized camera depth
    alpha: np.ndarray       # (H, W) accumulated alpha in [0, 1]
    cache: dict | None = None


def render(gmap: GaussianMap, pose, intr, height: int, width: int,
           background=(0.0, 0.0, 0.0), truncate_sigma: float | None = 3.0,
           want_cache: bool = False) -> RenderResult:
    bg = np.asarray(background, dtype=np.float64)
    n = len(gmap)
    color_img = np.tile(bg, (height, width, 1))
    depth_img = np.zeros((height, width))
    alpha_img = np.zeros((height, width))
    if n == 0:
        return RenderResult(color_img, depth_img, alpha_img,
                            {"empty": True, "height": height, "width": width} if want_cache else None)

    r_wc = pose.rotation
    xc = (gmap.mu - pose.translation) @ r_wc  # camera-frame points, row-wise
    z = xc[:, 2]
    active = z > Z_NEAR
    idx = np.flatnonzero(active)
    if idx.size == 0:
        return RenderResult(color_img, depth_img, alpha_img,
                            {"empty": True, "height": height, "width": width} if want_cache else None)

    xa = xc[idx]
    za = xa[:, 2]
    fx, fy = intr.fx, intr.fy
    u = fx * xa[:, 0] / za + intr.cx
    v = fy * xa[:, 1] / za + intr.cy

    # EWA projection of the 3D covariance
    qn = _normalize_rows(gmap.quat[idx])
    rq = quat_to_rot(qn)
    sa = gmap.scale[idx]
    sigma3 = np.einsum("nij,nj,nkj->nik", rq, sa**2, rq)
    j = np.zeros((idx.size, 2, 3))
    j[:, 0, 0] = fx / za
    j[:, 0, 2] = -fx * xa[:, 0] / za**2
    j[:, 1, 1] = fy / za
    j[:, 1, 2] = -fy * xa[:, 1] / za**2
    a2 = j @ r_wc.T  # world -> image-plane linearization
    sigma2 = a2 @ sigma3 @ a2.transpose(0, 2, 1)
    det = sigma2[:, 0, 0] * sigma2[:, 1, 1] - sigma2[:, 0, 1] ** 2
    degenerate = (det < 1e-12) | (sigma2[:, 0, 0] <= 0) | (sigma2[:, 1, 1] <= 0)
    if np.any(degenerate):
        sigma2 = sigma2.copy()
        sigma2[degenerate, 0, 0] += 1e-6
        sigma2[degenerate, 1, 1] += 1e-6
        det = sigma2[:, 0, 0] * sigma2[:, 1, 1] - sigma2[:, 0, 1] ** 2
    lam_a = sigma2[:, 1, 1] / det
    lam_b = -sigma2[:, 0, 1] / det
    lam_c = sigma2[:, 0, 0] / det

    if truncate_sigma is None:
        x0 = np.zeros(idx.size, dtype=int)
        x1 = np.full(idx.size, width - 1, dtype=int)
        y0 = np.zeros(idx.size, dtype=int)
        y1 = np.full(idx.size, height - 1, dtype=int)
    else:
        half_tr = 0.5 * (sigma2[:, 0, 0] + sigma2[:, 1, 1])
        eig_max = half_tr + np.sqrt(np.maximum(
            (0.5 * (sigma2[:, 0, 0] - sigma2[:, 1, 1])) ** 2 + sigma2[:, 0, 1] ** 2, 0.0))
        radius = np.ceil(truncate_sigma * np.sqrt(np.maximum(eig_max, 1e-12)))
        x0 = np.clip(np.floor(u - radius), 0, width - 1).astype(int)
        x1 = np.clip(np.ceil(u + radius), 0, width - 1).astype(int)
        y0 = np.clip(np.floor(v - radius), 0, height - 1).astype(int)
        y1 = np.clip(np.ceil(v + radius), 0, height - 1).astype(int)
        inside = (u + radius >= 0) & (u - radius <= width - 1) \
            & (v + radius >= 0) & (v - radius <= height - 1)
        x1 = np.where(inside, x1, x0 - 1)  # empty bbox for off-screen splats

    gid, px, py = _ragged_pairs(x0, x1, y0, y1)
    if gid.size == 0:
        return RenderResult(color_img, depth_img, alpha_img,
                            {"empty": True, "height": height, "width": width} if want_cache else None)
    dx = px - u[gid]
    dy = py - v[gid]
    power = -0.5 * (lam_a[gid] * dx**2 + 2 * lam_b[gid] * dx * dy + lam_c[gid] * dy**2)
    gval = np.exp(power)
    alpha_raw = gmap.opacity[idx][gid] * gval
    if truncate_sigma is not None:
        # bbox corners carry negligible mass; dropping them keeps the pair
        # list (and sort) small. Full-support mode stays exact.
        live_pair = alpha_raw > 1.0 / 255.0
        gid, px, py = gid[live_pair], px[live_pair], py[live_pair]
        dx, dy = dx[live_pair], dy[live_pair]
        power, gval = power[live_pair], gval[live_pair]
        alpha_raw = alpha_raw[live_pair]
        if gid.size == 0:
            return RenderResult(color_img, depth_img, alpha_img,
                                {"empty": True, "height": height, "width": width}
                                if want_cache else None)
    clipped = alpha_raw > ALPHA_MAX
    alpha = np.where(clipped, ALPHA_MAX, alpha_raw)

    # depth order: stable sort so equal depths resolve by insertion index
    zrank = np.empty(idx.size, dtype=np.int64)
    zrank[np.argsort(za, kind="stable")] = np.arange(idx.size)
    pix = py * width + px
    # single int64 key (pixel-major, front-to-back within pixel); keys are
    # unique so an unstable sort is still deterministic
    order = np.argsort(pix.astype(np.int64) * idx.size + zrank[gid])
    gid_s = gid[order]
    pix_s = pix[order]
    alpha_s = alpha[order]

    is_start = np.r_[True, pix_s[1:] != pix_s[:-1]]
    starts = np.flatnonzero(is_start)
    seg_of_pair = np.cumsum(is_start) - 1
    seg_pix = pix_s[starts]

    log_t = np.log1p(-alpha_s)
    cum = np.cumsum(log_t)
    excl = cum - log_t
    base = excl[starts]
    t_pair = np.exp(excl - base[seg_of_pair])
    wgt = alpha_s * t_pair

    col_s = gmap.color[idx][gid_s]
    z_s = za[gid_s]
    seg_rgb = np.add.reduceat(wgt[:, None] * col_s, starts, axis=0)
    seg_alpha = np.add.reduceat(wgt, starts)
    seg_draw = np.add.reduceat(wgt * z_s, starts)
    seg_logt = np.add.reduceat(log_t, starts)
    t_final = np.exp(seg_logt)

    rows, cols = seg_pix // width, seg_pix % width
    color_img[rows, cols] = seg_rgb + t_final[:, None] * bg
    alpha_img[rows, cols] = seg_alpha
    depth_img[rows, cols] = seg_draw / np.maximum(seg_alpha, ALPHA_FLOOR)

    cache = None
    if want_cache:
        cache = dict(
            empty=False, height=height, width=width, idx=idx, xa=xa, u=u, v=v,
            qn=qn, rq=rq, sa=sa, sigma3=sigma3, j=j, a2=a2, sigma2=sigma2,
            lam=(lam_a, lam_b, lam_c), r_wc=r_wc, bg=bg, intr=intr,
            gid_s=gid_s, pix_s=pix_s, dx=dx[order], dy=dy[order],
            gval=gval[order], clipped=clipped[order], alpha_s=alpha_s,
            t_pair=t_pair, wgt=wgt, starts=starts, seg_of_pair=seg_of_pair,
            seg_pix=seg_pix, seg_alpha=seg_alpha, seg_draw=seg_draw,
            t_final=t_final, n_total=n, quat_norm=np.linalg.norm(gmap.quat[idx], axis=1),
        )
    return RenderResult(color_img, depth_img, alpha_img, cache)


def render_backward(gmap: GaussianMap, cache: dict, dcolor: np.ndarray,
                    ddepth: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. all Gaussian attributes, given
    upstream gradients on the rendered color and (normalized) depth."""
    grads = {
        "mu": np.zeros((cache["n_total"], 3)),
        "opacity": np.zeros(cache["n_total"]),
        "scale": np.zeros((cache["n_total"], 3)),
        "quat": np.zeros((cache["n_total"], 4)),
        "color": np.zeros((cache["n_total"], 3)),
    }
    if cache.get("empty"):
        return grads
    width = cache["width"]
    idx = cache["idx"]
    n_act = idx.size
    starts = cache["starts"]
    seg_of_pair = cache["seg_of_pair"]
    gid_s = cache["gid_s"]
    wgt = cache["wgt"]
    alpha_s = cache["alpha_s"]
    t_pair = cache["t_pair"]
    bg = cache["bg"]

    rows, cols = cache["seg_pix"] // width, cache["seg_pix"] % width
    g_rgb_seg = dcolor[rows, cols]                       # (S,3)
    seg_alpha = cache["seg_alpha"]
    seg_draw = cache["seg_draw"]
    a_safe = np.maximum(seg_alpha, ALPHA_FLOOR)
    g_draw_seg = ddepth[rows, cols] / a_safe
    g_alpha_seg = np.where(seg_alpha > ALPHA_FLOOR,
                           -ddepth[rows, cols] * seg_draw / a_safe**2, 0.0)

    col_s = gmap.color[idx][gid_s]
    za = cache["xa"][:, 2]
    z_s = za[gid_s]
    u_pair = (np.einsum("pc,pc->p", g_rgb_seg[seg_of_pair], col_s)
              + g_draw_seg[seg_of_pair] * z_s + g_alpha_seg[seg_of_pair])

    # d color
    dcol_pair = wgt[:, None] * g_rgb_seg[seg_of_pair]
    dcolor_act = np.stack(
        [np.bincount(gid_s, weights=dcol_pair[:, c], minlength=n_act) for c in range(3)],
        axis=1)
    # d z through depth blending
    dz_blend = np.bincount(gid_s, weights=g_draw_seg[seg_of_pair] * wgt, minlength=n_act)

    # d alpha: u_k T_k - (suffix of u w + bg term) / (1 - alpha_k)
    uw = u_pair * wgt
    cum_uw = np.cumsum(uw)
    incl = cum_uw
    base = np.concatenate([[0.0], cum_uw])[starts]
    seg_total = np.add.reduceat(uw, starts)
    suffix = seg_total[seg_of_pair] - (incl - base[seg_of_pair])
    bg_term = (g_rgb_seg @ bg) * cache["t_final"]
    tail = suffix + bg_term[seg_of_pair]
    dalpha = u_pair * t_pair - tail / (1.0 - alpha_s)

    # through the clamp alpha = min(opacity * gval, ALPHA_MAX)
    live = ~cache["clipped"]
    gval = cache["gval"]
    op_pair = gmap.opacity[idx][gid_s]
    dop_pair = np.where(live, dalpha * gval, 0.0)
    dgval = np.where(live, dalpha * op_pair, 0.0)
    dpower = dgval * gval

    lam_a, lam_b, lam_c = cache["lam"]
    dx, dy = cache["dx"], cache["dy"]
    la, lb, lc = lam_a[gid_s], lam_b[gid_s], lam_c[gid_s]
    dmean_u = dpower * (la * dx + lb * dy)
    dmean_v = dpower * (lb * dx + lc * dy)
    dla_pair = -0.5 * dpower * dx * dx
    dlb_pair = -dpower * dx * dy
    dlc_pair = -0.5 * dpower * dy * dy

    def acc(vals):
        return np.bincount(gid_s, weights=vals, minlength=n_act)

    dop_act = acc(dop_pair)
    du = acc(dmean_u)
    dv = acc(dmean_v)
    dla = acc(dla_pair)
    dlb = acc(dlb_pair)
    dlc = acc(dlc_pair)

    # Lambda = Sigma2^-1:  dSigma2 = -Lambda dLambda Lambda
    dlam_mat = np.empty((n_act, 2, 2))
    dlam_mat[:, 0, 0] = dla
    dlam_mat[:, 0, 1] = 0.5 * dlb
    dlam_mat[:, 1, 0] = 0.5 * dlb
    dlam_mat[:, 1, 1] = dlc
    lam_mat = np.empty((n_act, 2, 2))
    lam_mat[:, 0, 0] = lam_a
    lam_mat[:, 0, 1] = lam_b
    lam_mat[:, 1, 0] = lam_b
    lam_mat[:, 1, 1] = lam_c
    dsigma2 = -lam_mat @ dlam_mat @ lam_mat

    a2 = cache["a2"]
    sigma3 = cache["sigma3"]
    da2 = 2.0 * dsigma2 @ a2 @ sigma3
    dsigma3 = a2.transpose(0, 2, 1) @ dsigma2 @ a2
    dj = da2 @ cache["r_wc"]  # a2 = j @ r_wc.T

    xa = cache["xa"]
    fx, fy = cache["intr"].fx, cache["intr"].fy
    za2 = za**2
    dxc = np.zeros((n_act, 3))
    dxc[:, 0] += dj[:, 0, 2] * (-fx / za2)
    dxc[:, 1] += dj[:, 1, 2] * (-fy / za2)
    dxc[:, 2] += (dj[:, 0, 0] * (-fx / za2)
                  + dj[:, 0, 2] * (2 * fx * xa[:, 0] / za**3)
                  + dj[:, 1, 1] * (-fy / za2)
                  + dj[:, 1, 2] * (2 * fy * xa[:, 1] / za**3))
    # projection of the center
    dxc[:, 0] += du * fx / za
    dxc[:, 2] += du * (-fx * xa[:, 0] / za2)
    dxc[:, 1] += dv * fy / za
    dxc[:, 2] += dv * (-fy * xa[:, 1] / za2)
    dxc[:, 2] += dz_blend

    dmu_act = dxc @ cache["r_wc"].T

    # Sigma3 = R diag(s^2) R^T
    rq, sa = cache["rq"], cache["sa"]
    drot = 2.0 * dsigma3 @ (rq * (sa**2)[:, None, :])
    ds2 = np.einsum("nji,njk,nki->ni", rq, dsigma3, rq)
    dscale_act = 2.0 * sa * ds2
    dqn = _quat_rot_backward(cache["qn"], drot)
    qn = cache["qn"]
    qnorm = cache["quat_norm"]
    dquat_act = (dqn - np.einsum("ni,ni->n", dqn, qn)[:, None] * qn) / qnorm[:, None]

    grads["mu"][idx] = dmu_act
    grads["opacity"][idx] = dop_act
    grads["scale"][idx] = dscale_act
    grads["quat"][idx] = dquat_act
    grads["color"][idx] = dcolor_act
    return grads
