"""Motion-mask model: FIFO feature queue, sequential attention over the
queue, gated dynamic/static enhancement, a probability-map head, the
supervised training loss, and inference post-processing (adaptive
threshold + disk dilation) to a binary prior mask.

All forward/backward passes are hand-derived numpy; gradients are checked
against central finite differences in the test suite.

Inference is read-only on the parameters and safe to run concurrently
across sequences; each sequence owns its FeatureQueue (single writer).
Training mutates parameters and is single-threaded per model instance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .features import BackendConfig, FeatureMap, ImageFrame, extract_features
from .fileio import load_checkpoint, save_checkpoint
from .optim import Adam

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


# --- feature queue -----------------------------------------------------------


@dataclass
class FeatureQueue:
    """Fixed-length FIFO of per-frame feature maps, oldest first.

    Always holds exactly `capacity` slots; slots [0, capacity-fill_count)
    are zero padding. Pushing evicts the oldest slot.
    """

    capacity: int
    slot_shape: tuple[int, int, int]
    slots: list[np.ndarray] = field(default_factory=list)
    fill_count: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        if not self.slots:
            self.slots = [np.zeros(self.slot_shape) for _ in range(self.capacity)]

    def push(self, x: FeatureMap) -> None:
        if x.data.shape != self.slot_shape:
            raise ValueError(
                f"feature shape {x.data.shape} does not match queue slots {self.slot_shape}"
            )
        self.slots.pop(0)
        self.slots.append(x.data.copy())
        self.fill_count = min(self.fill_count + 1, self.capacity)

    def tokens(self) -> np.ndarray:
        """All slots flattened to (L*H'*W', C), oldest first."""
        c = self.slot_shape[2]
        return np.concatenate([s.reshape(-1, c) for s in self.slots], axis=0)


# --- model parameters --------------------------------------------------------


@dataclass
class MotionModelParams:
    """Trainable arrays keyed by name. C channels, h heads, hidden 2C."""

    channels: int
    num_heads: int = 4
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.channels % self.num_heads != 0:
            raise ValueError("channels must be divisible by num_heads")

    @classmethod
    def init(cls, channels: int, num_heads: int = 4, seed: int = 0) -> "MotionModelParams":
        rng = np.random.default_rng(seed)
        c = channels
        hid = 2 * c

        def mat(rows, cols):
            return rng.standard_normal((rows, cols)) / np.sqrt(rows)

        arrays = {
            "wq": mat(c, c),
            "wk": mat(c, c),
            "wv": mat(c, c),
            "wd": mat(c, c),
            "bd": np.zeros(c),
            "ws": mat(c, c),
            "bs": np.zeros(c),
            "alpha": np.array([0.5]),
            "wenh": mat(c, c),
            "w1": mat(c, hid),
            "b1": np.zeros(hid),
            "w2": mat(hid, 1),
            "b2": np.zeros(1),
        }
        return cls(channels=c, num_heads=num_heads, arrays=arrays)

    def save(self, path) -> None:
        meta = {"channels": np.array([self.channels]), "num_heads": np.array([self.num_heads])}
        save_checkpoint(path, {**self.arrays, **{f"meta_{k}": v for k, v in meta.items()}})

    @classmethod
    def load(cls, path) -> "MotionModelParams":
        arrays = load_checkpoint(path)
        channels = int(arrays.pop("meta_channels")[0])
        num_heads = int(arrays.pop("meta_num_heads")[0])
        return cls(channels=channels, num_heads=num_heads, arrays=arrays)


@dataclass
class MotionLossWeights:
    lambda1: float = 1.0  # pixel-wise absolute difference
    lambda2: float = 0.1  # binary entropy sharpening
    lambda3: float = 1.0  # soft dice

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda1 == self.lambda2 == self.lambda3 == 0:
            raise ValueError("loss weights must not all be zero")


@dataclass
class MotionProbabilityMap:
    data: np.ndarray  # HxW in [0,1]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.min() < 0 or self.data.max() > 1:
            raise ValueError("probability map values must lie in [0,1]")


@dataclass
class MotionMask:
    data: np.ndarray  # HxW binary
    dilation_radius: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        vals = np.unique(self.data)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("mask values must be 0/1")
        self.data = self.data.astype(np.float64)

    @property
    def static_component(self) -> np.ndarray:
        return 1.0 - self.data


# --- bilinear resampling (forward + adjoint) ---------------------------------


def _bilinear_coeffs(n_out: int, n_in: int):
    """align-corners sample positions: i0, i1 index arrays and weight w."""
    if n_in == 1 or n_out == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(pos).astype(int)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = pos - i0
    return i0, i1, w


def bilinear_upsample(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    r0, r1, wr = _bilinear_coeffs(out_h, arr.shape[0])
    c0, c1, wc = _bilinear_coeffs(out_w, arr.shape[1])
    wr = wr[:, None]
    wc = wc[None, :]
    return (
        arr[np.ix_(r0, c0)] * (1 - wr) * (1 - wc)
        + arr[np.ix_(r0, c1)] * (1 - wr) * wc
        + arr[np.ix_(r1, c0)] * wr * (1 - wc)
        + arr[np.ix_(r1, c1)] * wr * wc
    )


def bilinear_upsample_adjoint(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    r0, r1, wr = _bilinear_coeffs(grad_out.shape[0], in_h)
    c0, c1, wc = _bilinear_coeffs(grad_out.shape[1], in_w)
    wr = wr[:, None]
    wc = wc[None, :]
    grad_in = np.zeros((in_h, in_w))
    rr0, cc0 = np.meshgrid(r0, c0, indexing="ij")
    rr1, cc1 = np.meshgrid(r1, c1, indexing="ij")
    np.add.at(grad_in, (rr0, cc0), grad_out * (1 - wr) * (1 - wc))
    np.add.at(grad_in, (rr0, cc1), grad_out * (1 - wr) * wc)
    np.add.at(grad_in, (rr1, cc0), grad_out * wr * (1 - wc))
    np.add.at(grad_in, (rr1, cc1), grad_out * wr * wc)
    return grad_in


# --- forward pass ------------------------------------------------------------


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _split_heads(a: np.ndarray, num_heads: int) -> np.ndarray:
    n, c = a.shape
    return a.reshape(n, num_heads, c // num_heads).transpose(1, 0, 2)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    h, n, dh = a.shape
    return a.transpose(1, 0, 2).reshape(n, h * dh)


def sequential_attention(x: FeatureMap, queue: FeatureQueue, params: MotionModelParams,
                         _cache: dict | None = None) -> FeatureMap:
    """Scaled dot-product attention: queries from the current frame's
    positions, keys/values from every historical position in the queue.
    Zero-padded slots participate as ordinary (zero) tokens.
    """
    hp, wp, c = x.data.shape
    if queue.slot_shape[2] != c:
        raise ValueError("channel mismatch between frame features and queue")
    xt = x.data.reshape(-1, c)
    qt = queue.tokens()
    if not (np.all(np.isfinite(xt)) and np.all(np.isfinite(qt))):
        raise ValueError("non-finite attention inputs")
    p = params.arrays
    nh = params.num_heads
    scale = 1.0 / np.sqrt(c / nh)
    q = _split_heads(xt @ p["wq"], nh)          # (h, N, dh)
    k = _split_heads(qt @ p["wk"], nh)          # (h, M, dh)
    v = _split_heads(qt @ p["wv"], nh)
    logits = (q @ k.transpose(0, 2, 1)) * scale
    logits -= logits.max(axis=2, keepdims=True)
    expl = np.exp(logits)
    attn = expl / expl.sum(axis=2, keepdims=True)  # (h, N, M)
    out = _merge_heads(attn @ v)
    if _cache is not None:
        _cache.update(xt=xt, qt=qt, q=q, k=k, v=v, attn=attn, scale=scale)
    return FeatureMap(out.reshape(hp, wp, c), x.source_frame)


def gated_enhancement(f_attn: FeatureMap, params: MotionModelParams,
                      _cache: dict | None = None) -> FeatureMap:
    """F_enh = F_attn (1 + alpha D) (1 - alpha S), with per-position linear
    + sigmoid dynamic/static heads."""
    p = params.arrays
    fa = f_attn.data.reshape(-1, params.channels)
    d = _sigmoid(fa @ p["wd"] + p["bd"])
    s = _sigmoid(fa @ p["ws"] + p["bs"])
    alpha = p["alpha"][0]
    enh = fa * (1.0 + alpha * d) * (1.0 - alpha * s)
    if _cache is not None:
        _cache.update(fa=fa, d=d, s=s, alpha=alpha)
    return FeatureMap(enh.reshape(f_attn.data.shape), f_attn.source_frame)


def _forward(x: FeatureMap, queue: FeatureQueue, params: MotionModelParams,
             out_hw: tuple[int, int], cache: dict | None = None):
    hp, wp, c = x.data.shape
    att_cache: dict | None = {} if cache is not None else None
    enh_cache: dict | None = {} if cache is not None else None
    f_attn = sequential_attention(x, queue, params, att_cache)
    f_enh = gated_enhancement(f_attn, params, enh_cache)
    p = params.arrays
    xt = x.data.reshape(-1, c)
    fused = f_enh.data.reshape(-1, c) @ p["wenh"] + xt  # residual fusion
    h1 = np.tanh(fused @ p["w1"] + p["b1"])
    raw = h1 @ p["w2"] + p["b2"]
    p_low = _sigmoid(raw).reshape(hp, wp)
    prob = bilinear_upsample(p_low, out_hw[0], out_hw[1])
    if cache is not None:
        cache.update(att=att_cache, enh=enh_cache, f_attn=f_attn.data, f_enh=f_enh.data,
                     fused=fused, h1=h1, raw=raw, p_low=p_low, hp=hp, wp=wp)
    return prob


def predict_probability_map(x: FeatureMap, queue: FeatureQueue,
                            params: MotionModelParams,
                            out_hw: tuple[int, int]) -> MotionProbabilityMap:
    prob = _forward(x, queue, params, out_hw)
    return MotionProbabilityMap(np.clip(prob, 0.0, 1.0))


def _backward(dprob: np.ndarray, x: FeatureMap, queue: FeatureQueue,
              params: MotionModelParams, cache: dict) -> dict[str, np.ndarray]:
    p = params.arrays
    nh = params.num_heads
    hp, wp = cache["hp"], cache["wp"]
    dp_low = bilinear_upsample_adjoint(dprob, hp, wp).reshape(-1, 1)
    sig = cache["p_low"].reshape(-1, 1)
    draw = dp_low * sig * (1.0 - sig)
    grads = {}
    grads["w2"] = cache["h1"].T @ draw
    grads["b2"] = draw.sum(axis=0)
    dh1 = draw @ p["w2"].T
    dfused = dh1 * (1.0 - cache["h1"] ** 2)
    grads["w1"] = cache["fused"].T @ dfused
    grads["b1"] = dfused.sum(axis=0)
    dpre = dfused @ p["w1"].T  # d/d(fused input)
    c = params.channels
    denh = dpre @ p["wenh"].T
    grads["wenh"] = cache["f_enh"].reshape(-1, c).T @ dpre
    dxt = dpre.copy()  # residual branch

    ec = cache["enh"]
    fa, d, s, alpha = ec["fa"], ec["d"], ec["s"], ec["alpha"]
    u = 1.0 + alpha * d
    v = 1.0 - alpha * s
    dfa = denh * u * v
    du = denh * fa * v
    dv = denh * fa * u
    dalpha = np.sum(du * d) - np.sum(dv * s)
    dd = du * alpha
    ds = -dv * alpha
    dzd = dd * d * (1.0 - d)
    dzs = ds * s * (1.0 - s)
    grads["wd"] = fa.T @ dzd
    grads["bd"] = dzd.sum(axis=0)
    grads["ws"] = fa.T @ dzs
    grads["bs"] = dzs.sum(axis=0)
    grads["alpha"] = np.array([dalpha])
    dfa = dfa + dzd @ p["wd"].T + dzs @ p["ws"].T

    ac = cache["att"]
    dout = _split_heads(dfa, nh)  # (h, N, dh)
    attn, q, k, v = ac["attn"], ac["q"], ac["k"], ac["v"]
    dattn = dout @ v.transpose(0, 2, 1)
    dv_h = attn.transpose(0, 2, 1) @ dout
    tmp = np.sum(dattn * attn, axis=2, keepdims=True)
    dlogits = attn * (dattn - tmp)
    dq = (dlogits @ k) * ac["scale"]
    dk = (dlogits.transpose(0, 2, 1) @ q) * ac["scale"]
    dq_flat = _merge_heads(dq)
    dk_flat = _merge_heads(dk)
    dv_flat = _merge_heads(dv_h)
    grads["wq"] = ac["xt"].T @ dq_flat
    grads["wk"] = ac["qt"].T @ dk_flat
    grads["wv"] = ac["qt"].T @ dv_flat
    dxt += dq_flat @ p["wq"].T
    _ = dxt  # input features are not trainable; gradient stops here
    return grads


# --- loss --------------------------------------------------------------------


def loss_gd(pred: np.ndarray, gt: np.ndarray, weights: MotionLossWeights,
            want_grad: bool = False):
    """Supervised mask loss: absolute difference + binary-entropy penalty +
    soft dice on probabilistic overlap. Returns loss or (loss, dloss/dpred).

    The clamp guards only the entropy logs; base and dice use the raw
    probabilities so exact-binary predictions and the empty/empty dice
    convention (term = 0) hold exactly.
    """
    if pred.shape != gt.shape:
        raise ValueError("prediction/ground-truth shape mismatch")
    pc = np.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    n = pred.size
    diff = gt - pred
    l_base = np.abs(diff).mean()
    l_reg = -(pc * np.log(pc) + (1.0 - pc) * np.log(1.0 - pc)).mean()
    inter = float(np.sum(gt * pred))
    total = float(np.sum(gt) + np.sum(pred))
    l_dice = 0.0 if total == 0 else 1.0 - 2.0 * inter / total
    loss = weights.lambda1 * l_base + weights.lambda2 * l_reg + weights.lambda3 * l_dice
    if not want_grad:
        return loss
    g = np.zeros_like(pred)
    g += weights.lambda1 * (-np.sign(diff)) / n
    in_range = (pred > PROB_EPS) & (pred < 1.0 - PROB_EPS)
    g += np.where(in_range,
                  weights.lambda2 * (-(np.log(pc) - np.log(1.0 - pc))) / n, 0.0)
    if total != 0:
        g += weights.lambda3 * (-2.0 * (gt * total - inter) / total**2)
    return loss, g


def motion_loss_and_grads(params: MotionModelParams, feature_seq: list[FeatureMap],
                          gt_masks: list[np.ndarray], weights: MotionLossWeights,
                          capacity: int):
    """Average loss over frames t >= 1 of one sequence, plus parameter grads.

    The queue starts zero-initialized; frame 0 only seeds it (its mask is
    not predicted), matching inference behaviour.
    """
    if len(feature_seq) < 2:
        raise ValueError("sequence must have at least 2 frames")
    out_hw = gt_masks[0].shape
    queue = FeatureQueue(capacity, feature_seq[0].data.shape)
    queue.push(feature_seq[0])
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    total = 0.0
    n_terms = len(feature_seq) - 1
    for t in range(1, len(feature_seq)):
        cache: dict = {}
        prob = _forward(feature_seq[t], queue, params, out_hw, cache)
        loss, dprob = loss_gd(prob, gt_masks[t], weights, want_grad=True)
        total += loss / n_terms
        step_grads = _backward(dprob / n_terms, feature_seq[t], queue, params, cache)
        for k, g in step_grads.items():
            grads[k] += g
        queue.push(feature_seq[t])
    return total, grads


def train_step(params: MotionModelParams, optimizer: Adam,
               batch: list[tuple[list[FeatureMap], list[np.ndarray]]],
               weights: MotionLossWeights, capacity: int) -> float:
    """One optimizer step on a batch of (feature sequence, gt masks)."""
    grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    total = 0.0
    for feature_seq, gt_masks in batch:
        loss, seq_grads = motion_loss_and_grads(params, feature_seq, gt_masks,
                                                weights, capacity)
        total += loss / len(batch)
        for k, g in seq_grads.items():
            grads[k] += g / len(batch)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite training loss {total}; step aborted")
    optimizer.step(params.arrays, grads)
    return total


# --- inference post-processing -----------------------------------------------


def otsu_threshold(probmap: np.ndarray) -> float:
    """Maximum between-class-variance threshold over 256 bins of [0,1].

    Candidate k splits bins <=k from bins >k and maps to the bin edge
    (k+1)/256; ties resolve to the smallest candidate. A constant map
    returns the constant itself (degenerate: empty/full mask downstream).
    """
    vals = np.asarray(probmap, dtype=np.float64).ravel()
    if vals.min() < 0 or vals.max() > 1:
        raise ValueError("probability map values must lie in [0,1]")
    if vals.max() == vals.min():
        return float(vals[0])
    bins = np.minimum((vals * 256.0).astype(int), 255)
    hist = np.bincount(bins, minlength=256).astype(np.float64)
    n = hist.sum()
    centers = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    m0 = np.cumsum(hist * centers)
    total = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (total - m0) / (n - w0)
        var_b = w0 * (n - w0) * (mu0 - mu1) ** 2
    var_b = np.where((w0 == 0) | (w0 == n), -np.inf, var_b)
    k = int(np.argmax(var_b))  # argmax takes the first (smallest) maximizer
    return (k + 1) / 256.0


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    return [
        (u, v)
        for u in range(-radius, radius + 1)
        for v in range(-radius, radius + 1)
        if u * u + v * v <= radius * radius
    ]


def binarize_and_dilate(probmap: np.ndarray, tau: float, radius: int) -> MotionMask:
    """Strict-greater binarization then dilation by a disk of the given
    radius; out-of-bounds reads count as 0."""
    if radius < 0:
        raise ValueError("dilation radius must be >= 0")
    raw = (np.asarray(probmap) > tau).astype(np.float64)
    if radius == 0:
        return MotionMask(raw, 0)
    h, w = raw.shape
    out = np.zeros_like(raw)
    for u, v in disk_offsets(radius):
        dst_r = slice(max(0, u), h + min(0, u))
        src_r = slice(max(0, -u), h + min(0, -u))
        dst_c = slice(max(0, v), w + min(0, v))
        src_c = slice(max(0, -v), w + min(0, -v))
        np.maximum(out[dst_r, dst_c], raw[src_r, src_c], out=out[dst_r, dst_c])
    return MotionMask(out, radius)


@dataclass
class MotionInferenceState:
    """Per-sequence inference state: queue capacity plus the lazily
    initialized FIFO queue itself."""

    capacity: int = 4
    queue: FeatureQueue | None = None


def infer_mask(frame: ImageFrame, state: MotionInferenceState,
               params: MotionModelParams, backend: BackendConfig,
               radius: int = 2, degenerate_prob: float = 0.5) -> MotionMask:
    """Full inference for one frame; pushes its features after use.

    The first frame initializes the queue and returns an all-static mask.
    A probability map whose maximum never reaches `degenerate_prob` is
    treated like the constant degenerate case (no dynamic mode present)
    and yields an empty mask, so static scenes do not get an arbitrary
    bisection of near-constant noise.
    """
    h, w = frame.pixels.shape[:2]
    x = extract_features(frame, backend)
    if state.queue is None:
        state.queue = FeatureQueue(state.capacity, x.data.shape)
        state.queue.push(x)
        return MotionMask(np.zeros((h, w)), radius)
    prob = predict_probability_map(x, state.queue, params, (h, w))
    state.queue.push(x)
    pm = prob.data
    if pm.max() < degenerate_prob or pm.max() == pm.min():
        return MotionMask(np.zeros((h, w)), radius)
    tau = otsu_threshold(pm)
    return binarize_and_dilate(pm, tau, radius)
