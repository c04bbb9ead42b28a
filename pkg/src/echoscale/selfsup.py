"""Self-supervised relative depth from frame triples.

A DepthNet predicts sigmoid disparity at several scales and a PoseNet
predicts the 6-DoF motion from the target frame to each source frame. The
sources are warped into the target view and the per-pixel minimum
photometric error, auto-masked, drives both networks.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .avsnet import ResolutionError, TrainingDiverged
from .backbone import Decoder, Encoder
from .core import ops
from .core.nn import Conv2d, ConvReLU, Module, clip_grad_norm, make_optimizer, warmup_cosine
from .core.tensor import (
    Tensor,
    abs_,
    clip,
    concat,
    default_dtype,
    exp,
    mean,
    no_grad,
    reshape,
    sigmoid,
    stack,
    sum_,
    tensor,
)
from .geometry import Pose, disp_to_depth, inverse_warp, invert_pose

POSE_SCALE = 0.01
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
# added to the error of out-of-frame samples so the minimum prefers a valid source
INVALID_PENALTY = 1e3


@dataclass
class PhotometricParams:
    beta: float = 0.15
    gamma: float = 0.85
    lambda_smooth: float = 1e-3
    scales: tuple = (1.0, 0.5, 0.25, 0.125)

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if abs(self.beta + self.gamma - 1.0) > 1e-12:
            raise ValueError(f"beta + gamma must be 1, got {self.beta} + {self.gamma}")
        if not self.scales:
            raise ValueError("need at least one scale")

    @classmethod
    def with_scales(cls, n, **kw):
        """``n`` = 4 gives {1, 1/2, 1/4, 1/8}; ``n`` = 3 drops 1/8."""
        if n not in (3, 4):
            raise ValueError(f"scales must be 3 or 4, got {n}")
        return cls(scales=tuple(0.5**i for i in range(n)), **kw)


# -- networks -------------------------------------------------------------
class DepthNet(Module):
    """Encoder-decoder with one sigmoid disparity head per output scale."""

    def __init__(self, rng, widths=(16, 32, 64, 128, 192), dec_widths=(96, 64, 32, 16, 16), n_scales=4, dtype=None):
        if len(dec_widths) != 5:
            raise ValueError("DepthNet needs five decoder widths (strides 16 down to 1)")
        if n_scales not in (3, 4):
            raise ValueError(f"n_scales must be 3 or 4, got {n_scales}")
        self.n_scales = n_scales
        self.encoder = Encoder(rng, 3, widths, dtype)
        self.decoder = Decoder(rng, widths, dec_widths, dtype)
        # decoder outputs run stride 16, 8, 4, 2, 1; heads read the last n_scales
        self.heads = [Conv2d(rng, c, 1, 3, dtype=dtype) for c in dec_widths[::-1][:n_scales]]

    def forward(self, rgb):
        """Disparities ordered from full resolution down, each (N,1,H*s,W*s)."""
        rgb = tensor(rgb)
        h, w = rgb.shape[-2:]
        if h % 32 or w % 32:
            raise ResolutionError(f"input {h}x{w} must be divisible by 32")
        feats = self.decoder(self.encoder(rgb))[::-1]
        return [sigmoid(head(f)) for head, f in zip(self.heads, feats)]


class PoseNet(Module):
    """Conv stack over a channel-stacked frame pair, averaged to 6 numbers."""

    def __init__(self, rng, widths=(16, 32, 64, 128, 128, 128), dtype=None):
        self.convs = []
        prev = 6
        for w in widths:
            self.convs.append(ConvReLU(rng, prev, w, 3, 2, dtype))
            prev = w
        self.out = Conv2d(rng, prev, 6, 1, dtype=dtype)

    def forward(self, pair):
        x = tensor(pair)
        if x.shape[1] != 6:
            raise ValueError(f"PoseNet expects 6 input channels, got {x.shape[1]}")
        for conv in self.convs:
            x = conv(x)
        v = mean(self.out(x), axis=(2, 3)) * POSE_SCALE
        return Pose(v[:, 0:3], v[:, 3:6])


# -- losses ---------------------------------------------------------------
def ssim(x, y):
    """Per-pixel SSIM over reflection-padded 3x3 windows, clipped to [-1, 1]."""
    x, y = tensor(x), tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch {x.shape} vs {y.shape}")
    xp, yp = ops.pad_reflect(x, 1), ops.pad_reflect(y, 1)
    mu_x, mu_y = ops.box3(xp), ops.box3(yp)
    var_x = ops.box3(xp * xp) - mu_x * mu_x
    var_y = ops.box3(yp * yp) - mu_y * mu_y
    cov = ops.box3(xp * yp) - mu_x * mu_y
    num = (mu_x * mu_y * 2.0 + SSIM_C1) * (cov * 2.0 + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return clip(num / den, -1.0, 1.0)


def photometric_error(target, synthesized, params=None):
    """beta * L1 + gamma * (1 - SSIM) / 2, averaged over channels -> (N,1,H,W)."""
    params = params or PhotometricParams()
    target, synthesized = tensor(target), tensor(synthesized)
    l1 = mean(abs_(target - synthesized), axis=1, keepdims=True)
    dssim = mean((1.0 - ssim(target, synthesized)) * 0.5, axis=1, keepdims=True)
    return l1 * params.beta + dssim * params.gamma


def photometric_loss(target, synthesized, params=None):
    """Per-pixel minimum of the photometric error over the synthesized sources.

    Returns the (N,1,H,W) minimum and the index of the winning source.
    """
    if len(synthesized) == 0:
        raise ValueError("photometric_loss needs at least one source")
    errs = stack([photometric_error(target, s, params) for s in synthesized], axis=0)
    return ops.min_axis(errs, axis=0)


def smoothness_loss(disp, rgb):
    """Edge-aware first-order smoothness of mean-normalized disparity."""
    disp, rgb = tensor(disp), tensor(rgb)
    if disp.shape[-2:] != rgb.shape[-2:]:
        raise ValueError(f"disparity {disp.shape} and image {rgb.shape} differ in size")
    d = disp / mean(disp, axis=(2, 3), keepdims=True)
    img = rgb.data
    wx = np.exp(-np.mean(np.abs(img[..., :, :-1] - img[..., :, 1:]), axis=1, keepdims=True))
    wy = np.exp(-np.mean(np.abs(img[..., :-1, :] - img[..., 1:, :]), axis=1, keepdims=True))
    gx = abs_(d[..., :, :-1] - d[..., :, 1:]) * Tensor(wx.astype(d.dtype))
    gy = abs_(d[..., :-1, :] - d[..., 1:, :]) * Tensor(wy.astype(d.dtype))
    return mean(gx) + mean(gy)


def _identity_error(target, raw_sources, params):
    errs = np.stack([photometric_error(target.data, s.data, params).data for s in raw_sources])
    return errs.min(axis=0)


def auto_mask(target, raw_sources, synthesized, params=None):
    """True where the best reprojection beats the best unwarped source, strictly."""
    with no_grad():
        target = tensor(target)
        ident = _identity_error(target, [tensor(s) for s in raw_sources], params)
        reproj = np.stack([photometric_error(target, tensor(s), params).data for s in synthesized]).min(axis=0)
    return reproj < ident


def masked_mean(x, mask=None):
    x = tensor(x)
    if mask is None:
        return mean(x)
    m = np.broadcast_to(np.asarray(mask, dtype=x.dtype), x.shape)
    return sum_(x * Tensor(np.ascontiguousarray(m))) * (1.0 / max(float(m.sum()), 1.0))


def joint_loss(pe, smooth, params=None, masks=None):
    """(1/N) sum over scales of (masked mean pe_i + lambda_smooth * smooth_i).

    ``pe`` entries may be per-pixel maps or scalars; ``masks`` holds one
    boolean map (or None) per scale.
    """
    params = params or PhotometricParams()
    if len(pe) == 0 or len(pe) != len(smooth):
        raise ValueError("need one pe and one smoothness term per scale")
    masks = masks if masks is not None else [None] * len(pe)
    total = None
    for p, s, m in zip(pe, smooth, masks):
        term = masked_mean(p, m) + tensor(s) * params.lambda_smooth
        total = term if total is None else total + term
    return total * (1.0 / len(pe))


def reprojection_term(target, sources, depth, poses, K, params=None):
    """Auto-masked per-pixel minimum reprojection error for one depth map.

    Returns ``(pe_map, mask)``; the mask drops auto-masked pixels and
    pixels whose winning source sample fell outside the frame.
    """
    target = tensor(target)
    warped, valid = [], []
    for src, pose in zip(sources, poses):
        w, v = inverse_warp(src, depth, pose, K)
        warped.append(w)
        valid.append(v[:, None])
    errs = []
    for w, v in zip(warped, valid):
        e = photometric_error(target, w, params)
        errs.append(e + Tensor((~v).astype(e.dtype) * INVALID_PENALTY))
    pe, idx = ops.min_axis(stack(errs, axis=0), axis=0)
    chosen_valid = np.take_along_axis(np.stack(valid), idx[None], axis=0)[0]
    ident = _identity_error(target, [tensor(s) for s in sources], params)
    mask = (pe.data < ident) & chosen_valid
    return pe, mask


def selfsup_objective(target, sources, disps, poses, K, params=None, d_min=0.1, d_max=12.0, depth_scale=1.0):
    """Joint loss for one batch: every disparity scale is upsampled to full
    resolution, converted to depth and scored against both sources.

    ``depth_scale`` multiplies all depths; with translations scaled by the
    same factor the objective is unchanged.
    """
    params = params or PhotometricParams()
    target = tensor(target)
    h, w = target.shape[-2:]
    pe_maps, masks, smooth = [], [], []
    for disp in disps[: len(params.scales)]:
        full = ops.bilinear_resize(disp, h, w)
        depth = disp_to_depth(full, d_min, d_max) * depth_scale
        pe, mask = reprojection_term(target, sources, depth, poses, K, params)
        pe_maps.append(pe)
        masks.append(mask)
        small = ops.bilinear_resize(target, *disp.shape[-2:]) if disp.shape[-2:] != (h, w) else target
        smooth.append(smoothness_loss(disp, small))
    return joint_loss(pe_maps, smooth, params, masks)


# -- training -------------------------------------------------------------
@dataclass
class SelfSupConfig:
    steps: int = 1000
    batch: int = 4
    lr: float = 1e-3
    optimizer: str = "adam"
    warmup_frac: float = 0.05
    clip_norm: float = 10.0
    n_scales: int = 4
    widths: tuple = (16, 32, 64, 128, 192)
    dec_widths: tuple = (96, 64, 32, 16, 16)
    pose_widths: tuple = (16, 32, 64, 128, 128, 128)
    d_min: float = 0.1
    d_max: float = 12.0
    augment: bool = True
    jitter: float = 0.0
    restarts: int = 3
    restart_steps: int = 150
    seed: int = 0


@dataclass
class SelfSupResult:
    depth_net: DepthNet
    pose_net: PoseNet
    config: SelfSupConfig
    trace: list = field(default_factory=list)
    restart_losses: list = field(default_factory=list)

    def predict(self, rgb, batch=8):
        """Relative depth maps (N,H,W) from the full-resolution disparity."""
        return predict_relative(self.depth_net, rgb, self.config.d_min, self.config.d_max, batch)


def build_nets(cfg, dtype=None):
    rng = np.random.default_rng(cfg.seed)
    dtype = dtype or default_dtype()
    depth = DepthNet(rng, cfg.widths, cfg.dec_widths, cfg.n_scales, dtype)
    pose = PoseNet(rng, cfg.pose_widths, dtype)
    return depth, pose


def predict_relative(depth_net, rgb, d_min=0.1, d_max=12.0, batch=8):
    rgb = np.asarray(rgb)
    single = rgb.ndim == 3
    rgb = rgb[None] if single else rgb
    dtype = depth_net.parameters()[0].dtype
    out = []
    with no_grad():
        for i in range(0, len(rgb), batch):
            disp = depth_net(rgb[i : i + batch].astype(dtype))[0]
            out.append(disp_to_depth(disp.data[:, 0], d_min, d_max))
    out = np.concatenate(out)
    return out[0] if single else out


def predict_poses(pose_net, prev, target, nxt):
    """Poses target -> prev and target -> next from one batched PoseNet pass.

    Both pairs are fed in temporal order, (prev, target) and (target, next),
    so the network sees motion in one direction only; the first result is
    inverted to map the target onto the earlier frame.
    """
    n = target.shape[0]
    pairs = concat([concat([tensor(prev), tensor(target)], axis=1), concat([tensor(target), tensor(nxt)], axis=1)], axis=0)
    pose = pose_net(pairs)
    forward = Pose(pose.rotation[:n], pose.translation[:n])
    return [invert_pose(forward), Pose(pose.rotation[n:], pose.translation[n:])]


def augment_batch(frames, rng, jitter=0.0):
    """Random horizontal flip and optional colour jitter for a batch of triples.

    ``frames`` is ``(prev, target, next)``, each (N,3,H,W); every triple
    shares one draw. Returns ``(raw, inputs)``: ``raw`` is only flipped and
    feeds the photometric loss, ``inputs`` is also jittered (brightness,
    per-channel gain and channel order, when ``jitter > 0``) and feeds the
    networks.
    """
    n = frames[0].shape[0]
    flip = rng.random(n) < 0.5
    raw = [np.where(flip[:, None, None, None], x[..., ::-1], x) for x in frames]
    if jitter <= 0:
        return raw, raw
    gain = rng.uniform(1 - jitter, 1 + jitter, (n, 1, 1, 1)) * rng.uniform(1 - jitter, 1 + jitter, (n, 3, 1, 1))
    perm = np.stack([rng.permutation(3) for _ in range(n)])
    inputs = [np.clip(np.take_along_axis(x, perm[:, :, None, None], axis=1) * gain, 0.0, 1.0).astype(x.dtype) for x in raw]
    return raw, inputs


class _Run:
    """One training run: networks, optimizer, batch order and loss trace."""

    def __init__(self, triples, K, cfg, params, seed, freeze_pose):
        self.triples, self.K, self.cfg, self.params = triples, K, cfg, params
        self.depth_net, self.pose_net = build_nets(replace(cfg, seed=seed))
        self.dtype = self.depth_net.parameters()[0].dtype
        self.trainable = self.depth_net.parameters()
        if freeze_pose:
            self.pose_net.out.weight.data[...] = 0
            self.pose_net.out.bias.data[...] = 0
        else:
            self.trainable = self.trainable + self.pose_net.parameters()
        self.opt = make_optimizer(cfg.optimizer, self.trainable, cfg.lr)
        self.rng = np.random.default_rng(seed)
        self.order = []
        self.trace = []

    def step(self, step):
        cfg = self.cfg
        if len(self.order) < cfg.batch:
            self.order += list(self.rng.permutation(len(self.triples)))
        idx, self.order = self.order[: cfg.batch], self.order[cfg.batch :]
        raw = [np.stack([self.triples[i][j] for i in idx]).astype(self.dtype) for j in range(3)]
        inputs = raw
        if cfg.augment:
            raw, inputs = augment_batch(raw, self.rng, cfg.jitter)
        self.opt.lr = warmup_cosine(step, cfg.steps, cfg.lr, cfg.warmup_frac)
        self.opt.zero_grad()
        self.pose_net.zero_grad()
        poses = predict_poses(self.pose_net, *inputs)
        sources = [Tensor(raw[0]), Tensor(raw[2])]
        disps = self.depth_net(inputs[1])
        loss = selfsup_objective(Tensor(raw[1]), sources, disps, poses, self.K, self.params, cfg.d_min, cfg.d_max)
        value = float(loss.data)
        self.trace.append(value)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}", self.trace)
        loss.backward()
        if cfg.clip_norm:
            clip_grad_norm(self.trainable, cfg.clip_norm)
        self.opt.step()
        return value

    def probe_loss(self):
        tail = self.trace[-max(1, len(self.trace) // 4) :]
        return float(np.mean(tail))


def train_selfsup(triples, K, cfg=None, params=None, on_step=None, freeze_pose=False):
    """Jointly train DepthNet and PoseNet on ``(prev, target, next)`` RGB triples.

    With ``cfg.restarts > 1``, that many runs (seeds ``seed``, ``seed + 1``,
    ...) train for ``cfg.restart_steps`` steps and the one with the lowest
    recent photometric loss continues; no labels are involved. With
    ``freeze_pose`` the PoseNet output layer is zeroed and never updated,
    so every warp uses the identity pose.
    """
    cfg = copy.copy(cfg or SelfSupConfig())
    params = params or PhotometricParams.with_scales(cfg.n_scales)
    if len(triples) == 0:
        raise ValueError("no training triples")
    if cfg.restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {cfg.restarts}")
    probe = min(cfg.restart_steps, cfg.steps) if cfg.restarts > 1 else 0
    runs = [_Run(triples, K, cfg, params, cfg.seed + r, freeze_pose) for r in range(cfg.restarts if probe else 1)]
    for run in runs:
        for step in range(probe):
            run.step(step)
    losses = [run.probe_loss() for run in runs] if probe else [0.0]
    best = runs[int(np.argmin(losses))]
    for step in range(probe):
        if on_step is not None:
            on_step(step, best.trace[step])
    for step in range(probe, cfg.steps):
        value = best.step(step)
        if on_step is not None:
            on_step(step, value)
    return SelfSupResult(best.depth_net, best.pose_net, cfg, best.trace, losses)


def config_dict(cfg):
    d = asdict(cfg)
    return {k: ",".join(map(str, v)) if isinstance(v, tuple) else v for k, v in d.items()}
