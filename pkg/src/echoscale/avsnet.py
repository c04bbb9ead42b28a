"""Supervised audio-visual metric depth.

RGB and the binaural echo spectrogram are encoded separately, fused by
multi-head cross-modal attention with a skip connection, turned into a
global bin partition, refined by attractor stages on decoder features, and
read out through a per-pixel log-binomial over bins.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import Decoder, Encoder, ResidualStack
from .core import ops
from .core.nn import Conv2d, Linear, Module, clip_grad_norm, make_optimizer, warmup_cosine
from .core.tensor import (
    Param,
    Tensor,
    abs_,
    clip,
    concat,
    default_dtype,
    log,
    mean,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    softplus,
    sqrt,
    sum_,
    tensor,
    transpose,
)

log_ = logging.getLogger(__name__)


class ResolutionError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class SiLossParams:
    alpha: float = 10.0
    lam: float = 0.85

    def __post_init__(self):
        if not 0 <= self.lam <= 1 or self.alpha <= 0:
            raise ValueError("need alpha > 0 and 0 <= lambda <= 1")


@dataclass
class BinPartition:
    """Bin centers with their widths; ``centers`` may be per pixel (N,K,H,W)."""

    centers: object
    widths: object = None
    d_min: float = 0.1
    d_max: float = 12.0


@dataclass
class AVSConfig:
    height: int = 64
    width: int = 128
    widths: tuple = (16, 32, 64, 128, 192)
    dec_widths: tuple = (96, 64, 32, 16)
    audio_widths: tuple = None
    n_bins: int = 64
    n_heads: int = 4
    bin_emb: int = 32
    attractors: tuple = (16, 8, 4, 1)
    attractor_alpha: float = 300.0
    attractor_gamma: int = 2
    d_min: float = 0.1
    d_max: float = 12.0
    min_temp: float = 1e-2
    audio_gain: float = 10.0
    use_audio: bool = True
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.dec_widths = tuple(self.dec_widths)
        self.attractors = tuple(self.attractors)
        self.audio_widths = tuple(self.audio_widths or self.widths)
        if self.audio_widths[-1] != self.widths[-1]:
            raise ValueError("audio and visual token widths must match")
        if self.widths[-1] % self.n_heads:
            raise ValueError("token width must be divisible by n_heads")
        if len(self.attractors) != len(self.dec_widths):
            raise ValueError("one attractor stage per decoder feature")


# -- fusion ---------------------------------------------------------------
class CrossModalAttention(Module):
    """Visual queries attend over audio keys/values; output adds the visual tokens."""

    def __init__(self, rng, dim, n_heads, dtype=None):
        dtype = dtype or default_dtype()
        self.n_heads = n_heads
        std = 1.0 / math.sqrt(dim)
        self.w_q = Param((rng.standard_normal((dim, dim)) * std).astype(dtype))
        self.w_k = Param((rng.standard_normal((dim, dim)) * std).astype(dtype))
        self.w_v = Param((rng.standard_normal((dim, dim)) * std).astype(dtype))

    def forward(self, f_v, f_a):
        return cross_modal_attention(f_v, f_a, self.w_q, self.w_k, self.w_v, self.n_heads)


def _split_heads(x, n_heads):
    n, t, e = x.shape
    return transpose(reshape(x, (n, t, n_heads, e // n_heads)), (0, 2, 1, 3))


def cross_modal_attention(f_v, f_a, w_q, w_k, w_v, n_heads):
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated, plus ``f_v``.

    ``f_v`` and ``f_a`` are (N, tokens, E); the projections are (E, E) with
    head h owning columns [h*d_k, (h+1)*d_k).
    """
    f_v, f_a = tensor(f_v), tensor(f_a)
    if f_v.shape != f_a.shape:
        raise ValueError(f"token shapes differ: visual {f_v.shape}, audio {f_a.shape}")
    n, t, e = f_v.shape
    if e % n_heads:
        raise ValueError(f"embedding {e} not divisible by {n_heads} heads")
    dk = e // n_heads
    q = _split_heads(f_v @ w_q, n_heads)
    k = _split_heads(f_a @ w_k, n_heads)
    v = _split_heads(f_a @ w_v, n_heads)
    att = ops.softmax(q @ transpose(k, (0, 1, 3, 2)) * (1.0 / math.sqrt(dk)), axis=-1)
    heads = transpose(att @ v, (0, 2, 1, 3))
    return reshape(heads, (n, t, e)) + f_v


def to_tokens(fmap):
    n, c, h, w = fmap.shape
    return transpose(reshape(fmap, (n, c, h * w)), (0, 2, 1))


def to_grid(tokens, h, w):
    n, t, c = tokens.shape
    return reshape(transpose(tokens, (0, 2, 1)), (n, c, h, w))


# -- bins -----------------------------------------------------------------
def centers_from_widths(widths, d_min, d_max):
    """Normalized widths (N,K) -> metric widths and cumulative bin centers."""
    w = widths * (d_max - d_min)
    return d_min + ops.cumsum(w, axis=-1) - w * 0.5, w


class SeedBins(Module):
    def __init__(self, rng, dim, n_bins, emb, dtype=None):
        self.regressor = Linear(rng, dim, n_bins, dtype=dtype, gain=1.0)
        self.proj1 = Linear(rng, dim, emb, dtype=dtype)
        self.proj2 = Linear(rng, emb, emb, dtype=dtype, gain=1.0)

    def forward(self, fused, d_min, d_max):
        pooled = mean(fused, axis=1)
        widths = ops.softmax(self.regressor(pooled), axis=-1)
        centers, metric_w = centers_from_widths(widths, d_min, d_max)
        emb = self.proj2(relu(self.proj1(fused)))
        return BinPartition(centers, metric_w, d_min, d_max), emb


def seed_bins(logits, d_min, d_max):
    """Bin partition from raw width logits (N,K)."""
    widths = ops.softmax(tensor(logits), axis=-1)
    centers, w = centers_from_widths(widths, d_min, d_max)
    return BinPartition(centers, w, d_min, d_max)


def attractor_shift(centers, attractors, alpha, gamma):
    """Sum over attractors of (a - c) / (1 + alpha |a - c|^gamma).

    ``centers`` (N,K,H,W) and ``attractors`` (N,A,H,W), or any shapes whose
    bin/attractor axis is axis 1.
    """
    c = tensor(centers)
    a = tensor(attractors)
    cs, as_ = c.shape, a.shape
    c5 = reshape(c, (cs[0], 1) + cs[1:])
    a5 = reshape(a, (as_[0], as_[1], 1) + as_[2:])
    dx = a5 - c5
    mag = dx * dx if gamma == 2 else power(abs_(dx), gamma)
    return sum_(dx / (mag * alpha + 1.0), axis=1)


def attractor_adjust(bins, attractors, alpha=300.0, gamma=2):
    """Move centers toward attractor points, clamp to the depth range, re-sort."""
    moved = tensor(bins.centers) + attractor_shift(bins.centers, attractors, alpha, gamma)
    moved = ops.sort(clip(moved, bins.d_min, bins.d_max), axis=1)
    return BinPartition(moved, None, bins.d_min, bins.d_max)


class AttractorStage(Module):
    def __init__(self, rng, c_feat, emb, n_attr, dtype=None):
        self.hidden = Conv2d(rng, c_feat + emb, emb, 1, dtype=dtype)
        self.points = Conv2d(rng, emb, n_attr, 1, dtype=dtype)
        self.emb_out = Conv2d(rng, emb, emb, 1, dtype=dtype)

    def forward(self, feat, emb, bins, alpha, gamma):
        h, w = feat.shape[2:]
        emb = ops.bilinear_resize(emb, h, w)
        hid = relu(self.hidden(concat([feat, emb], axis=1)))
        span = bins.d_max - bins.d_min
        points = sigmoid(self.points(hid)) * span + bins.d_min
        centers = tensor(bins.centers)
        if centers.ndim == 2:
            centers = reshape(centers, centers.shape + (1, 1))
        else:
            centers = ops.bilinear_resize(centers, h, w)
        new = attractor_adjust(BinPartition(centers, None, bins.d_min, bins.d_max), points, alpha, gamma)
        return new, self.emb_out(hid) + emb


# -- log-binomial readout -------------------------------------------------
def log_binomial_probs(q, t, n_bins):
    """Softmax over bins of the tempered log-binomial pmf; bins on axis 1.

    ``q`` in (0,1) and ``t`` > 0 have shape (N,1,H,W) or (H,W).
    """
    q, t = tensor(q), tensor(t)
    if q.ndim == 2:
        q = reshape(q, (1, 1) + q.shape)
        t = reshape(t, (1, 1) + t.shape)
    logits = ops.log_binomial_logits(log(q), log(1.0 - q), t, n_bins)
    return ops.softmax(logits, axis=1)


def log_binomial_from_logit(z, t, n_bins):
    """Same distribution parameterized by the logit of q (numerically safe)."""
    log_q = -softplus(-z)
    log_1mq = -softplus(z)
    return ops.softmax(ops.log_binomial_logits(log_q, log_1mq, t, n_bins), axis=1)


def pseudo_depth(probs, centers):
    """Probability-weighted bin centers, summed over axis 1."""
    probs, centers = tensor(probs), tensor(centers)
    return sum_(probs * centers, axis=1, keepdims=True)


# -- loss -----------------------------------------------------------------
def si_loss(pred, gt, mask=None, params=None):
    """alpha * sqrt(mean(g^2) - lam * mean(g)^2), g = log pred - log gt over the mask."""
    params = params or SiLossParams()
    pred = tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    if mask is None:
        mask = gt > 0
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("si_loss: empty valid mask")
    safe_gt = np.where(mask, gt, 1.0).astype(pred.dtype)
    m = Tensor(mask.astype(pred.dtype))
    g = (log(pred) - Tensor(np.log(safe_gt))) * m
    s1 = sum_(g * g) * (1.0 / n_valid)
    s2 = sum_(g) * (1.0 / n_valid)
    radicand = clip(s1 - s2 * s2 * params.lam, 0.0, None)
    return sqrt(radicand) * params.alpha


# -- model ----------------------------------------------------------------
class AVSNet(Module):
    def __init__(self, cfg=None, dtype=None):
        self.cfg = cfg = cfg or AVSConfig()
        rng = np.random.default_rng(cfg.seed)
        dtype = dtype or default_dtype()
        e = cfg.widths[-1]
        self.visual = Encoder(rng, 3, cfg.widths, dtype)
        self.decoder = Decoder(rng, cfg.widths, cfg.dec_widths, dtype)
        self.audio = ResidualStack(rng, 2, cfg.audio_widths, dtype)
        self.fusion = CrossModalAttention(rng, e, cfg.n_heads, dtype)
        self.seed = SeedBins(rng, e, cfg.n_bins, cfg.bin_emb, dtype)
        self.stages = [
            AttractorStage(rng, c, cfg.bin_emb, a, dtype) for c, a in zip(cfg.dec_widths, cfg.attractors)
        ]
        self.head_hidden = Conv2d(rng, cfg.dec_widths[-1] + cfg.bin_emb, 32, 3, dtype=dtype)
        self.head_out = Conv2d(rng, 32, 2, 1, dtype=dtype)

    # the encoders are exposed separately for tests and saliency
    def encode_visual(self, rgb):
        rgb = tensor(rgb)
        h, w = rgb.shape[-2:]
        if h % 32 or w % 32:
            raise ResolutionError(f"input {h}x{w} must be divisible by 32")
        feats = self.visual(rgb)
        return to_tokens(feats[-1]), feats

    def audio_features(self, spec):
        """Fixed, parameter-free compression log(1 + gain * |S|) fed to the audio encoder."""
        return log(tensor(spec) * self.cfg.audio_gain + 1.0)

    def encode_audio(self, spec, target_h=None, target_w=None, compressed=False):
        cfg = self.cfg
        x = tensor(spec) if compressed else self.audio_features(spec)
        x = ops.bilinear_resize(x, target_h or cfg.height, target_w or cfg.width)
        return to_tokens(self.audio(x))

    def forward(self, rgb, spec=None, compressed=False):
        """``compressed=True`` means ``spec`` already went through :meth:`audio_features`."""
        cfg = self.cfg
        rgb = tensor(rgb)
        f_v, feats = self.encode_visual(rgb)
        bh, bw = feats[-1].shape[2:]
        if cfg.use_audio:
            if spec is None:
                raise ValueError("this model was built with use_audio=True; pass a spectrogram")
            fused = self.fusion(f_v, self.encode_audio(spec, *rgb.shape[-2:], compressed=compressed))
        else:
            fused = f_v
        bins, emb = self.seed(fused, cfg.d_min, cfg.d_max)
        emb = to_grid(emb, bh, bw)
        seed_centers = bins.centers
        for stage, feat in zip(self.stages, self.decoder(feats)):
            bins, emb = stage(feat, emb, bins, cfg.attractor_alpha, cfg.attractor_gamma)
        hid = relu(self.head_hidden(concat([feat, emb], axis=1)))
        out = self.head_out(hid)
        z, traw = out[:, 0:1], out[:, 1:2]
        temp = softplus(traw) + cfg.min_temp
        probs = log_binomial_from_logit(z, temp, cfg.n_bins)
        depth = pseudo_depth(probs, bins.centers)
        depth = ops.bilinear_resize(depth, *rgb.shape[-2:])
        return {"depth": depth, "centers": bins.centers, "seed_centers": seed_centers, "probs": probs}

    def predict(self, rgb, spec=None):
        with no_grad():
            out = self.forward(rgb, spec)
        return out["depth"].data[:, 0]


# -- training -------------------------------------------------------------
@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-3
    optimizer: str = "sgd"
    warmup_frac: float = 0.05
    clip_norm: float = 10.0
    eval_every: int = 100
    max_depth: float = 12.0
    seed: int = 0


@dataclass
class TrainResult:
    model: AVSNet
    trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    best_abs_rel: float = float("inf")
    best_step: int = -1


def _stack(items, dtype):
    return np.stack(items).astype(dtype)


def batch_abs_rel(pred, gt, max_depth):
    mask = (gt > 0) & (gt < max_depth)
    return float(np.mean(np.abs(pred[mask] - gt[mask]) / gt[mask]))


def train_avsnet(dataset, cfg=None, train_cfg=None, use_audio=True, val=None, on_step=None):
    """Fit an AVSNet with the scale-invariant loss.

    ``dataset`` and ``val`` are sequences of ``(rgb, spectrogram, depth)``
    triplets. The returned model carries the parameters with the lowest
    validation Abs Rel (training set if ``val`` is None).
    """
    cfg = copy.copy(cfg or AVSConfig())
    cfg.use_audio = use_audio
    tc = train_cfg or TrainConfig()
    model = AVSNet(cfg)
    dtype = model.parameters()[0].dtype
    params = model.parameters()
    opt = make_optimizer(tc.optimizer, params, tc.lr)
    rng = np.random.default_rng(tc.seed)
    val = val if val is not None else dataset
    result = TrainResult(model)
    best_state = None
    order = []
    for step in range(tc.steps):
        if len(order) < tc.batch:
            order += list(rng.permutation(len(dataset)))
        idx, order = order[: tc.batch], order[tc.batch :]
        rgb = _stack([dataset[i][0] for i in idx], dtype)
        spec = _stack([dataset[i][1] for i in idx], dtype) if use_audio else None
        gt = _stack([dataset[i][2] for i in idx], dtype)[:, None]
        opt.lr = warmup_cosine(step, tc.steps, tc.lr, tc.warmup_frac)
        opt.zero_grad()
        loss = si_loss(model(rgb, spec)["depth"], gt, (gt > 0) & (gt < tc.max_depth))
        value = float(loss.data)
        result.trace.append(value)
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}", result.trace)
        loss.backward()
        if tc.clip_norm:
            clip_grad_norm(params, tc.clip_norm)
        opt.step()
        if on_step is not None:
            on_step(step, value)
        last = step == tc.steps - 1
        if (tc.eval_every and (step + 1) % tc.eval_every == 0) or last:
            score = evaluate_abs_rel(model, val, tc.max_depth)
            result.val_trace.append((step, score))
            if score < result.best_abs_rel:
                result.best_abs_rel, result.best_step = score, step
                best_state = model.state_dict()
    if best_state is not None:
        model.load_state_dict(best_state)
    return result


def predict_dataset(model, data, batch=8):
    dtype = model.parameters()[0].dtype
    out = []
    for i in range(0, len(data), batch):
        chunk = data[i : i + batch]
        rgb = _stack([d[0] for d in chunk], dtype)
        spec = _stack([d[1] for d in chunk], dtype) if model.cfg.use_audio else None
        out.extend(model.predict(rgb, spec))
    return out


def evaluate_abs_rel(model, data, max_depth=12.0):
    preds = predict_dataset(model, data)
    return float(np.mean([batch_abs_rel(p, d[2], max_depth) for p, d in zip(preds, data)]))


# -- saliency -------------------------------------------------------------
def saliency(model, rgb, spec, wrt="features"):
    """|d mean(depth) / d audio input| summed over channels and frequencies.

    ``wrt="features"`` differentiates at the audio encoder's input, the
    compressed spectrogram; ``wrt="magnitude"`` goes through the compression
    to the raw STFT magnitude, which scales every entry by
    gain / (1 + gain * |S|) and so favours near-silent frames.

    Returns ``(time_profile (T,), full_map (2,F,T))``.
    """
    if wrt not in ("features", "magnitude"):
        raise ValueError(f"wrt must be 'features' or 'magnitude', got {wrt!r}")
    spec = np.asarray(spec)
    if not model.cfg.use_audio:
        return np.zeros(spec.shape[-1]), np.zeros(spec.shape)
    dtype = model.parameters()[0].dtype
    rgb_t = Tensor(np.asarray(rgb, dtype=dtype)[None])
    x = spec.astype(dtype)[None]
    if wrt == "features":
        x = np.log1p(x * model.cfg.audio_gain)
    x_t = Tensor(x, requires_grad=True)
    out = model(rgb_t, x_t, compressed=wrt == "features")["depth"]
    mean(out).backward()
    for p in model.parameters():
        p.zero_grad()
    full = np.abs(x_t.grad[0])
    return full.sum(axis=(0, 1)), full


def config_dict(cfg):
    d = asdict(cfg)
    return {k: ",".join(map(str, v)) if isinstance(v, tuple) else v for k, v in d.items()}
