"""Array operators with analytic gradients: convolution, resampling, softmax,
order statistics and the axis-angle rotation."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, make, tensor, unbroadcast


class ShapeError(ValueError):
    pass


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of an NCHW input with an OIkk weight.

    The padded input is split into stride x stride polyphase images, each
    stored pixel-major as (N*Hq*Wq, C). Every kernel tap then reads a
    contiguous row block of one phase at a fixed offset, so the convolution
    is a sum of kh*kw GEMMs with no im2col copy. Output rows that straddle a
    row or image boundary are computed and discarded.
    """
    x = tensor(x)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    s = stride
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    hq, wq = -(-hp // s), -(-wp // s)
    dt = x.dtype
    xp = np.zeros((n, hq * s, wq * s, c), dtype=dt)
    xp[:, pad : pad + h, pad : pad + w, :] = x.data.transpose(0, 2, 3, 1)
    phases = {
        (a, b): np.ascontiguousarray(xp[:, a::s, b::s, :]).reshape(-1, c)
        for a in range(min(s, kh))
        for b in range(min(s, kw))
    }
    taps = [(i, j, (i % s, j % s), (i // s) * wq + (j // s)) for i in range(kh) for j in range(kw)]
    span = n * hq * wq - max(t[3] for t in taps)
    wt = weight.data
    wtaps = {(i, j): np.ascontiguousarray(wt[:, :, i, j].T) for i, j, _, _ in taps}
    acc = np.zeros((n * hq * wq, o), dtype=dt)
    head = acc[:span]
    for i, j, ph, off in taps:
        head += phases[ph][off : off + span] @ wtaps[i, j]
    out = acc.reshape(n, hq, wq, o)[:, :ho, :wo, :].transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gq = np.zeros((n, hq, wq, o), dtype=dt)
        gq[:, :ho, :wo, :] = g.transpose(0, 2, 3, 1)
        gflat = gq.reshape(-1, o)[:span]
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.empty_like(wt)
            for i, j, ph, off in taps:
                gw[:, :, i, j] = gflat.T @ phases[ph][off : off + span]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gph = {k: np.zeros_like(v) for k, v in phases.items()}
            for i, j, ph, off in taps:
                gph[ph][off : off + span] += gflat @ wtaps[i, j].T
            gxp = np.zeros((n, hq * s, wq * s, c), dtype=dt)
            for (a, b), v in gph.items():
                gxp[:, a::s, b::s, :] = v.reshape(n, hq, wq, c)
            gx = gxp[:, pad : pad + h, pad : pad + w, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, lambda g: bw(g)[: len(parents)])


def softmax(x, axis=-1):
    x = tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), bw)


def log_softmax(x, axis=-1):
    x = tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def resize_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic matrix of 1-D linear interpolation, align_corners=False."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def bilinear_resize(x, out_h, out_w):
    """Resize the last two axes; constant fields are preserved exactly."""
    x = tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = resize_matrix(h, out_h, x.dtype)
    rx = resize_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ry, x.data), rx.T)
    return make(out, (x,), lambda g: (np.matmul(np.matmul(ry.T, g), rx),))


def box3(x):
    """3x3 mean over every window of an already padded NCHW map ("valid" mode)."""
    x = tensor(x)
    h, w = x.shape[-2] - 2, x.shape[-1] - 2
    d = x.data
    rows = d[..., 0:h, :] + d[..., 1 : h + 1, :] + d[..., 2 : h + 2, :]
    out = (rows[..., 0:w] + rows[..., 1 : w + 1] + rows[..., 2 : w + 2]) / 9.0

    def bw(g):
        gp = np.zeros_like(d)
        g9 = g / 9.0
        for i in range(3):
            for j in range(3):
                gp[..., i : i + h, j : j + w] += g9
        return (gp,)

    return make(out.astype(d.dtype, copy=False), (x,), bw)


def take(x, indices, axis):
    """Gather along ``axis`` with a constant integer index vector."""
    x = tensor(x)
    indices = np.asarray(indices)
    axis = axis % x.ndim

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return make(np.take(x.data, indices, axis=axis), (x,), bw)


def pad_reflect(x, pad=1):
    """Reflection padding of the last two axes."""
    h, w = x.shape[-2:]
    iy = np.abs(np.arange(-pad, h + pad))
    iy = np.where(iy > h - 1, 2 * (h - 1) - iy, iy)
    ix = np.abs(np.arange(-pad, w + pad))
    ix = np.where(ix > w - 1, 2 * (w - 1) - ix, ix)
    return take(take(x, iy, -2), ix, -1)


def cumsum(x, axis):
    x = tensor(x)
    out = np.cumsum(x.data, axis=axis)

    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return make(out, (x,), bw)


def sort(x, axis):
    """Stable ascending sort; the gradient follows the permutation."""
    x = tensor(x)
    order = np.argsort(x.data, axis=axis, kind="stable")
    out = np.take_along_axis(x.data, order, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, order, g, axis=axis)
        return (full,)

    return make(out, (x,), bw)


def min_axis(x, axis):
    """Minimum along ``axis`` and the winning index."""
    x = tensor(x)
    idx = np.argmin(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return make(out, (x,), bw), idx


def grid_sample(img, coords):
    """Bilinear lookup of ``img`` (N,C,H,W) at pixel coordinates (N,h,w,2).

    ``coords[..., 0]`` is the column, ``coords[..., 1]`` the row. Taps that
    fall outside the image contribute zero. Returns the sampled (N,C,h,w)
    tensor and a boolean in-bounds mask of shape (N,h,w).
    """
    img, coords = tensor(img), tensor(coords)
    n, c, hs, ws = img.shape
    x = coords.data[..., 0]
    y = coords.data[..., 1]
    tol = 1e-4
    valid = (x >= -tol) & (x <= ws - 1 + tol) & (y >= -tol) & (y <= hs - 1 + tol)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0).astype(img.dtype)
    fy = (y - y0).astype(img.dtype)
    flat = img.data.reshape(n, c, hs * ws)
    taps = []
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        xi, yi = x0 + dx, y0 + dy
        inb = (xi >= 0) & (xi < ws) & (yi >= 0) & (yi < hs)
        lin = np.where(inb, yi * ws + xi, 0).reshape(n, -1)
        vals = np.take_along_axis(flat, lin[:, None, :], axis=2).reshape(n, c, *x.shape[1:])
        vals = vals * inb[:, None]
        taps.append((lin, inb, wgt, vals))
    out = sum(t[2][:, None] * t[3] for t in taps)
    v00, v01, v10, v11 = (t[3] for t in taps)

    def bw(g):
        gimg = None
        if img.requires_grad:
            gflat = np.zeros((n, c, hs * ws), dtype=img.dtype)
            for lin, inb, wgt, _ in taps:
                contrib = (g * (wgt * inb)[:, None]).reshape(n, c, -1)
                for b in range(n):
                    base = np.arange(c)[:, None] * (hs * ws) + lin[b][None, :]
                    gflat[b] += np.bincount(
                        base.ravel(), weights=contrib[b].ravel(), minlength=c * hs * ws
                    ).reshape(c, hs * ws)
            gimg = gflat.reshape(img.shape)
        gc = None
        if coords.requires_grad:
            dx_ = (1 - fy)[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
            dy_ = (1 - fx)[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
            gc = np.stack([(g * dx_).sum(axis=1), (g * dy_).sum(axis=1)], axis=-1)
        return gimg, gc

    return make(out.astype(img.dtype, copy=False), (img, coords), bw), valid


def _skew(v):
    """Cross-product matrices for a batch of 3-vectors, shape (..., 3, 3)."""
    z = np.zeros(v.shape[:-1], dtype=v.dtype)
    return np.stack(
        [
            np.stack([z, -v[..., 2], v[..., 1]], -1),
            np.stack([v[..., 2], z, -v[..., 0]], -1),
            np.stack([-v[..., 1], v[..., 0], z], -1),
        ],
        -2,
    )


def _rodrigues_coeffs(s):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives w.r.t. s = t^2."""
    t = np.sqrt(s)
    small = s < 1e-6
    ts = np.where(small, 1.0, t)
    a = np.where(small, 1 - s / 6 + s**2 / 120, np.sin(ts) / ts)
    b = np.where(small, 0.5 - s / 24 + s**2 / 720, (1 - np.cos(ts)) / np.where(small, 1.0, s))
    ss = np.where(small, 1.0, s)
    da = np.where(small, -1 / 6 + s / 60, (np.cos(ts) - a) / (2 * ss))
    db = np.where(small, -1 / 24 + s / 360, (a / 2 - b) / ss)
    return a, b, da, db


def rodrigues(r):
    """Rotation matrices (...,3,3) from axis-angle vectors (...,3)."""
    r = tensor(r)
    v = r.data
    s = (v * v).sum(-1)
    a, b, da, db = _rodrigues_coeffs(s)
    k = _skew(v)
    k2 = k @ k
    eye = np.eye(3, dtype=v.dtype)
    out = eye + a[..., None, None] * k + b[..., None, None] * k2
    basis = [_skew(np.eye(3, dtype=v.dtype)[i]) for i in range(3)]

    def bw(g):
        gr = np.empty_like(v)
        for i, e in enumerate(basis):
            d = (
                2 * v[..., i, None, None] * (da[..., None, None] * k + db[..., None, None] * k2)
                + a[..., None, None] * e
                + b[..., None, None] * (e @ k + k @ e)
            )
            gr[..., i] = (g * d).sum(axis=(-1, -2))
        return (gr,)

    return make(out.astype(v.dtype, copy=False), (r,), bw)


def log_binomial_logits(log_q, log_1mq, t, k_bins):
    """Per-bin log-binomial scores divided by temperature, bins on axis 1.

    ``log_q``, ``log_1mq`` and ``t`` have shape (N,1,H,W).
    """
    from math import lgamma

    k = np.arange(k_bins, dtype=np.float64)
    n = k_bins - 1
    coef = np.array([lgamma(n + 1) - lgamma(i + 1) - lgamma(n - i + 1) for i in range(k_bins)])
    dtype = log_q.dtype
    kk = Tensor(k.reshape(1, -1, 1, 1).astype(dtype))
    nk = Tensor((n - k).reshape(1, -1, 1, 1).astype(dtype))
    cc = Tensor(coef.reshape(1, -1, 1, 1).astype(dtype))
    return (kk * log_q + nk * log_1mq + cc) / t


__all__ = [
    "ShapeError",
    "conv2d",
    "softmax",
    "log_softmax",
    "bilinear_resize",
    "resize_matrix",
    "box3",
    "take",
    "pad_reflect",
    "cumsum",
    "sort",
    "min_axis",
    "grid_sample",
    "rodrigues",
    "log_binomial_logits",
    "unbroadcast",
]
