"""Layers, parameter containers and optimizers."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Param, Tensor, default_dtype, relu


class Module:
    """Parameter container; parameters are discovered through attributes."""

    def named_parameters(self, prefix=""):
        for key in sorted(vars(self)):
            val = vars(self)[key]
            name = f"{prefix}{key}"
            if isinstance(val, Param):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Param):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, pad=None, bias=True, dtype=None, zero=False):
        dtype = dtype or default_dtype()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        shape = (c_out, c_in, k, k)
        w = np.zeros(shape, dtype) if zero else kaiming(rng, shape, c_in * k * k, dtype)
        self.weight = Param(w)
        self.bias = Param(np.zeros(c_out, dtype)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, dtype=None, gain=2.0):
        dtype = dtype or default_dtype()
        self.weight = Param((rng.standard_normal((d_in, d_out)) * math.sqrt(gain / d_in)).astype(dtype))
        self.bias = Param(np.zeros(d_out, dtype)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class ConvReLU(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, dtype=None):
        self.conv = Conv2d(rng, c_in, c_out, k, stride, dtype=dtype)

    def forward(self, x):
        return relu(self.conv(x))


class SGD:
    """Momentum SGD; ``lr`` is read per step so schedules can drive it."""

    def __init__(self, params, lr=1e-3, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, buf in zip(self.params, self._buf):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= self.lr * buf


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind, params, lr):
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=0.9)
    if kind == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def warmup_cosine(step, total, base_lr, warmup_frac=0.05, final_frac=0.0):
    """Linear warmup over the first ``warmup_frac`` of steps, then cosine decay."""
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total - warm)
    prog = min(1.0, (step - warm) / span)
    return base_lr * (final_frac + (1 - final_frac) * 0.5 * (1 + math.cos(math.pi * prog)))


def grad_norm(params):
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))


def clip_grad_norm(params, max_norm):
    norm = grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


__all__ = [
    "Module",
    "Conv2d",
    "Linear",
    "ConvReLU",
    "SGD",
    "Adam",
    "make_optimizer",
    "warmup_cosine",
    "clip_grad_norm",
    "grad_norm",
    "Tensor",
]
