"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradReport:
    max_rel_error: float
    tolerance: float
    checked: int
    nonfinite: bool = False
    per_input: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.nonfinite and self.max_rel_error <= self.tolerance


def grad_check(fn, inputs, eps=1e-5, tolerance=1e-5, max_coords=None, seed=0):
    """Compare analytic and central-difference gradients of ``fn``.

    ``fn`` maps the tensors in ``inputs`` to one output tensor; it is reduced
    to a scalar with a fixed random projection so every output entry matters.
    Inputs with ``requires_grad`` are checked. When ``max_coords`` is set, that
    many coordinates per input are sampled instead of all of them.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``
    where ``floor`` is 1e-4 of the largest analytic magnitude for that input
    (plus 1e-10), so coordinates with near-zero gradient are judged against
    the gradient's own scale rather than against roundoff.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape).astype(out.dtype)

    def scalar():
        return float((fn(*inputs).data * proj).sum())

    for t in inputs:
        if t.requires_grad:
            t.grad = None
    out.backward(proj)

    worst, checked, nonfinite, per_input = 0.0, 0, False, []
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        t.data = np.ascontiguousarray(t.data)
        if not np.all(np.isfinite(analytic)):
            nonfinite = True
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        floor = 1e-4 * float(np.abs(analytic).max(initial=0.0)) + 1e-10
        err_t = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = scalar()
            flat[i] = old - eps
            fm = scalar()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            if not np.isfinite(num):
                nonfinite = True
                continue
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            err_t = max(err_t, err)
            checked += 1
        per_input.append(err_t)
        worst = max(worst, err_t)
    return GradReport(worst, tolerance, checked, nonfinite, per_input)


def as_inputs(*arrays, dtype=np.float64):
    """Fresh grad-requiring tensors, copied into ``dtype``."""
    return [Tensor(np.array(a, dtype=dtype), requires_grad=True) for a in arrays]
