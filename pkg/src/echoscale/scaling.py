"""Global scale transfer from pseudo-dense metric depth onto relative depth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLAMP_FLOOR = 1e-3


class ScaleError(ValueError):
    pass


@dataclass
class ScaleFactor:
    method: str
    s: float = float("nan")
    mu_r: float = float("nan")
    sigma_r: float = float("nan")
    mu_m: float = float("nan")
    sigma_m: float = float("nan")

    def to_text(self):
        keys = ("s",) if self.method == "median" else ("mu_r", "sigma_r", "mu_m", "sigma_m")
        lines = [f"method = {self.method}"] + [f"{k} = {getattr(self, k)!r}" for k in keys]
        return "\n".join(lines) + "\n"


def _population(relative, pseudo, valid_mask):
    relative = np.asarray(relative, dtype=np.float64)
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if relative.shape != pseudo.shape:
        raise ScaleError(f"shape mismatch: relative {relative.shape} vs pseudo {pseudo.shape}")
    mask = np.isfinite(relative) & np.isfinite(pseudo)
    if valid_mask is not None:
        mask &= np.asarray(valid_mask, dtype=bool)
    if not mask.any():
        raise ScaleError("empty valid mask")
    return relative, relative[mask], pseudo[mask]


def median_scale(relative, pseudo, valid_mask=None):
    """Multiply ``relative`` by median(pseudo) / median(relative) over the mask."""
    relative, r, m = _population(relative, pseudo, valid_mask)
    med_r = float(np.median(r))
    if med_r <= 0:
        raise ScaleError(f"median of relative depth must be positive, got {med_r}")
    s = float(np.median(m)) / med_r
    return relative * s, ScaleFactor("median", s=s)


def meanstd_scale(relative, pseudo, valid_mask=None):
    """Match mean and standard deviation of ``relative`` to ``pseudo``; clamp at 1 mm."""
    relative, r, m = _population(relative, pseudo, valid_mask)
    mu_r, sigma_r = float(r.mean()), float(r.std())
    if sigma_r <= 0 or sigma_r < 1e-12 * max(1.0, abs(mu_r)):
        raise ScaleError("relative depth is constant over the mask; std is zero")
    mu_m, sigma_m = float(m.mean()), float(m.std())
    out = (relative - mu_r) / sigma_r * sigma_m + mu_m
    return np.maximum(out, CLAMP_FLOOR), ScaleFactor("meanstd", mu_r=mu_r, sigma_r=sigma_r, mu_m=mu_m, sigma_m=sigma_m)


def apply_scale(relative, pseudo, method="median", valid_mask=None):
    if method == "median":
        return median_scale(relative, pseudo, valid_mask)
    if method == "meanstd":
        return meanstd_scale(relative, pseudo, valid_mask)
    raise ScaleError(f"unknown scaling method {method!r}")
