"""Depth evaluation: Abs Rel, Sq Rel, RMSE, RMSE log and threshold accuracies."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core.ops import resize_matrix

COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
HEADER = ("Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d1", "d2", "d3")


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    valid_count: int

    def row(self):
        return tuple(getattr(self, c) for c in COLUMNS)

    def as_dict(self):
        return asdict(self)


def valid_mask(gt, max_depth):
    """Ground truth that is non-zero and strictly below ``max_depth``."""
    return (gt > 0) & (gt < max_depth)


def resize_to(pred, shape):
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape == tuple(shape):
        return pred
    ry = resize_matrix(pred.shape[0], shape[0])
    rx = resize_matrix(pred.shape[1], shape[1])
    return ry @ pred @ rx.T


def compute_metrics(pred, gt, max_depth=12.0):
    pred = np.squeeze(np.asarray(pred, dtype=np.float64))
    gt = np.squeeze(np.asarray(gt, dtype=np.float64))
    pred = resize_to(pred, gt.shape)
    mask = valid_mask(gt, max_depth)
    if not mask.any():
        raise ValueError("no valid ground-truth pixels (need 0 < gt < max_depth)")
    p, g = pred[mask], gt[mask]
    if np.any(p <= 0):
        raise ValueError("prediction must be positive on valid pixels")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        valid_count=int(mask.sum()),
    )


def mean_report(reports):
    """Average a list of per-sample reports (valid_count is summed)."""
    vals = {c: float(np.mean([getattr(r, c) for r in reports])) for c in COLUMNS}
    return MetricsReport(**vals, valid_count=int(sum(r.valid_count for r in reports)))


def format_table(rows, labels=None, label_header="sample"):
    """Tab-separated table in the order Abs Rel, Sq Rel, RMSE, RMSE log, d1, d2, d3."""
    lines = ["\t".join((label_header,) + HEADER)]
    for i, r in enumerate(rows):
        label = labels[i] if labels else str(i)
        lines.append("\t".join([label] + [f"{v:.4f}" for v in r.row()]))
    return "\n".join(lines) + "\n"
