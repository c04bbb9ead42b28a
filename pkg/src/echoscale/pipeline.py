"""End-to-end helpers: synthetic datasets, the two training stages and
scale-transfer evaluation, as used by the demos and acceptance tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import avsnet, dataio, metrics, scaling, selfsup


def random_corridor(seed, base=None, scale=1.0, end_range=(3.0, 5.5), width_range=(0.8, 1.6)):
    """Corridor geometry and texture drawn from ``seed``."""
    base = base or dataio.CorridorSpec()
    rng = np.random.default_rng(seed)
    return replace(
        base,
        end_distance=float(rng.uniform(*end_range)),
        half_width=float(rng.uniform(*width_range)),
        texture_seed=int(seed),
        scale=scale,
    )


def ambiguous_pairs(seeds, scale=2.0, base=None):
    """One ``synth_ambiguous_pair`` per seed, each on its own random corridor."""
    return [dataio.synth_ambiguous_pair(random_corridor(s, base), scale, seed=s) for s in seeds]


def single_wall(distance, seed=0, base=None):
    """One frame facing a bare wall ``distance`` meters away.

    The wall is built at 1 m and scaled, so the image is the same for every
    distance and only the echo carries it.
    """
    base = base or dataio.CorridorSpec()
    spec = replace(base, end_distance=1.0, half_width=math.inf, scale=float(distance), texture_seed=int(seed))
    return dataio.synth_scene(spec, 1, seed=seed)[0]


def saliency_peaks(model, samples, n_fft=512, hop=128):
    """STFT frame of maximum spectrogram saliency for each sample."""
    return [int(np.argmax(avsnet.saliency(model, s.rgb, s.spectrogram(n_fft, hop))[0])) for s in samples]


def triplets(samples, n_fft=512, hop=128):
    """``(rgb, spectrogram, depth)`` tuples for the metric-depth trainer."""
    return [(s.rgb, s.spectrogram(n_fft, hop), s.depth_gt) for s in samples]


def pair_abs_rel(model, pairs, max_depth=12.0):
    """Abs Rel averaged over both members of every pair."""
    flat = [s for p in pairs for s in p]
    preds = avsnet.predict_dataset(model, triplets(flat))
    return float(np.mean([metrics.compute_metrics(p, s.depth_gt, max_depth).abs_rel for p, s in zip(preds, flat)]))


def corridor_sequences(seeds, n_frames, scales=(1.0, 2.0), base=None):
    """Frame sequences, scene ``i`` at ``scales[i % len(scales)]``."""
    frames = []
    for i, s in enumerate(seeds):
        spec = random_corridor(s, base, float(scales[i % len(scales)]))
        frames += dataio.synth_scene(spec, n_frames, seed=s, scene_id=i)
    return frames


def frame_triples(frames, interval=20):
    idx = dataio.make_triples(frames, interval)
    return [(frames[a].rgb, frames[b].rgb, frames[c].rgb) for a, b, c in idx]


@dataclass
class ScalingOutcome:
    unscaled: metrics.MetricsReport
    scaled: metrics.MetricsReport
    factors: list


def scale_and_score(relative, pseudo, gts, method="median", max_depth=12.0):
    """Scale each relative map with factors from its pseudo-dense map and score it.

    Factors are computed over pixels where the pseudo depth is below
    ``max_depth``; only the prediction side is used, never the ground truth.
    """
    unscaled, scaled, factors = [], [], []
    for r, m, g in zip(relative, pseudo, gts):
        m = metrics.resize_to(m, r.shape)
        out, factor = scaling.apply_scale(r, m, method, m < max_depth)
        unscaled.append(metrics.compute_metrics(r, g, max_depth))
        scaled.append(metrics.compute_metrics(out, g, max_depth))
        factors.append(factor)
    return ScalingOutcome(metrics.mean_report(unscaled), metrics.mean_report(scaled), factors)


def train_pair_models(train_pairs, val_pairs=None, cfg=None, train_cfg=None):
    """RGB-Echoes and RGB-only AVS-Nets trained identically on the same pairs."""
    train = triplets([s for p in train_pairs for s in p])
    val = triplets([s for p in val_pairs for s in p]) if val_pairs else None
    echoes = avsnet.train_avsnet(train, cfg, train_cfg, use_audio=True, val=val)
    rgb_only = avsnet.train_avsnet(train, cfg, train_cfg, use_audio=False, val=val)
    return echoes, rgb_only


def train_relative(frames, K, cfg=None, interval=20):
    return selfsup.train_selfsup(frame_triples(frames, interval), K, cfg)
