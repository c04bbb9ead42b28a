"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line; the same lines
are repeated in the pytest terminal summary. Criteria 6 and 8 share the
trained audio-visual models through a module-scoped fixture, so their
runtimes are reported separately from the shared training time.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from echoscale import avsnet, pipeline, selfsup
from echoscale.avsnet import (
    attractor_adjust,
    cross_modal_attention,
    log_binomial_from_logit,
    log_binomial_probs,
    pseudo_depth,
    seed_bins,
    si_loss,
)
from echoscale.cli import run
from echoscale.core import ops
from echoscale.core.gradcheck import as_inputs, grad_check
from echoscale.core.tensor import Tensor, mul, reshape
from echoscale.geometry import CameraIntrinsics, Pose, backproject, inverse_warp, project
from echoscale.metrics import compute_metrics
from echoscale.scaling import median_scale
from echoscale.selfsup import photometric_loss, smoothness_loss, ssim
from echoscale.signal import delay_frame

pytestmark = pytest.mark.acceptance


# -- 1. gradient suite ------------------------------------------------------
def _conv(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, w, b = as_inputs(rng.standard_normal((1, 2, 5, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))
    return lambda x, w, b: ops.conv2d(x, w, b, stride, pad), [x, w, b]


def _attention(rng):
    args = as_inputs(*(rng.standard_normal(s) for s in [(1, 4, 8), (1, 4, 8), (8, 8), (8, 8), (8, 8)]))
    return lambda *a: cross_modal_attention(*a, 2), args


def _bins_head(rng):
    # width logits -> seed centers -> attractor refinement -> log-binomial readout
    k = 6
    ins = as_inputs(
        rng.standard_normal((1, k)),
        rng.uniform(0.5, 11.5, (1, 2, 2, 2)),
        rng.standard_normal((1, 1, 2, 2)),
        rng.uniform(0.5, 2.0, (1, 1, 2, 2)),
    )
    ones = Tensor(np.ones((1, 1, 2, 2)))

    def f(logits, att, z, t):
        centers = mul(reshape(seed_bins(logits, 0.1, 12.0).centers, (1, k, 1, 1)), ones)
        bins = attractor_adjust(avsnet.BinPartition(centers, None, 0.1, 12.0), att, 300.0, 2)
        return pseudo_depth(log_binomial_from_logit(z, t, k), bins.centers)

    return f, ins


def _log_binomial(rng):
    k = int(rng.integers(3, 17))
    q, t = as_inputs(rng.uniform(0.05, 0.95, (1, 1, 2, 2)), rng.uniform(0.3, 3.0, (1, 1, 2, 2)))
    return lambda q, t: log_binomial_probs(q, t, k), [q, t]


def _si(rng):
    (pred,) = as_inputs(rng.uniform(0.5, 5.0, (1, 1, 4, 4)))
    gt = rng.uniform(0.5, 5.0, (1, 1, 4, 4))
    return lambda p: si_loss(p, gt), [pred]


def _ssim(rng):
    x, y = as_inputs(rng.random((1, 2, 5, 5)), rng.random((1, 2, 5, 5)))
    return ssim, [x, y]


def _separated(rng, base, shape):
    # keep |a - b| away from zero so the L1 kink is not straddled
    return base + rng.choice([-1.0, 1.0], shape) * rng.uniform(0.05, 0.3, shape)


def _photometric(rng):
    shape = (1, 3, 5, 5)
    t = rng.random(shape)
    target, s1, s2 = as_inputs(t, _separated(rng, t, shape), _separated(rng, t, shape))
    return lambda t, a, b: photometric_loss(t, [a, b])[0], [target, s1, s2]


def _smoothness(rng):
    (disp,) = as_inputs(rng.uniform(0.1, 1.0, (1, 1, 5, 6)))
    rgb = rng.random((1, 3, 5, 6))
    return lambda d: smoothness_loss(d, rgb), [disp]


def _warp(rng):
    # bilinear sampling has kinks on integer pixel lines; redraw until every
    # sample sits at least 1e-3 px from one so the central difference is smooth
    K = CameraIntrinsics.for_image(6, 8)
    while True:
        ins = as_inputs(
            rng.random((1, 2, 6, 8)), rng.uniform(1.5, 3.0, (1, 6, 8)), rng.normal(0, 0.02, (1, 3)), rng.normal(0, 0.05, (1, 3))
        )
        pix = project(backproject(ins[1].data, K), Pose(ins[2].data, ins[3].data), K)[0].data
        if np.abs(pix - np.round(pix)).min() > 1e-3:
            break
    return lambda s, d, r, t: inverse_warp(s, d, Pose(r, t), K)[0], ins


GRAD_OPS = {
    "conv": _conv,
    "attention": _attention,
    "bins head": _bins_head,
    "log-binomial": _log_binomial,
    "si loss": _si,
    "ssim": _ssim,
    "photometric": _photometric,
    "smoothness": _smoothness,
    "inverse warp": _warp,
}


def test_criterion_1_gradient_suite(criterion):
    start = time.perf_counter()
    worst, failures = {}, []
    for name, make in GRAD_OPS.items():
        worst[name] = 0.0
        for seed in range(100):
            fn, ins = make(np.random.default_rng(seed))
            rep = grad_check(fn, ins)
            worst[name] = max(worst[name], rep.max_rel_error)
            if not rep.passed:
                failures.append((name, seed, rep.max_rel_error))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    detail = f"max rel err {max(worst.values()):.1e} over 9 ops x 100 instances, {elapsed:.0f}s; failures {failures[:3]}"
    assert criterion(1, ok, detail), worst


# -- 2. median invariant ----------------------------------------------------
def _median(values):
    v = sorted(values)
    n = len(v)
    return v[n // 2] if n % 2 else 0.5 * (v[n // 2 - 1] + v[n // 2])


def test_criterion_2_median_invariant(criterion):
    worst, order_ok = 0.0, True
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(3, 17, 2))
        r = rng.uniform(0.01, 20.0, shape) ** rng.uniform(0.5, 2.0)
        m = rng.uniform(0.1, 30.0, shape)
        out, _ = median_scale(r, m)
        worst = max(worst, abs(_median(out.ravel().tolist()) - _median(m.ravel().tolist())))
        order_ok &= bool(np.array_equal(np.argsort(out, axis=None, kind="stable"), np.argsort(r, axis=None, kind="stable")))
    ok = worst <= 1e-6 and order_ok
    assert criterion(2, ok, f"max |median diff| {worst:.1e}, ordering preserved {order_ok}")


# -- 3. SI loss closed form -------------------------------------------------
def test_criterion_3_si_closed_form(criterion):
    gt = np.random.default_rng(0).uniform(0.5, 10.0, (2, 1, 16, 16))
    errs = {}
    for c in (0.5, 1.0, math.e, 3.0):
        value = float(si_loss(Tensor(gt * c), gt).data)
        errs[c] = abs(value - 10 * math.sqrt(0.15) * abs(math.log(c)))
        if c == 1.0:
            errs[c] = value
    ok = max(errs.values()) <= 1e-5 and errs[1.0] == 0.0
    assert criterion(3, ok, f"max err {max(errs.values()):.1e}, c=1 gives {errs[1.0]}")


# -- 4. log-binomial normalization ------------------------------------------
def test_criterion_4_log_binomial(criterion):
    worst, argmax_ok = 0.0, True
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        q, t, k = rng.uniform(1e-3, 1 - 1e-3), rng.uniform(0.05, 5.0), int(rng.integers(2, 129))
        p = log_binomial_probs(np.array([[q]]), np.array([[t]]), k).data[0, :, 0, 0]
        worst = max(worst, abs(p.sum() - 1.0))
        p1 = log_binomial_probs(np.array([[q]]), np.array([[1.0]]), k).data[0, :, 0, 0]
        pmf = [math.comb(k - 1, i) * q**i * (1 - q) ** (k - 1 - i) for i in range(k)]
        argmax_ok &= int(np.argmax(p1)) == int(np.argmax(pmf))
    ok = worst <= 1e-6 and argmax_ok
    assert criterion(4, ok, f"max |sum - 1| {worst:.1e}, argmax agrees {argmax_ok}")


# -- 5. metrics oracle ------------------------------------------------------
def _scalar_metrics(pred, gt, max_depth):
    n = 0
    acc = [0.0] * 4
    hits = [0] * 3
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g > 0 and g < max_depth:
            n += 1
            acc[0] += abs(p - g) / g
            acc[1] += (p - g) ** 2 / g
            acc[2] += (p - g) ** 2
            acc[3] += (math.log(p) - math.log(g)) ** 2
            ratio = max(p / g, g / p)
            for i in range(3):
                hits[i] += ratio < 1.25 ** (i + 1)
    return [acc[0] / n, acc[1] / n, math.sqrt(acc[2] / n), math.sqrt(acc[3] / n)] + [h / n for h in hits], n


def test_criterion_5_metrics_oracle(criterion):
    worst, count_ok = 0.0, True
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(0.1, 14.0, (16, 16))
        gt[rng.random((16, 16)) < 0.1] = 0.0
        gt[rng.random((16, 16)) < 0.05] = 12.0
        pred = gt * rng.uniform(0.5, 1.6, (16, 16)) + (gt == 0) * 1.0
        rep = compute_metrics(pred, gt, 12.0)
        ref, n = _scalar_metrics(pred, gt, 12.0)
        worst = max(worst, float(np.max(np.abs(np.array(rep.row()) - ref))))
        count_ok &= rep.valid_count == n
    ok = worst <= 1e-6 and count_ok
    assert criterion(5, ok, f"max deviation {worst:.1e}, strict mask counts agree {count_ok}")


# -- shared trained models for 6 and 8 --------------------------------------
AVS_STEPS = 600
SS_STEPS = 1000


@pytest.fixture(scope="module")
def pair_models():
    start = time.perf_counter()
    train = pipeline.ambiguous_pairs(range(16))
    val = pipeline.ambiguous_pairs(range(100, 104))
    test = pipeline.ambiguous_pairs(range(200, 208))
    tc = avsnet.TrainConfig(steps=AVS_STEPS, seed=0)
    echoes, rgb_only = pipeline.train_pair_models(train, val, None, tc)
    return {"echoes": echoes, "rgb": rgb_only, "test": test, "seconds": time.perf_counter() - start}


def test_criterion_6_scale_ambiguity(criterion, pair_models):
    start = time.perf_counter()
    echoes = pipeline.pair_abs_rel(pair_models["echoes"].model, pair_models["test"])
    rgb = pipeline.pair_abs_rel(pair_models["rgb"].model, pair_models["test"])
    elapsed = pair_models["seconds"] + time.perf_counter() - start
    ok = rgb >= 0.20 and echoes <= 0.10 and elapsed <= 600
    detail = f"held-out pair Abs Rel: RGB-only {rgb:.3f}, RGB-Echoes {echoes:.3f} after {AVS_STEPS} steps, {elapsed:.0f}s"
    assert criterion(6, ok, detail)


# -- 7. time-of-flight saliency ---------------------------------------------
def test_criterion_7_saliency(criterion):
    rng = np.random.default_rng(7)
    train = [pipeline.single_wall(d) for d in rng.uniform(0.7, 6.5, 48)]
    model = avsnet.train_avsnet(
        pipeline.triplets(train), None, avsnet.TrainConfig(steps=300, optimizer="adam", eval_every=0, seed=0)
    ).model
    distances = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    peaks = pipeline.saliency_peaks(model, [pipeline.single_wall(d) for d in distances])
    delays = [delay_frame(d) for d in distances]
    rho = spearmanr(peaks, delays).statistic
    ok = bool(rho >= 0.9)
    assert criterion(7, ok, f"Spearman {rho:.3f}; saliency peaks {peaks} vs delay frames {delays}")


# -- 8. scaling direction ---------------------------------------------------
def test_criterion_8_scaling(criterion, pair_models):
    start = time.perf_counter()
    frames = pipeline.corridor_sequences(range(300, 340), 80)
    cfg = selfsup.SelfSupConfig(steps=SS_STEPS, seed=0)
    rel_model = pipeline.train_relative(frames, frames[0].intrinsics, cfg)
    test = pipeline.corridor_sequences(range(400, 404), 50)[::5]
    relative = rel_model.predict(np.stack([s.rgb for s in test]))
    gts = [s.depth_gt for s in test]
    data = pipeline.triplets(test)
    outcome = {}
    for name in ("echoes", "rgb"):
        pseudo = avsnet.predict_dataset(pair_models[name].model, data)
        outcome[name] = pipeline.scale_and_score(relative, pseudo, gts, "median")
    elapsed = pair_models["seconds"] + time.perf_counter() - start
    unscaled = outcome["echoes"].unscaled.delta1
    scaled = outcome["echoes"].scaled.delta1
    e_abs, r_abs = outcome["echoes"].scaled.abs_rel, outcome["rgb"].scaled.abs_rel
    gain = (r_abs - e_abs) / r_abs
    ok = unscaled <= 0.1 and scaled >= 0.8 and gain >= 0.05 and elapsed <= 1200
    detail = (
        f"d1 unscaled {unscaled:.3f}, median-scaled {scaled:.3f}; Abs Rel with RGB-Echoes factors {e_abs:.3f} "
        f"vs RGB-only factors {r_abs:.3f} ({100 * gain:.0f}% better), {elapsed:.0f}s"
    )
    assert criterion(8, ok, detail)


# -- 9. CLI determinism -----------------------------------------------------
TINY_INI = """
[data]
height = 32
width = 64
interval = 1
[avsnet]
widths = 4,4,8,8,8
n_bins = 8
n_heads = 2
steps = 3
batch = 2
[selfsup]
widths = 4,4,8,8,8
steps = 3
batch = 2
"""


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _cli_session(root, ini):
    d = str(root)
    common = ["--config", ini, "--seed", "11"]
    commands = [
        ["synth-data", "--scenes", "5", "--frames", "3", *common, "--out", d + "/data"],
        ["stft", "--data", d + "/data", *common, "--out", d + "/specs"],
        ["train-avsnet", "--data", d + "/data", *common, "--out", d + "/avs"],
        ["train-avsnet", "--data", d + "/data", "--no-audio", *common, "--out", d + "/rgb"],
        ["train-relative", "--data", d + "/data", "--scales", "3", *common, "--out", d + "/rel"],
        ["infer", "--data", d + "/data", "--model", d + "/avs", *common, "--out", d + "/pred_avs"],
        ["infer", "--data", d + "/data", "--model", d + "/rel", *common, "--out", d + "/pred_rel"],
        ["scale", "--pred", d + "/pred_rel", "--pseudo", d + "/pred_avs", *common, "--out", d + "/scaled"],
        ["eval", "--pred", d + "/scaled", "--gt", d + "/data", *common, "--out", d + "/evals/scaled.tsv"],
        ["eval", "--pred", d + "/pred_avs", "--gt", d + "/data", *common, "--out", d + "/evals/avs.tsv"],
        ["saliency", "--data", d + "/data", "--model", d + "/avs", *common, "--out", d + "/sal"],
        ["report", "--data", d + "/evals", *common, "--out", d + "/report"],
    ]
    codes = [run(c).exit_code for c in commands]
    return codes, _tree_bytes(root)


def test_criterion_9_cli_determinism(criterion, tmp_path):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY_INI)
    codes_a, tree_a = _cli_session(tmp_path / "a", str(ini))
    codes_b, tree_b = _cli_session(tmp_path / "b", str(ini))
    differing = sorted(k for k in tree_a if tree_a.get(k) != tree_b.get(k)) + sorted(set(tree_b) - set(tree_a))
    ok = codes_a == codes_b == [0] * len(codes_a) and not differing
    assert criterion(9, ok, f"{len(codes_a)} commands, {len(tree_a)} files, exit codes {set(codes_a)}, differing {differing[:3]}")
