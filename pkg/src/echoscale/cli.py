"""Command-line entry point: ``echoscale <subcommand> [flags]``.

Exit codes are 0 on success, 1 on a usage error and 2 when the command
itself fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import avsnet, dataio, metrics, scaling, selfsup, signal
from .core import avst

log = logging.getLogger("echoscale")

SUBCOMMANDS = ("synth-data", "stft", "train-avsnet", "train-relative", "infer", "scale", "eval", "saliency", "report")


class UsageError(Exception):
    pass


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list = field(default_factory=list)
    message: str = ""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser():
    p = _Parser(prog="echoscale", description="Audio-visual metric depth and scale recovery.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)

    def cmd(name, help_text):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", help="INI file with section.key overrides")
        c.add_argument("--seed", type=int, help="random seed (overrides train.seed)")
        c.add_argument("--out", required=True, help="output file or directory")
        return c

    c = cmd("synth-data", "render a synthetic corridor dataset")
    c.add_argument("--scenes", type=int, default=5)
    c.add_argument("--frames", type=int, default=50)

    c = cmd("stft", "spectrograms of a WAV file or of every sample in a dataset")
    c.add_argument("--data", required=True)

    c = cmd("train-avsnet", "supervised metric depth with metric bins")
    c.add_argument("--data", required=True)
    c.add_argument("--no-audio", action="store_true", help="RGB-only ablation")

    c = cmd("train-relative", "self-supervised relative depth from frame triples")
    c.add_argument("--data", required=True)
    c.add_argument("--scales", type=int, choices=(3, 4))

    c = cmd("infer", "predict depth maps with a trained checkpoint")
    c.add_argument("--data", required=True)
    c.add_argument("--model", required=True)
    c.add_argument("--split", default=None, help="train, val or test (default: all)")

    c = cmd("scale", "transfer metric scale from pseudo-dense depth onto relative depth")
    c.add_argument("--pred", required=True, help="directory of relative depth predictions")
    c.add_argument("--pseudo", required=True, help="directory of pseudo-dense metric predictions")
    c.add_argument("--method", choices=("median", "meanstd"), default="median")
    c.add_argument("--max-depth", type=float, default=None, help="only pixels below this pseudo depth vote")

    c = cmd("eval", "depth metrics of predictions against ground truth")
    c.add_argument("--pred", required=True, help="prediction .avst file or directory")
    c.add_argument("--gt", required=True, help="ground-truth depth (.avst, .depth.png) or dataset directory")
    c.add_argument("--max-depth", type=float, default=12.0)

    c = cmd("saliency", "spectrogram input-gradient saliency of an RGB-Echoes checkpoint")
    c.add_argument("--data", required=True)
    c.add_argument("--model", required=True)
    c.add_argument("--split", default=None)

    c = cmd("report", "aggregate eval tables into one table and per-metric SVG bar plots")
    c.add_argument("--data", required=True, nargs="+", help="eval output files or directories of them")
    return p


# -- helpers --------------------------------------------------------------
def _config(args, extra=None):
    overrides = dict(extra or {})
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    return dataio.load_config(args.config, overrides)


def _from_strings(cls, values, **fixed):
    """Rebuild a dataclass from manifest strings using its defaults' types."""
    kwargs = {}
    defaults = cls()
    for f in dataclasses.fields(cls):
        if f.name in fixed:
            kwargs[f.name] = fixed[f.name]
            continue
        if f.name not in values:
            continue
        like, text = getattr(defaults, f.name), values[f.name]
        if isinstance(like, bool):
            kwargs[f.name] = text == "True"
        elif isinstance(like, tuple) or (like is None and "," in text):
            kwargs[f.name] = tuple(int(x) for x in text.split(",") if x)
        elif like is None:
            kwargs[f.name] = None if text == "None" else tuple(int(x) for x in text.split(","))
        elif isinstance(like, int):
            kwargs[f.name] = int(text)
        elif isinstance(like, float):
            kwargs[f.name] = float(text)
        else:
            kwargs[f.name] = text
    return cls(**kwargs)


def _avs_config(cfg):
    return avsnet.AVSConfig(
        height=int(cfg["data.height"]),
        width=int(cfg["data.width"]),
        widths=tuple(dataio.int_list(cfg["avsnet.widths"])),
        n_bins=int(cfg["avsnet.n_bins"]),
        n_heads=int(cfg["avsnet.n_heads"]),
        attractors=tuple(dataio.int_list(cfg["avsnet.attractors"])),
        attractor_alpha=float(cfg["avsnet.attractor_alpha"]),
        attractor_gamma=int(cfg["avsnet.attractor_gamma"]),
        d_min=float(cfg["data.d_min"]),
        d_max=float(cfg["data.d_max"]),
        seed=int(cfg["train.seed"]),
    )


def _open_dataset(path):
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    return dataio.load_batvision_layout(path)


def _avs_triplets(ds, split, cfg):
    n_fft, hop = int(cfg["stft.n_fft"]), int(cfg["stft.hop"])
    return [(s.rgb, s.spectrogram(n_fft, hop), s.depth_gt) for s in ds.samples(split)]


def _write_trace(path, trace):
    Path(path).write_text("".join(f"{i}\t{v!r}\n" for i, v in enumerate(trace)))
    return Path(path)


def _load_model(path):
    state, hp = avst.load_checkpoint(path)
    kind = hp.get("kind")
    if kind == "avsnet":
        model = avsnet.AVSNet(_from_strings(avsnet.AVSConfig, hp))
    elif kind == "depthnet":
        cfg = _from_strings(selfsup.SelfSupConfig, hp)
        model, _ = selfsup.build_nets(cfg)
        model.ss_config = cfg
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")
    model.load_state_dict(state)
    return model, kind, hp


def _pred_files(path):
    path = Path(path)
    if path.is_file():
        return {path.stem: path}
    files = sorted(path.rglob("*.avst"))
    if not files:
        raise FileNotFoundError(f"no .avst predictions under {path}")
    return {str(f.relative_to(path))[: -len(".avst")]: f for f in files}


# -- subcommands ----------------------------------------------------------
def cmd_synth_data(args):
    cfg = _config(args)
    if args.scenes < 1 or args.frames < 1:
        raise UsageError("--scenes and --frames must be positive")
    base = dataio.CorridorSpec(
        height=int(cfg["data.height"]), width=int(cfg["data.width"]), step=float(cfg["data.step"])
    )
    samples, splits, _ = dataio.synth_corridor_set(
        args.scenes, args.frames, int(cfg["train.seed"]), dataio.float_list(cfg["data.scene_scales"]), base
    )
    return dataio.export_dataset(samples, args.out, splits)


def cmd_stft(args):
    cfg = _config(args)
    n_fft, hop = int(cfg["stft.n_fft"]), int(cfg["stft.hop"])
    src = Path(args.data)
    if src.is_file():
        spec = signal.compute_stft(signal.read_wav(src), n_fft, hop)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        avst.save(out, spec.mag)
        return [out]
    ds = _open_dataset(src)
    written = []
    for sid in ds.ids():
        spec = signal.compute_stft(signal.read_wav(src / f"{sid}.wav"), n_fft, hop)
        out = Path(args.out) / f"{sid}.avst"
        out.parent.mkdir(parents=True, exist_ok=True)
        avst.save(out, spec.mag)
        written.append(out)
    return written


def cmd_train_avsnet(args):
    cfg = _config(args)
    ds = _open_dataset(args.data)
    train = _avs_triplets(ds, "train", cfg)
    if not train:
        raise ValueError(f"{args.data}: no training samples")
    val = _avs_triplets(ds, "val", cfg) or None
    mcfg = _avs_config(cfg)
    tc = avsnet.TrainConfig(
        steps=int(cfg["avsnet.steps"]),
        batch=int(cfg["avsnet.batch"]),
        lr=float(cfg["avsnet.lr"]),
        optimizer=str(cfg["avsnet.optimizer"]),
        max_depth=float(cfg["data.d_max"]),
        seed=int(cfg["train.seed"]),
    )
    res = avsnet.train_avsnet(train, mcfg, tc, use_audio=not args.no_audio, val=val)
    hp = dict(avsnet.config_dict(res.model.cfg), kind="avsnet", best_step=res.best_step)
    written = avst.save_checkpoint(args.out, res.model.state_dict(), hp)
    written.append(_write_trace(Path(args.out) / "trace.tsv", res.trace))
    return written


def cmd_train_relative(args):
    cfg = _config(args)
    ds = _open_dataset(args.data)
    frames = list(ds.samples("train"))
    triples = dataio.make_triples(frames, int(cfg["data.interval"]))
    if not triples:
        raise ValueError(f"{args.data}: no frame triples at interval {cfg['data.interval']}")
    data = [(frames[a].rgb, frames[b].rgb, frames[c].rgb) for a, b, c in triples]
    sc = selfsup.SelfSupConfig(
        steps=int(cfg["selfsup.steps"]),
        batch=int(cfg["selfsup.batch"]),
        lr=float(cfg["selfsup.lr"]),
        optimizer=str(cfg["selfsup.optimizer"]),
        n_scales=int(args.scales or cfg["selfsup.scales"]),
        widths=tuple(dataio.int_list(cfg["selfsup.widths"])),
        d_min=float(cfg["data.d_min"]),
        d_max=float(cfg["data.d_max"]),
        augment=bool(cfg["selfsup.augment"]),
        restarts=int(cfg["selfsup.restarts"]),
        seed=int(cfg["train.seed"]),
    )
    res = selfsup.train_selfsup(data, frames[0].intrinsics, sc)
    hp = dict(selfsup.config_dict(sc), kind="depthnet")
    written = avst.save_checkpoint(args.out, res.depth_net.state_dict(), hp)
    written.append(_write_trace(Path(args.out) / "trace.tsv", res.trace))
    return written


def cmd_infer(args):
    cfg = _config(args)
    model, kind, _ = _load_model(args.model)
    ds = _open_dataset(args.data)
    written = []
    for s in ds.samples(args.split):
        if kind == "avsnet":
            spec = s.spectrogram(int(cfg["stft.n_fft"]), int(cfg["stft.hop"])) if model.cfg.use_audio else None
            depth = avsnet.predict_dataset(model, [(s.rgb, spec, s.depth_gt)])[0]
        else:
            c = model.ss_config
            depth = selfsup.predict_relative(model, s.rgb, c.d_min, c.d_max)
        out = Path(args.out) / f"{dataio.sample_id(s.scene_id, s.frame_index)}.avst"
        out.parent.mkdir(parents=True, exist_ok=True)
        avst.save(out, np.asarray(depth, dtype=np.float32))
        written.append(out)
    return written


def cmd_scale(args):
    rel = _pred_files(args.pred)
    pseudo = _pred_files(args.pseudo)
    missing = sorted(set(rel) - set(pseudo))
    if missing:
        raise ValueError(f"no pseudo-dense prediction for {missing[:3]}")
    out_dir = Path(args.out)
    written, rows = [], []
    for key in sorted(rel):
        r = avst.load(rel[key]).astype(np.float64)
        m = avst.load(pseudo[key]).astype(np.float64)
        if m.shape != r.shape:
            m = metrics.resize_to(m, r.shape)
        mask = None if args.max_depth is None else m < args.max_depth
        scaled, factor = scaling.apply_scale(r, m, args.method, mask)
        out = out_dir / f"{key}.avst"
        out.parent.mkdir(parents=True, exist_ok=True)
        avst.save(out, scaled.astype(np.float32))
        written.append(out)
        rows.append(f"{key}\t" + factor.to_text().strip().replace("\n", "\t"))
    table = out_dir / "factors.tsv"
    table.write_text("\n".join(rows) + "\n")
    return written + [table]


def _gt_lookup(path):
    path = Path(path)
    if path.is_file():
        gt = avst.load(path) if path.suffix == ".avst" else dataio.read_depth_png(path)
        return lambda key: gt
    if (path / "split.manifest").exists() or any(path.glob("scene_*")):
        return lambda key: dataio.read_depth_png(path / f"{key}.depth.png")
    return lambda key: avst.load(path / f"{key}.avst")


def cmd_eval(args):
    preds = _pred_files(args.pred)
    gt_of = _gt_lookup(args.gt)
    labels, reports = [], []
    for key in sorted(preds):
        reports.append(metrics.compute_metrics(avst.load(preds[key]), gt_of(key), args.max_depth))
        labels.append(key)
    reports.append(metrics.mean_report(reports))
    labels.append("mean")
    table = metrics.format_table(reports, labels)
    sys.stdout.write(table)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table)
    return [out]


def cmd_saliency(args):
    cfg = _config(args)
    model, kind, _ = _load_model(args.model)
    if kind != "avsnet" or not model.cfg.use_audio:
        raise ValueError("saliency needs an RGB-Echoes avsnet checkpoint")
    ds = _open_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines, profiles = [], []
    for s in ds.samples(args.split):
        profile, _ = avsnet.saliency(model, s.rgb, s.spectrogram(int(cfg["stft.n_fft"]), int(cfg["stft.hop"])))
        sid = dataio.sample_id(s.scene_id, s.frame_index)
        lines.append(f"{sid}\t{int(np.argmax(profile))}\t" + ",".join(f"{v:.6g}" for v in profile))
        profiles.append((sid, profile))
    table = out_dir / "saliency.tsv"
    table.write_text("sample\targmax_frame\tprofile\n" + "\n".join(lines) + "\n")
    plot = out_dir / "saliency.svg"
    plot.write_text(line_plot_svg(profiles, "spectrogram saliency over time", "STFT frame"))
    return [table, plot]


def _read_mean_row(path):
    for line in Path(path).read_text().splitlines():
        parts = line.split("\t")
        if parts[0] == "mean":
            return [float(v) for v in parts[1:]]
    raise ValueError(f"{path}: no 'mean' row; expected an eval output table")


def cmd_report(args):
    files = []
    for item in args.data:
        p = Path(item)
        files += sorted(p.glob("*.tsv")) if p.is_dir() else [p]
    if not files:
        raise ValueError("no eval tables found")
    labels = [f.stem for f in files]
    rows = [metrics.MetricsReport(*_read_mean_row(f), valid_count=0) for f in files]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "table.tsv"
    table.write_text(metrics.format_table(rows, labels, label_header="method"))
    written = [table]
    for col, title in zip(metrics.COLUMNS, metrics.HEADER):
        svg = out_dir / f"{col}.svg"
        svg.write_text(bar_chart_svg(labels, [getattr(r, col) for r in rows], title))
        written.append(svg)
    sys.stdout.write(table.read_text())
    return written


# -- SVG ------------------------------------------------------------------
def _esc(text):
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def bar_chart_svg(labels, values, title, width=480, height=300):
    """Static bar chart; identical inputs give identical bytes."""
    pad, top = 50, 40
    vmax = max([abs(v) for v in values] + [1e-12])
    bw = (width - 2 * pad) / max(len(values), 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for i, (lab, v) in enumerate(zip(labels, values)):
        h = (height - pad - top) * abs(v) / vmax
        x = pad + i * bw + bw * 0.1
        parts.append(
            f'<rect x="{x:.1f}" y="{height - pad - h:.1f}" width="{bw * 0.8:.1f}" height="{h:.1f}" fill="#4a78a8"/>'
        )
        parts.append(f'<text x="{x + bw * 0.4:.1f}" y="{height - pad - h - 4:.1f}" text-anchor="middle" font-size="11">{v:.4f}</text>')
        parts.append(f'<text x="{x + bw * 0.4:.1f}" y="{height - pad + 16:.1f}" text-anchor="middle" font-size="11">{_esc(lab)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_plot_svg(series, title, xlabel, width=480, height=300):
    pad, top = 50, 40
    ymax = max([float(np.max(s)) for _, s in series] + [1e-12])
    n = max([len(s) for _, s in series] + [2])
    colors = ("#4a78a8", "#d9822b", "#3f9e4d", "#b0413e", "#7d5ba6", "#8c6d31")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="11">{_esc(xlabel)}</text>',
    ]
    for k, (_, s) in enumerate(series):
        pts = " ".join(
            f"{pad + i * (width - 2 * pad) / (n - 1):.1f},{height - pad - (height - pad - top) * v / ymax:.1f}"
            for i, v in enumerate(s)
        )
        parts.append(f'<polyline fill="none" stroke="{colors[k % len(colors)]}" points="{pts}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


HANDLERS = {
    "synth-data": cmd_synth_data,
    "stft": cmd_stft,
    "train-avsnet": cmd_train_avsnet,
    "train-relative": cmd_train_relative,
    "infer": cmd_infer,
    "scale": cmd_scale,
    "eval": cmd_eval,
    "saliency": cmd_saliency,
    "report": cmd_report,
}


def run(argv):
    """Parse and execute one command line; never raises."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        artifacts = HANDLERS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return CommandResult(1, message=str(exc))
    except SystemExit as exc:  # --help
        return CommandResult(0 if not exc.code else 1)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit 2
        msg = f"echoscale {argv[0] if argv else ''}: {type(exc).__name__}: {exc}"
        sys.stderr.write(msg + "\n")
        return CommandResult(2, message=msg)
    return CommandResult(0, [str(a) for a in artifacts])


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return run(sys.argv[1:] if argv is None else argv).exit_code


if __name__ == "__main__":
    raise SystemExit(main())
