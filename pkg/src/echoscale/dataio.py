"""Synthetic corridor scenes, frame triples, BatVision-style directory I/O and
INI configuration."""

from __future__ import annotations

import configparser
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pose
from .signal import EchoClip, Reflector, compute_stft, gen_chirp, read_wav, render_echo, write_wav

log = logging.getLogger(__name__)

NEAR_PLANE = 0.1


@dataclass
class SceneSample:
    rgb: np.ndarray  # (3, H, W) in [0, 1]
    depth_gt: np.ndarray  # (H, W) meters, 0 = invalid
    echo: EchoClip
    intrinsics: CameraIntrinsics
    pose_world: Pose
    scene_id: int
    frame_index: int

    def spectrogram(self, n_fft=512, hop=128):
        return compute_stft(self.echo, n_fft, hop).mag


@dataclass(frozen=True)
class CorridorSpec:
    """Corridor along +z: side walls at x = +-half_width, end wall at z = end_distance.

    ``half_width=inf`` leaves only the end wall. ``scale`` multiplies every
    length while texture coordinates are divided by it, so the image does
    not change.
    """

    end_distance: float = 6.0
    half_width: float = 1.2
    step: float = 0.01
    scale: float = 1.0
    height: int = 64
    width: int = 128
    hfov_deg: float = 90.0
    texture_seed: int = 0
    end_strength: float = 1.0
    side_strength: float = 0.5
    k_reflectors: int = 3
    noise_std: float = 1e-4
    clip_duration: float = 0.08
    chirp_duration: float = 0.01
    f_start: float = 20.0
    f_end: float = 20000.0
    sample_rate: int = 44100


# -- procedural texture ---------------------------------------------------
def _lattice(seed, n=64):
    return np.random.default_rng(seed).random((n, n))


def value_noise(u, v, table, freq):
    """Smoothly interpolated lattice noise, periodic in the table size."""
    n = table.shape[0]
    x, y = u * freq, v * freq
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    i0, j0 = x0.astype(np.int64) % n, y0.astype(np.int64) % n
    i1, j1 = (i0 + 1) % n, (j0 + 1) % n
    top = table[j0, i0] * (1 - sx) + table[j0, i1] * sx
    bot = table[j1, i0] * (1 - sx) + table[j1, i1] * sx
    return top * (1 - sy) + bot * sy


def wall_texture(u, v, seed, tint):
    """RGB texture of value-noise bands at wall coordinates (u, v) in meters."""
    t1, t2 = _lattice(seed), _lattice(seed + 1)
    base = 0.6 * value_noise(u, v, t1, 1.5) + 0.4 * value_noise(u, v, t2, 4.0)
    bands = 0.5 + 0.5 * np.sin(2 * np.pi * (u * 0.9 + 0.3 * value_noise(u, v, t2, 0.7)))
    lum = 0.15 + 0.55 * base + 0.3 * bands * base
    return np.clip(lum[None] * np.asarray(tint)[:, None, None], 0.0, 1.0)


_TINTS = {"end": (1.0, 0.85, 0.7), "left": (0.7, 0.95, 0.8), "right": (0.75, 0.8, 1.0)}


def render_corridor(spec, cam_z):
    """Ray-cast z-depth and RGB for a camera at (0, 0, cam_z) looking along +z."""
    K = CameraIntrinsics.for_image(spec.height, spec.width, spec.hfov_deg)
    u, v = np.meshgrid(np.arange(spec.width, dtype=np.float64), np.arange(spec.height, dtype=np.float64))
    dx, dy = (u - K.cx) / K.fx, (v - K.cy) / K.fy
    s = spec.scale
    end_z = spec.end_distance * s - cam_z
    with np.errstate(divide="ignore"):
        side_z = np.where(np.abs(dx) > 0, spec.half_width * s / np.abs(dx), np.inf)
    depth = np.minimum(side_z, end_z)
    on_end = end_z <= side_z
    rgb = np.empty((3, spec.height, spec.width))
    # texture coordinates in unscaled meters
    ex, ey = dx * end_z / s, dy * end_z / s
    rgb[:, on_end] = wall_texture(ex, ey, spec.texture_seed, _TINTS["end"])[:, on_end]
    for name, sign, off in (("left", -1, 10), ("right", 1, 20)):
        sel = ~on_end & (np.sign(dx) == sign)
        if sel.any():
            wz = (cam_z + np.where(sel, side_z, 0.0)) / s
            wy = dy * np.where(sel, side_z, 0.0) / s
            rgb[:, sel] = wall_texture(wz, wy, spec.texture_seed + off, _TINTS[name])[:, sel]
    rgb = np.round(rgb * 255) / 255
    return rgb.astype(np.float32), depth, K


def corridor_reflectors(spec, cam_z):
    s = spec.scale
    refl = [Reflector(spec.end_distance * s - cam_z, 0.0, spec.end_strength)]
    if math.isfinite(spec.half_width):
        refl += [
            Reflector(spec.half_width * s, -math.pi / 2, spec.side_strength),
            Reflector(spec.half_width * s, math.pi / 2, spec.side_strength),
        ]
    refl.sort(key=lambda r: -r.strength / r.distance**2)
    return refl[: spec.k_reflectors]


def synth_scene(spec, n_frames, seed=0, scene_id=0):
    """Frames of a camera advancing ``spec.step * spec.scale`` meters per frame."""
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    if spec.end_distance <= 0 or spec.half_width <= 0 or spec.scale <= 0:
        raise ValueError("corridor dimensions and scale must be positive")
    last = spec.end_distance * spec.scale - (n_frames - 1) * spec.step * spec.scale
    if last <= NEAR_PLANE:
        raise ValueError(f"end wall reaches the near plane ({last:.3f} m) before the last frame")
    chirp = gen_chirp(spec.f_start, spec.f_end, spec.chirp_duration, spec.sample_rate)
    out = []
    for f in range(n_frames):
        cam_z = f * spec.step * spec.scale
        rgb, depth, K = render_corridor(spec, cam_z)
        echo = render_echo(
            chirp,
            corridor_reflectors(spec, cam_z),
            spec.noise_std,
            seed=seed * 100003 + scene_id * 1009 + f,
            clip_duration=spec.clip_duration,
            sample_rate=spec.sample_rate,
        )
        pose = Pose(np.zeros(3), np.array([0.0, 0.0, cam_z]))
        out.append(SceneSample(rgb, depth, echo, K, pose, scene_id, f))
    return out


def synth_ambiguous_pair(spec, scale=2.0, seed=0):
    """Two single-frame scenes with identical RGB whose geometry differs by ``scale``."""
    if scale <= 1:
        raise ValueError("scale must exceed 1")
    (a,) = synth_scene(spec, 1, seed, scene_id=0)
    big = replace(spec, scale=spec.scale * scale)
    chirp = gen_chirp(spec.f_start, spec.f_end, spec.chirp_duration, spec.sample_rate)
    echo = render_echo(
        chirp, corridor_reflectors(big, 0.0), spec.noise_std, seed=seed * 100003 + 1009,
        clip_duration=spec.clip_duration, sample_rate=spec.sample_rate,
    )
    b = SceneSample(a.rgb.copy(), a.depth_gt * scale, echo, a.intrinsics, a.pose_world, 1, 0)
    return a, b


def best_constant_abs_rel(depth_a, depth_b, grid=2001):
    """Smallest pair-averaged Abs Rel of one prediction map shared by both scenes.

    Pixels are independent, so the optimum is found per pixel by a 1-D
    search over candidate values spanning both depths.
    """
    a = np.asarray(depth_a, dtype=np.float64).ravel()
    b = np.asarray(depth_b, dtype=np.float64).ravel()
    t = np.linspace(0.0, 1.0, grid)[:, None]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    cand = lo * (1 - t) + hi * t
    cost = 0.5 * (np.abs(cand - a) / a + np.abs(cand - b) / b)
    return float(cost.min(axis=0).mean())


def synth_corridor_set(n_scenes, n_frames, seed=0, scales=(1.0, 2.0), base=None):
    """Corridor scenes with seeded geometry and textures plus a split map.

    Scene ``i`` uses ``scales[i % len(scales)]``; scenes with ``i % 5 == 3``
    go to val and ``i % 5 == 4`` to test, the rest to train.
    """
    base = base or CorridorSpec()
    rng = np.random.default_rng(seed)
    samples, splits, specs = [], {}, []
    for i in range(n_scenes):
        scale = float(scales[i % len(scales)])
        travel = (n_frames - 1) * base.step
        end = float(rng.uniform(max(3.0, travel + 1.0), max(5.5, travel + 1.5)))
        spec = replace(
            base,
            end_distance=end,
            half_width=float(rng.uniform(0.8, 1.6)),
            scale=scale,
            texture_seed=int(seed * 1000 + i),
        )
        specs.append(spec)
        samples += synth_scene(spec, n_frames, seed=seed, scene_id=i)
        splits[i] = {3: "val", 4: "test"}.get(i % 5, "train")
    return samples, splits, specs


# -- frame triples --------------------------------------------------------
def make_triples(frames, interval=20):
    """Index triples (t - interval, t, t + interval) that stay inside one scene.

    ``frames`` holds SceneSamples or ``(scene_id, frame_index)`` pairs.
    """
    if interval < 1:
        raise ValueError("interval must be at least 1")
    keys = [(f.scene_id, f.frame_index) if isinstance(f, SceneSample) else tuple(f) for f in frames]
    where = {k: i for i, k in enumerate(keys)}
    out = []
    for i, (scene, t) in enumerate(keys):
        prev = where.get((scene, t - interval))
        nxt = where.get((scene, t + interval))
        if prev is not None and nxt is not None:
            out.append((prev, i, nxt))
    return out


# -- BatVision-style layout -----------------------------------------------
def sample_id(scene_id, frame_index):
    return f"scene_{scene_id:04d}/frame_{frame_index:05d}"


def write_depth_png(path, depth_m):
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path, format="PNG")


def read_depth_png(path):
    arr = np.array(Image.open(path))
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise ValueError(f"{path}: unexpected depth dtype {arr.dtype}")
    return arr.astype(np.float64) / 1000.0


def write_rgb_png(path, rgb):
    img = np.clip(np.round(np.asarray(rgb).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def read_rgb_png(path):
    return (np.array(Image.open(path).convert("RGB")).astype(np.float32) / 255.0).transpose(2, 0, 1)


def write_intrinsics(path, K, h, w):
    cfg = configparser.ConfigParser()
    cfg["camera"] = {k: repr(float(getattr(K, k))) for k in ("fx", "fy", "cx", "cy")}
    cfg["camera"].update(height=str(int(h)), width=str(int(w)))
    with open(path, "w") as f:
        cfg.write(f)


def read_intrinsics(path):
    cfg = configparser.ConfigParser()
    cfg.read(path)
    c = cfg["camera"]
    K = CameraIntrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]))
    return K, int(c["height"]), int(c["width"])


def export_dataset(samples, root, splits=None):
    """Write samples under ``root`` in the scene/frame layout; returns written paths."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for smp in samples:
        sid = sample_id(smp.scene_id, smp.frame_index)
        base = root / sid
        base.parent.mkdir(parents=True, exist_ok=True)
        write_rgb_png(f"{base}.png", smp.rgb)
        write_depth_png(f"{base}.depth.png", smp.depth_gt)
        write_wav(f"{base}.wav", smp.echo)
        written += [Path(f"{base}.png"), Path(f"{base}.depth.png"), Path(f"{base}.wav")]
    if samples:
        h, w = samples[0].depth_gt.shape
        write_intrinsics(root / "intrinsics.ini", samples[0].intrinsics, h, w)
        written.append(root / "intrinsics.ini")
    splits = splits or {}
    lines = [f"{splits.get(s.scene_id, 'train')}\t{sample_id(s.scene_id, s.frame_index)}" for s in samples]
    (root / "split.manifest").write_text("\n".join(lines) + ("\n" if lines else ""))
    written.append(root / "split.manifest")
    return written


@dataclass
class SplitManifest:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @classmethod
    def read(cls, path):
        m = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            split, sid = line.split()
            getattr(m, split).append(sid)
        overlap = (set(m.train) & set(m.val)) | (set(m.train) & set(m.test)) | (set(m.val) & set(m.test))
        if overlap:
            raise ValueError(f"splits overlap on {sorted(overlap)[:3]}")
        return m

    def all(self):
        return [("train", s) for s in self.train] + [("val", s) for s in self.val] + [("test", s) for s in self.test]


class BatVisionDataset:
    """Lazy reader for ``scene_XXXX/frame_YYYYY.{png,depth.png,wav}`` trees."""

    def __init__(self, root, manifest=None):
        self.root = Path(root)
        self.warnings = []
        self.K = None
        self.shape = None
        ini = self.root / "intrinsics.ini"
        if ini.exists():
            self.K, h, w = read_intrinsics(ini)
            self.shape = (h, w)
        if manifest is None and (self.root / "split.manifest").exists():
            manifest = SplitManifest.read(self.root / "split.manifest")
        on_disk = sorted(
            str(p.relative_to(self.root))[: -len(".depth.png")]
            for p in self.root.glob("scene_*/frame_*.depth.png")
        )
        if manifest is None:
            entries = [("train", s) for s in on_disk]
        else:
            entries = manifest.all()
            if len(entries) != len(on_disk):
                self._warn(f"manifest lists {len(entries)} samples but {len(on_disk)} are on disk")
        self.entries = []
        for split, sid in entries:
            missing = [ext for ext in (".png", ".depth.png", ".wav") if not (self.root / f"{sid}{ext}").exists()]
            if missing:
                self._warn(f"{sid}: missing {', '.join(missing)}; skipped")
                continue
            self.entries.append((split, sid))

    def _warn(self, msg):
        log.warning(msg)
        self.warnings.append(msg)

    def __len__(self):
        return len(self.entries)

    def ids(self, split=None):
        return [sid for sp, sid in self.entries if split is None or sp == split]

    def load(self, sid):
        base = self.root / sid
        rgb = read_rgb_png(f"{base}.png")
        depth = read_depth_png(f"{base}.depth.png")
        echo = read_wav(f"{base}.wav")
        if rgb.shape[1:] != depth.shape:
            raise ValueError(f"{sid}: rgb {rgb.shape[1:]} and depth {depth.shape} disagree")
        if self.shape is not None and depth.shape != self.shape:
            raise ValueError(f"{sid}: expected {self.shape}, got {depth.shape}")
        scene = int(sid.split("/")[0].split("_")[1])
        frame = int(sid.split("/")[1].split("_")[1])
        K = self.K or CameraIntrinsics.for_image(*depth.shape)
        return SceneSample(rgb, depth, echo, K, Pose(np.zeros(3), np.zeros(3)), scene, frame)

    def samples(self, split=None):
        """Yield loadable samples, skipping corrupt files with a warning."""
        for sid in self.ids(split):
            try:
                yield self.load(sid)
            except Exception as exc:  # noqa: BLE001 - any decode failure skips the sample
                self._warn(f"{sid}: unreadable ({exc}); skipped")


def load_batvision_layout(root, manifest=None):
    return BatVisionDataset(root, manifest)


# -- configuration --------------------------------------------------------
DEFAULTS = {
    "data.height": 64,
    "data.width": 128,
    "data.d_min": 0.1,
    "data.d_max": 12.0,
    "data.interval": 20,
    "data.step": 0.01,
    "data.scene_scales": "1,2",
    "stft.n_fft": 512,
    "stft.hop": 128,
    "avsnet.widths": "16,32,64,128,192",
    "avsnet.n_bins": 64,
    "avsnet.n_heads": 4,
    "avsnet.attractors": "16,8,4,1",
    "avsnet.attractor_alpha": 300.0,
    "avsnet.attractor_gamma": 2,
    "avsnet.steps": 2000,
    "avsnet.batch": 4,
    "avsnet.lr": 1e-3,
    "avsnet.optimizer": "sgd",
    "selfsup.widths": "16,32,64,128,192",
    "selfsup.steps": 1000,
    "selfsup.batch": 4,
    "selfsup.lr": 1e-3,
    "selfsup.optimizer": "adam",
    "selfsup.scales": 4,
    "selfsup.augment": True,
    "selfsup.restarts": 3,
    "train.seed": 0,
}


def load_config(path=None, overrides=None):
    """Flat ``section.key`` dict from an INI file layered over :data:`DEFAULTS`."""
    cfg = dict(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        for sec in parser.sections():
            for key, val in parser[sec].items():
                cfg[f"{sec}.{key}"] = _coerce(val, DEFAULTS.get(f"{sec}.{key}"))
    for key, val in (overrides or {}).items():
        cfg[key] = _coerce(val, DEFAULTS.get(key)) if isinstance(val, str) else val
    return cfg


def _coerce(text, like):
    if like is None or isinstance(like, str):
        return text
    if isinstance(like, bool):
        return text.lower() in ("1", "true", "yes")
    return type(like)(float(text)) if isinstance(like, int) else float(text)


def int_list(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def float_list(text):
    return [float(x) for x in str(text).split(",") if x.strip()]
