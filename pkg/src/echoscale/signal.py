"""Chirp excitation, binaural echo rendering and STFT magnitudes."""

from __future__ import annotations

import logging
import math
import wave
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 340.0
EAR_SEPARATION = 0.2
SAMPLE_RATE = 44100


@dataclass
class EchoClip:
    samples: np.ndarray  # (2, L) left, right
    sample_rate: int = SAMPLE_RATE
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self):
        return self.samples.shape[-1] / self.sample_rate


@dataclass
class Spectrogram:
    mag: np.ndarray  # (2, F, T)
    freq_resolution: float
    time_hop: float


@dataclass(frozen=True)
class Reflector:
    distance: float
    azimuth: float = 0.0
    strength: float = 1.0

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError(f"reflector distance must be positive, got {self.distance}")


def gen_chirp(f_start=20.0, f_end=20000.0, duration=0.01, sample_rate=SAMPLE_RATE):
    """Linear sweep from ``f_start`` to ``f_end`` with zero phase at t=0."""
    if not 0 < f_start < f_end <= sample_rate / 2:
        raise ValueError(
            f"need 0 < f_start < f_end <= Nyquist ({sample_rate / 2}); got {f_start}, {f_end}"
        )
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    rate = (f_end - f_start) / duration
    return EchoClip(np.sin(2 * np.pi * (f_start * t + 0.5 * rate * t * t))[None, :], sample_rate)


def instantaneous_frequency(t, f_start, f_end, duration):
    return f_start + (f_end - f_start) * t / duration


def render_echo(
    chirp,
    reflectors,
    noise_std=0.0,
    seed=0,
    clip_duration=0.08,
    sample_rate=SAMPLE_RATE,
):
    """Sum of delayed, attenuated chirp copies at the two ears plus noise.

    Each reflector arrives after the round trip 2d/c, scaled by strength/d^2.
    Positive azimuth is to the right: the right ear hears it earlier by half
    the interaural difference, the left ear later by the same amount.
    """
    src = chirp.samples[0] if isinstance(chirp, EchoClip) else np.asarray(chirp, dtype=np.float64)
    length = int(round(clip_duration * sample_rate))
    out = np.zeros((2, length))
    warnings = []
    for ref in reflectors:
        rt = 2.0 * ref.distance / SPEED_OF_SOUND
        itd = EAR_SEPARATION * math.sin(ref.azimuth) / SPEED_OF_SOUND
        gain = ref.strength / ref.distance**2
        for ch, delay in ((0, rt + itd / 2), (1, rt - itd / 2)):
            start = int(round(delay * sample_rate))
            if start >= length:
                warnings.append(f"echo at {ref.distance:.3f} m starts after the clip end")
                continue
            stop = min(length, start + src.size)
            if stop - start < src.size:
                warnings.append(f"echo at {ref.distance:.3f} m truncated by the clip end")
            out[ch, start:stop] += gain * src[: stop - start]
    for w in dict.fromkeys(warnings):
        log.warning(w)
    if noise_std > 0:
        out += np.random.default_rng(seed).normal(0.0, noise_std, size=out.shape)
    return EchoClip(out, sample_rate, list(dict.fromkeys(warnings)))


def hann(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def compute_stft(clip, n_fft=512, hop=128):
    """Per-channel magnitude STFT, shape (channels, n_fft//2 + 1, frames)."""
    if n_fft <= 0 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise ValueError(f"hop must be in (0, n_fft], got {hop}")
    x = clip.samples
    length = x.shape[-1]
    if length < n_fft:
        raise ValueError(f"clip has {length} samples, fewer than n_fft={n_fft}")
    n_frames = (length - n_fft) // hop + 1
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[:, idx] * hann(n_fft)
    mag = np.abs(np.fft.rfft(frames, axis=-1)).transpose(0, 2, 1)
    return Spectrogram(mag, clip.sample_rate / n_fft, hop / clip.sample_rate)


def delay_frame(distance, sample_rate=SAMPLE_RATE, hop=128):
    """STFT frame index where a round-trip echo from ``distance`` begins."""
    return int(math.floor(2 * distance / SPEED_OF_SOUND * sample_rate / hop))


def write_wav(path, clip):
    pcm = np.clip(np.round(clip.samples.T * 32767), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(clip.samples.shape[0])
        f.setsampwidth(2)
        f.setframerate(clip.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        n_ch, sr = f.getnchannels(), f.getframerate()
        raw = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2")
    return EchoClip(raw.reshape(-1, n_ch).T.astype(np.float64) / 32767, sr)
