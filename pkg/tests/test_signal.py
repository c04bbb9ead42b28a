import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echoscale.signal import (
    EAR_SEPARATION,
    SAMPLE_RATE,
    SPEED_OF_SOUND,
    EchoClip,
    Reflector,
    compute_stft,
    delay_frame,
    gen_chirp,
    instantaneous_frequency,
    read_wav,
    render_echo,
    write_wav,
)


def test_chirp_length_and_zero_phase():
    c = gen_chirp(20, 20000, 0.01, 44100)
    assert c.samples.shape == (1, 441)
    assert c.samples[0, 0] == 0.0
    assert np.abs(c.samples).max() <= 1.0


def test_chirp_instantaneous_frequency_endpoints():
    assert instantaneous_frequency(0.0, 20, 20000, 0.01) == 20
    assert instantaneous_frequency(0.01, 20, 20000, 0.01) == pytest.approx(20000)


def test_chirp_zero_crossings_match_integrated_frequency():
    # a sweep completes (f0 + f1)/2 * T cycles, i.e. twice that many sign changes
    sr = 200_000
    c = gen_chirp(100, 5000, 0.05, sr).samples[0]
    crossings = np.count_nonzero(np.diff(np.signbit(c[1:])))
    assert abs(crossings - 2 * (100 + 5000) / 2 * 0.05) <= 2


def test_chirp_rejects_nyquist_violation():
    with pytest.raises(ValueError, match="Nyquist"):
        gen_chirp(20, 30000, 0.01, 44100)
    with pytest.raises(ValueError):
        gen_chirp(20, 20000, 0.0)


def onset(x):
    return int(np.flatnonzero(np.abs(x) > 0)[0])


def test_single_reflector_onset():
    clip = render_echo(gen_chirp(), [Reflector(3.4)], 0.0)
    # first non-zero sample is one after the onset because the chirp starts at 0
    assert onset(clip.samples[0]) - 1 == round(0.020 * SAMPLE_RATE)
    assert onset(clip.samples[1]) - 1 == round(0.020 * SAMPLE_RATE)


def test_inverse_square_peak_ratio():
    chirp = gen_chirp()
    near = render_echo(chirp, [Reflector(2.0)], 0.0)
    far = render_echo(chirp, [Reflector(4.0)], 0.0)
    assert np.abs(near.samples).max() / np.abs(far.samples).max() == pytest.approx(4.0)
    both = render_echo(chirp, [Reflector(2.0), Reflector(4.0)], 0.0)
    n2, n4 = round(2 * 2 / 340 * SAMPLE_RATE), round(2 * 4 / 340 * SAMPLE_RATE)
    peak_near = np.abs(both.samples[0, n2 : n2 + 441]).max()
    peak_far = np.abs(both.samples[0, n4 : n4 + 441]).max()
    assert peak_near / peak_far == pytest.approx(4.0)


def test_silence_without_reflectors_or_noise():
    clip = render_echo(gen_chirp(), [], 0.0)
    assert clip.samples.shape == (2, round(0.08 * SAMPLE_RATE))
    assert not clip.samples.any()


def test_interaural_delay_from_cross_correlation():
    clip = render_echo(gen_chirp(), [Reflector(2.0, azimuth=math.pi / 2)], 0.0)
    left, right = clip.samples
    lag = int(np.argmax(np.correlate(left, right, mode="full"))) - (len(right) - 1)
    expected = EAR_SEPARATION / SPEED_OF_SOUND * SAMPLE_RATE
    assert abs(lag - expected) <= 1
    assert lag > 0  # source on the right reaches the right ear first


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 8.0), st.floats(-1.5, 1.5), st.integers(0, 1000))
def test_render_is_deterministic(d, az, seed):
    refl = [Reflector(d, az, 0.7)]
    a = render_echo(gen_chirp(), refl, 1e-3, seed)
    b = render_echo(gen_chirp(), refl, 1e-3, seed)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_truncation_is_recorded():
    clip = render_echo(gen_chirp(), [Reflector(13.0), Reflector(20.0)], 0.0)
    assert any("truncated" in w for w in clip.warnings)
    assert any("after the clip end" in w for w in clip.warnings)


def test_reflector_rejects_nonpositive_distance():
    with pytest.raises(ValueError):
        Reflector(0.0)


# -- STFT -----------------------------------------------------------------
def test_stft_zero_clip_and_shape():
    spec = compute_stft(EchoClip(np.zeros((2, 3528))))
    assert spec.mag.shape == (2, 257, (3528 - 512) // 128 + 1)
    assert not spec.mag.any()
    assert spec.freq_resolution == pytest.approx(44100 / 512)


def test_stft_sine_peak_bin_matches_direct_dft():
    t = np.arange(4096) / 44100
    x = np.sin(2 * np.pi * 1000 * t)
    spec = compute_stft(EchoClip(np.stack([x, x])))
    assert np.all(spec.mag[0].argmax(axis=0) == round(1000 * 512 / 44100))
    # direct DFT of the first frame, written out
    n = np.arange(512)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / 512)
    frame = x[:512] * w
    k = np.arange(257)[:, None]
    direct = np.abs((frame[None, :] * np.exp(-2j * np.pi * k * n[None, :] / 512)).sum(axis=1))
    np.testing.assert_allclose(spec.mag[0, :, 0], direct, atol=1e-9)


def test_stft_channel_swap_symmetry():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2000))
    a = compute_stft(EchoClip(x)).mag
    b = compute_stft(EchoClip(x[::-1])).mag
    np.testing.assert_array_equal(a, b[::-1])


def test_stft_rejects_bad_parameters():
    clip = EchoClip(np.zeros((2, 1000)))
    with pytest.raises(ValueError, match="power of two"):
        compute_stft(clip, 500)
    with pytest.raises(ValueError, match="hop"):
        compute_stft(clip, 512, 0)
    with pytest.raises(ValueError, match="fewer than n_fft"):
        compute_stft(EchoClip(np.zeros((2, 100))))


@pytest.mark.parametrize("d", [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
def test_onset_frame_hook(d):
    clip = render_echo(gen_chirp(), [Reflector(d)], 0.0)
    n0 = onset(clip.samples[0]) - 1
    assert abs(delay_frame(d) - n0 // 128) <= 1
    spec = compute_stft(clip).mag
    energy = spec.sum(axis=(0, 1))
    assert energy[delay_frame(d)] > 0
    # a frame ending before the onset is silent
    quiet = [f for f in range(spec.shape[-1]) if 128 * f + 512 <= n0]
    assert all(energy[f] == 0 for f in quiet)


def test_wav_round_trip(tmp_path):
    clip = render_echo(gen_chirp(), [Reflector(1.5, 0.3)], 1e-3, seed=3)
    write_wav(tmp_path / "x.wav", clip)
    back = read_wav(tmp_path / "x.wav")
    assert back.sample_rate == 44100 and back.samples.shape == clip.samples.shape
    assert np.abs(back.samples - clip.samples).max() <= 0.5 / 32767 + 1e-12
