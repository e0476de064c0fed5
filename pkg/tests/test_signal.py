import math

import numpy as np
import pytest
import torch

from kwtse.signal import (
    FBANK_FLOOR,
    SignalError,
    Waveform,
    fbank,
    fbank_frame_count,
    istft,
    istft_tensor,
    max_istft_length,
    mel_filterbank,
    mix,
    read_wav,
    si_snr,
    si_snr_tensor,
    stft,
    stft_tensor,
    write_wav,
)


def wf(x, sr=16000):
    return Waveform(np.asarray(x, dtype=np.float64), sr)


def test_shape_from_padding_policy():
    s = stft(wf(np.zeros(4096)), 512, 128)
    assert (s.num_bins, s.num_frames) == (257, 33)
    assert not np.any(s.bins)


def test_bin_centred_sinusoid_concentrates_energy():
    k, n = 20, 512
    x = np.cos(2 * np.pi * k * np.arange(8192) / n)
    S = stft(wf(x), n, 128).bins
    frame = np.abs(S[:, 16]) ** 2
    # periodic Hann: the neighbours get half the centre amplitude, so the centre bin holds 1/(1 + 2/4)
    assert frame[k] / frame.sum() == pytest.approx(2 / 3, rel=1e-9)
    assert frame[k - 1:k + 2].sum() / frame.sum() > 0.9


def test_round_trip_random_signals():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=int(rng.integers(1000, 20000)))
        y = istft(stft(wf(x)), len(x)).samples
        assert np.max(np.abs(y - x)) < 1e-6


def test_round_trip_snr_one_second_noise():
    x = np.random.default_rng(1).normal(size=16000)
    y = istft(stft(wf(x)), len(x)).samples
    snr = 10 * np.log10(np.sum(x**2) / np.sum((x - y) ** 2))
    assert snr > 120


def test_istft_of_zero_is_silence_and_length_checked():
    s = stft(wf(np.zeros(2000)))
    assert not np.any(istft(s, 2000).samples)
    with pytest.raises(SignalError):
        istft(s, max_istft_length(s.num_frames, 512, 128) + 1)


def test_stft_rejects_bad_geometry_and_empty_input():
    with pytest.raises(SignalError):
        stft(wf(np.zeros(1000)), 500, 100)
    with pytest.raises(SignalError):
        stft(wf(np.zeros(1000)), 512, 100)
    with pytest.raises(SignalError):
        stft_tensor(torch.zeros(0, dtype=torch.float64))


def test_batched_tensor_round_trip():
    x = torch.randn(3, 3000, dtype=torch.float64)
    y = istft_tensor(stft_tensor(x), 3000)
    assert torch.max(torch.abs(x - y)) < 1e-9


def test_fbank_frame_count_and_silence():
    f = fbank(wf(np.zeros(16000)))
    assert f.frames.shape == (98, 80)
    assert np.all(f.frames == np.log(FBANK_FLOOR))
    for n in (400, 401, 559, 560, 16000, 12345):
        assert fbank_frame_count(n, 16000) == (n - 400) // 160 + 1
        assert len(fbank(wf(np.ones(n))).frames) == fbank_frame_count(n, 16000)
    assert fbank(wf(np.zeros(8000), 8000)).frames.shape == (98, 80)


def test_fbank_white_noise_is_smooth_across_filters():
    rng = np.random.default_rng(2)
    diffs = []
    for _ in range(100):
        f = fbank(wf(rng.normal(size=4000))).frames
        db = 10 * f.mean(axis=0) / np.log(10)
        diffs.append(np.abs(np.diff(db)).mean())
    assert np.mean(diffs) < 10.0


def test_fbank_rejects_other_rates_and_short_input():
    with pytest.raises(SignalError):
        fbank(wf(np.zeros(4000), 22050))
    with pytest.raises(SignalError):
        fbank(wf(np.zeros(100)))


def test_mel_filters_cover_band_without_empty_rows():
    fb = mel_filterbank(80, 1024, 16000)
    assert fb.shape == (80, 513)
    assert np.all(fb.sum(axis=1) > 0)
    assert np.all(fb >= 0)


def test_mix_examples():
    out = mix(wf([1, 1]), wf([1, -1]), 0.5, 0.5, "min")
    np.testing.assert_array_equal(out.samples, [1.0, 0.0])
    long = wf([0.3, 0.2, 0.1, 0.5])
    out = mix(long, wf([0.4, 0.4]), 0.7, 0.2, "max")
    np.testing.assert_array_equal(out.samples[2:], 0.7 * long.samples[2:])
    assert len(mix(long, wf([0.4, 0.4]), 0.7, 0.2, "min")) == 2


def test_mix_is_linear():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = wf(rng.normal(size=int(rng.integers(5, 50))))
        b = wf(rng.normal(size=int(rng.integers(5, 50))))
        g1, g2 = rng.uniform(0.1, 0.9, size=2)
        protocol = "max" if rng.random() < 0.5 else "min"
        n = max(len(a), len(b)) if protocol == "max" else min(len(a), len(b))
        only_a = np.pad(a.samples, (0, max(0, n - len(a))))[:n]
        only_b = np.pad(b.samples, (0, max(0, n - len(b))))[:n]
        np.testing.assert_array_equal(mix(a, b, g1, g2, protocol).samples, g1 * only_a + g2 * only_b)


def test_mix_errors():
    with pytest.raises(SignalError):
        mix(wf([1.0]), wf([1.0], 8000), 0.5, 0.5)
    with pytest.raises(SignalError):
        mix(wf([1.0]), wf([1.0]), 0.95, 0.5)
    with pytest.raises(SignalError):
        mix(wf([1.0]), wf([1.0]), 0.5, 0.5, "mean")


def test_si_snr_hand_cases():
    assert si_snr([1.0, 0.0], [1.0, 1.0]) == 0.0
    assert si_snr([1.0, 0.0], [2.0, 2.0]) == 0.0
    assert si_snr([0.3, -1.0, 2.0], [0.3, -1.0, 2.0]) == math.inf


def test_si_snr_zero_mean_option():
    # removing the mean turns [1, 1] into silence, so the hand case has no finite value
    assert si_snr([1.0, 0.0], [1.0, 1.0], zero_mean=True) == -math.inf
    rng = np.random.default_rng(4)
    y, e = rng.normal(size=100), rng.normal(size=100)
    assert si_snr(y + 5, e + 3, zero_mean=True) == pytest.approx(si_snr(y - y.mean(), e - e.mean()), abs=1e-12)


def test_si_snr_scale_invariance():
    rng = np.random.default_rng(5)
    y, e = rng.normal(size=500), rng.normal(size=500)
    ref = si_snr(y, e)
    for a in (-3.0, 0.1, 7.0):
        assert si_snr(y, a * e) == pytest.approx(ref, abs=1e-9)
        assert si_snr(a * y, e) == pytest.approx(ref, abs=1e-9)


def test_si_snr_errors():
    with pytest.raises(SignalError):
        si_snr([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(SignalError):
        si_snr([1.0, 0.0], [1.0])


def test_tensor_variant_agrees_with_exact_metric():
    rng = np.random.default_rng(6)
    y, e = rng.normal(size=(2, 300)), rng.normal(size=(2, 300))
    got = si_snr_tensor(torch.from_numpy(y), torch.from_numpy(e)).numpy()
    for n in range(2):
        assert got[n] == pytest.approx(si_snr(y[n], e[n]), abs=1e-6)


def test_waveform_validation():
    with pytest.raises(SignalError):
        Waveform(np.array([np.nan]), 16000)
    with pytest.raises(SignalError):
        Waveform(np.zeros(3), 0)


def test_wav_round_trip(tmp_path):
    x = wf(np.random.default_rng(7).uniform(-0.9, 0.9, size=800), 8000)
    write_wav(tmp_path / "a.wav", x)
    y = read_wav(tmp_path / "a.wav")
    assert y.sample_rate == 8000
    assert np.max(np.abs(y.samples - x.samples)) <= 0.5 / 32767 + 1e-12
