"""DSP kernels: STFT/ISTFT, log-mel filterbank, mixing, SI-SNR and WAV I/O."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

SI_SNR_EPS = 1e-8
FBANK_FLOOR = 1e-10


class SignalError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError(f"mono waveform expected, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise SignalError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise SignalError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    bins: np.ndarray  # (F, T) complex
    frame_hop: int
    window_len: int

    @property
    def num_bins(self) -> int:
        return self.bins.shape[0]

    @property
    def num_frames(self) -> int:
        return self.bins.shape[1]


@dataclass
class FbankFeatures:
    frames: np.ndarray  # (T, D)
    frame_shift_ms: float = 10.0
    window_ms: float = 25.0


# ---------------------------------------------------------------------------
# STFT


def hann(n: int, dtype=torch.float64) -> Tensor:
    """Periodic Hann window."""
    k = torch.arange(n, dtype=dtype)
    return 0.5 - 0.5 * torch.cos(2 * math.pi * k / n)


def _check_geometry(window_len: int, hop: int) -> None:
    if window_len <= 0 or window_len & (window_len - 1):
        raise SignalError(f"window length must be a power of two, got {window_len}")
    if hop <= 0 or window_len % hop:
        raise SignalError(f"hop {hop} must divide window length {window_len}")


def num_stft_frames(length: int, hop: int) -> int:
    return length // hop + 1


def stft_tensor(x: Tensor, window_len: int = 512, hop: int = 128) -> Tensor:
    """Differentiable STFT of ``x`` (..., L) -> complex (..., F, T).

    Frames are Hann-windowed and centred: the signal is reflection-padded by
    ``window_len // 2`` on both sides, so frame ``t`` is centred on sample
    ``t * hop``.
    """
    _check_geometry(window_len, hop)
    if x.shape[-1] == 0:
        raise SignalError("cannot transform an empty waveform")
    pad = window_len // 2
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, x.shape[-1])
    if x.shape[-1] > pad:
        padded = torch.nn.functional.pad(flat, (pad, pad), mode="reflect")
    else:
        padded = torch.nn.functional.pad(flat, (pad, pad))
    frames = padded[:, 0].unfold(-1, window_len, hop)  # (N, T, W)
    spec = torch.fft.rfft(frames * hann(window_len, x.dtype), dim=-1)
    return spec.transpose(-1, -2).reshape(*lead, window_len // 2 + 1, -1)


def max_istft_length(num_frames: int, window_len: int, hop: int) -> int:
    return (num_frames - 1) * hop + window_len // 2


def istft_tensor(spec: Tensor, length: int, window_len: int = 512, hop: int = 128) -> Tensor:
    """Inverse of :func:`stft_tensor` by weighted overlap-add.

    Each inverse frame is windowed again and the sum is divided by the
    overlapped squared window, which makes ``istft(stft(x)) == x`` up to
    rounding for any hop dividing the window.
    """
    _check_geometry(window_len, hop)
    n_frames = spec.shape[-1]
    limit = max_istft_length(n_frames, window_len, hop)
    if length > limit:
        raise SignalError(f"requested {length} samples but only {limit} are reconstructable from {n_frames} frames")
    lead = spec.shape[:-2]
    flat = spec.reshape(-1, spec.shape[-2], n_frames)
    win = hann(window_len, torch.float64)
    frames = torch.fft.irfft(flat.transpose(-1, -2), n=window_len, dim=-1) * win  # (N, T, W)
    total = (n_frames - 1) * hop + window_len
    out = torch.nn.functional.fold(
        frames.transpose(-1, -2), output_size=(1, total), kernel_size=(1, window_len), stride=(1, hop)
    ).reshape(flat.shape[0], total)
    norm = torch.nn.functional.fold(
        (win**2).expand(n_frames, window_len).T.reshape(1, window_len, n_frames),
        output_size=(1, total), kernel_size=(1, window_len), stride=(1, hop),
    ).reshape(total)
    pad = window_len // 2
    norm = norm[pad:pad + length]
    out = out[:, pad:pad + length] / torch.where(norm > 1e-11, norm, torch.ones_like(norm))
    return out.reshape(*lead, length)


def stft(w: Waveform, window_len: int = 512, hop: int = 128) -> ComplexSpectrogram:
    if len(w) == 0:
        raise SignalError("cannot transform an empty waveform")
    spec = stft_tensor(torch.from_numpy(w.samples), window_len, hop)
    return ComplexSpectrogram(bins=spec.numpy(), frame_hop=hop, window_len=window_len)


def istft(s: ComplexSpectrogram, out_len: int, sample_rate: int = 16000) -> Waveform:
    if s.num_bins != s.window_len // 2 + 1:
        raise SignalError(f"{s.num_bins} bins inconsistent with window length {s.window_len}")
    y = istft_tensor(torch.from_numpy(np.asarray(s.bins, dtype=np.complex128)), out_len, s.window_len, s.frame_hop)
    return Waveform(y.numpy(), sample_rate)


# ---------------------------------------------------------------------------
# Filterbank


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, low_hz: float = 20.0, high_hz: float | None = None) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mels, n_fft // 2 + 1)."""
    high_hz = sample_rate / 2 if high_hz is None else high_hz
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(up, down), 0.0, None)


def _fbank_fft_size(sample_rate: int, window: int) -> int:
    # Narrow low-frequency filters need a fine grid: at least 15.625 Hz per bin.
    n = 1 << (window - 1).bit_length()
    while sample_rate / n > 15.625:
        n *= 2
    return n


def fbank_frame_count(length: int, sample_rate: int, window_ms: float = 25.0, shift_ms: float = 10.0) -> int:
    win = int(round(sample_rate * window_ms / 1000))
    shift = int(round(sample_rate * shift_ms / 1000))
    return 0 if length < win else (length - win) // shift + 1


def fbank(w: Waveform, n_mels: int = 80, window_ms: float = 25.0, shift_ms: float = 10.0) -> FbankFeatures:
    """Log mel filterbank energies; no padding, one frame per ``shift_ms``."""
    if w.sample_rate not in (8000, 16000):
        raise SignalError(f"unsupported sample rate {w.sample_rate}")
    win = int(round(w.sample_rate * window_ms / 1000))
    shift = int(round(w.sample_rate * shift_ms / 1000))
    if len(w) < win:
        raise SignalError(f"waveform of {len(w)} samples is shorter than one {win}-sample window")
    n_frames = (len(w) - win) // shift + 1
    idx = np.arange(win)[None, :] + shift * np.arange(n_frames)[:, None]
    frames = w.samples[idx] * np.hamming(win)
    n_fft = _fbank_fft_size(w.sample_rate, win)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2
    energies = power @ _cached_filters(n_mels, n_fft, w.sample_rate).T
    return FbankFeatures(np.log(np.maximum(energies, FBANK_FLOOR)), shift_ms, window_ms)


_FILTER_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _cached_filters(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    key = (n_mels, n_fft, sample_rate)
    if key not in _FILTER_CACHE:
        _FILTER_CACHE[key] = mel_filterbank(n_mels, n_fft, sample_rate)
    return _FILTER_CACHE[key]


# ---------------------------------------------------------------------------
# Mixing and SI-SNR


def mix(s1: Waveform, s2: Waveform, gamma1: float, gamma2: float, protocol: str = "max") -> Waveform:
    """``gamma1 * s1 + gamma2 * s2`` after zero-padding (max) or truncating (min)."""
    if s1.sample_rate != s2.sample_rate:
        raise SignalError(f"sample rates differ: {s1.sample_rate} vs {s2.sample_rate}")
    for g in (gamma1, gamma2):
        if not 0.1 <= g <= 0.9:
            raise SignalError(f"scaling factor {g} outside [0.1, 0.9]")
    a, b = align_lengths(s1.samples, s2.samples, protocol)
    return Waveform(gamma1 * a + gamma2 * b, s1.sample_rate)


def align_lengths(a: np.ndarray, b: np.ndarray, protocol: str) -> tuple[np.ndarray, np.ndarray]:
    if protocol == "max":
        n = max(len(a), len(b))
        return np.pad(a, (0, n - len(a))), np.pad(b, (0, n - len(b)))
    if protocol == "min":
        n = min(len(a), len(b))
        return a[:n], b[:n]
    raise SignalError(f"unknown mixing protocol {protocol!r}")


def si_snr(reference, estimate, zero_mean: bool = False) -> float:
    """Scale-invariant SNR in dB; ``inf`` when the estimate is an exact rescaling."""
    y = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    y_hat = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if y.shape != y_hat.shape:
        raise SignalError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if zero_mean:
        y = y - y.mean()
        y_hat = y_hat - y_hat.mean()
    ref_energy = float(y @ y)
    if ref_energy == 0.0:
        raise SignalError("reference signal is all zeros")
    s_target = (float(y_hat @ y) / ref_energy) * y
    e_noise = y_hat - s_target
    noise = float(e_noise @ e_noise)
    signal = float(s_target @ s_target)
    if signal == 0.0:  # silent or orthogonal estimate, including the all-zero one
        return -math.inf
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


def si_snr_tensor(reference: Tensor, estimate: Tensor, eps: float = SI_SNR_EPS) -> Tensor:
    """Batched, epsilon-stabilised SI-SNR over the last axis (training objective)."""
    if reference.shape != estimate.shape:
        raise SignalError(f"length mismatch: {tuple(reference.shape)} vs {tuple(estimate.shape)}")
    ref_energy = (reference * reference).sum(-1, keepdim=True)
    if bool((ref_energy == 0).any()):
        raise SignalError("reference signal is all zeros")
    s_target = (estimate * reference).sum(-1, keepdim=True) / ref_energy * reference
    e_noise = estimate - s_target
    ratio = ((s_target**2).sum(-1) + eps) / ((e_noise**2).sum(-1) + eps)
    return 10.0 * torch.log10(ratio)


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM, mono)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(w.sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise SignalError(f"{path}: only mono 16-bit PCM is supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, rate)
