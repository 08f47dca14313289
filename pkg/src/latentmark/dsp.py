"""Shared DSP pieces: mel filterbanks, DCT basis, spectrograms, biquad filters."""

from __future__ import annotations

import functools

import numpy as np
import torch
from scipy.signal import butter, lfilter


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=32)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int,
                   fmin: float = 0.0, fmax: float | None = None) -> torch.Tensor:
    """Triangular mel filterbank, shape (n_mels, n_fft // 2 + 1)."""
    if fmax is None:
        fmax = sample_rate / 2.0
    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bank = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (fft_freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - fft_freqs) / max(hi - mid, 1e-9)
        bank[i] = np.clip(np.minimum(up, down), 0.0, None)
    return torch.from_numpy(bank.astype(np.float32))


@functools.lru_cache(maxsize=8)
def dct_matrix(n_out: int, n_in: int) -> torch.Tensor:
    """Orthonormal DCT-II rows 0..n_out-1 over an n_in-point input."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    mat = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in))
    mat *= np.sqrt(2.0 / n_in)
    mat[0] /= np.sqrt(2.0)
    return torch.from_numpy(mat.astype(np.float32))


@functools.lru_cache(maxsize=16)
def _hann(win: int) -> torch.Tensor:
    return torch.hann_window(win, dtype=torch.float32)


def power_stft(x: torch.Tensor, n_fft: int, hop: int) -> torch.Tensor:
    """Power spectrogram with centered frames; x is (..., L)."""
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    spec = torch.stft(x, n_fft=n_fft, hop_length=hop, win_length=n_fft,
                      window=_hann(n_fft).to(x.dtype), center=True,
                      pad_mode="constant", return_complex=True)
    power = spec.real ** 2 + spec.imag ** 2
    return power[0] if squeeze else power


def log_mel_spectrogram(x: torch.Tensor, sample_rate: int, n_fft: int, hop: int,
                        n_mels: int = 64, eps: float = 1e-5) -> torch.Tensor:
    """log(mel power + eps); shape (..., n_mels, frames)."""
    power = power_stft(x, n_fft, hop)
    bank = mel_filterbank(sample_rate, n_fft, n_mels).to(power.dtype)
    return torch.log(bank @ power + eps)


def butter_filter(x: np.ndarray, sample_rate: int, cutoff_hz: float,
                  kind: str, order: int = 2) -> np.ndarray:
    """Biquad-style Butterworth low/high-pass on a 1-D signal."""
    if kind not in ("lowpass", "highpass"):
        raise ValueError(f"kind must be lowpass/highpass, got {kind!r}")
    wn = min(max(cutoff_hz / (sample_rate / 2.0), 1e-4), 0.999)
    b, a = butter(order, wn, btype=kind)
    return lfilter(b, a, x.astype(np.float64)).astype(np.float32)
