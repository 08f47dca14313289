"""Training losses: VAD BCE, cosine latent similarity, multi-scale mel,
payload cross-entropy, hinge adversarial pair, and the weighted total."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import LossWeights
from .dsp import log_mel_spectrogram

MEL_WINDOW_SIZES = tuple(2 ** i for i in range(5, 12))  # 32 .. 2048
PROB_EPS = 1e-7


def loss_vad(p_hat: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on per-frame presence probabilities."""
    if p_hat.shape != labels.shape:
        raise ValueError(f"shape mismatch: {tuple(p_hat.shape)} vs {tuple(labels.shape)}")
    p = p_hat.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def loss_cos(speaker_sum: torch.Tensor, watermarked: torch.Tensor) -> torch.Tensor:
    """Mean over frames of (1 - cosine similarity); zero-norm frames contribute 0."""
    if speaker_sum.shape != watermarked.shape:
        raise ValueError(f"shape mismatch: {tuple(speaker_sum.shape)} vs {tuple(watermarked.shape)}")
    a, b = speaker_sum, watermarked
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    denom = na * nb
    cos = (a * b).sum(-1) / denom.clamp_min(1e-12)
    term = torch.where(denom > 0, 1.0 - cos, torch.zeros_like(cos))
    return term.mean()


def loss_mel(x: torch.Tensor, x_hat: torch.Tensor, sample_rate: int = 16000,
             n_mels: int = 64) -> torch.Tensor:
    """Multi-scale log-mel distance: sum over windows 2^5..2^11 of L1 + L2.

    Hop is window/4; L1 is the mean absolute difference and L2 the root mean
    squared difference of the log-mel spectrograms at each scale.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"length mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    total = x.new_zeros(())
    for win in MEL_WINDOW_SIZES:
        hop = win // 4
        ma = log_mel_spectrogram(x, sample_rate, win, hop, n_mels)
        mb = log_mel_spectrogram(x_hat, sample_rate, win, hop, n_mels)
        diff = ma - mb
        total = total + diff.abs().mean() + diff.pow(2).mean().sqrt()
    return total


def si_snr_loss(x: torch.Tensor, x_hat: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Negative mean scale-invariant SNR (dB); the alignment term for codec training."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    xm = x - x.mean(dim=-1, keepdim=True)
    ym = x_hat - x_hat.mean(dim=-1, keepdim=True)
    proj = (ym * xm).sum(-1, keepdim=True) / (xm.pow(2).sum(-1, keepdim=True) + eps) * xm
    err = ym - proj
    ratio = proj.pow(2).sum(-1) / (err.pow(2).sum(-1) + eps)
    return -10.0 * torch.log10(ratio + eps).mean()


def loss_dec(w_hat: torch.Tensor, true_hex: torch.Tensor) -> torch.Tensor:
    """Mean categorical cross-entropy over payload symbol positions.

    w_hat is (..., n/4, 16) row-stochastic; true_hex is (..., n/4) ints.
    """
    if w_hat.shape[:-1] != true_hex.shape:
        raise ValueError(f"shape mismatch: {tuple(w_hat.shape)} vs {tuple(true_hex.shape)}")
    picked = torch.gather(w_hat, -1, true_hex.long().unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_EPS)).mean()


def total_loss(parts: dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted sum per the five-term objective; aborts on non-finite parts."""
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite loss component: {name} = {float(value)}")
    zero = next(iter(parts.values())).new_zeros(()) if parts else torch.zeros(())
    return (weights.vad * parts.get("vad", zero)
            + weights.cos * parts.get("cos", zero)
            + weights.mel * parts.get("mel", zero)
            + weights.adv * parts.get("adv", zero)
            + weights.dec * parts.get("dec", zero))


class SpectrogramDiscriminator(nn.Module):
    """Multi-scale log-spectrogram discriminator: one realness score per scale."""

    SCALES = (256, 512, 1024)

    def __init__(self, channels: int = 16, sample_rate: int = 16000):
        super().__init__()
        self.sample_rate = sample_rate
        self.nets = nn.ModuleList()
        for _ in self.SCALES:
            self.nets.append(nn.Sequential(
                nn.Conv2d(1, channels, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(channels, channels * 2, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(channels * 2, channels * 2, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(channels * 2, 1, 3, padding=1),
            ))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """x is (B, L) audio; returns per-scale mean scores, each (B,)."""
        scores = []
        for n_fft, net in zip(self.SCALES, self.nets):
            spec = log_mel_spectrogram(x, self.sample_rate, n_fft, n_fft // 4, n_mels=64)
            out = net(spec.unsqueeze(1))
            scores.append(out.mean(dim=(1, 2, 3)))
        return scores


def loss_adv(disc: SpectrogramDiscriminator, x_hat: torch.Tensor) -> torch.Tensor:
    """Generator hinge term: mean over scales of relu(1 - D(x_hat))."""
    scores = disc(x_hat)
    return torch.stack([F.relu(1.0 - s).mean() for s in scores]).mean()


def discriminator_step(disc: SpectrogramDiscriminator, x: torch.Tensor,
                       x_hat: torch.Tensor) -> torch.Tensor:
    """Discriminator hinge term on a (real, generated) pair; caller optimizes."""
    real = disc(x)
    fake = disc(x_hat.detach())
    terms = [F.relu(1.0 - r).mean() + F.relu(1.0 + f).mean() for r, f in zip(real, fake)]
    return torch.stack(terms).mean()
