"""Small encoder / 8-layer residual VQ / decoder speech codec.

The first quantizer layer is distilled toward a frame-aligned content proxy
(energy-normalized mel-cepstra), so the remaining layers carry the
speaker-specific residual used as the watermark carrier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import AudioBuffer
from .config import CodecConfig, CodecTrainConfig
from .dsp import dct_matrix, mel_filterbank, power_stft
from .losses import loss_mel, si_snr_loss


@dataclass
class LatentSequence:
    """t x d frame latents at the codec frame rate."""

    values: torch.Tensor
    frame_rate: float = 50.0

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError(f"latents must be (t, d), got {tuple(self.values.shape)}")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class QuantizedLayers:
    """Per-layer quantized latents z1..zQ plus their integer code indices."""

    z: list[torch.Tensor]      # each (t, d)
    codes: list[torch.Tensor]  # each (t,) int64
    frame_rate: float = 50.0

    @property
    def num_layers(self) -> int:
        return len(self.z)

    def layer_sum(self, start: int = 0, end: int | None = None) -> torch.Tensor:
        end = self.num_layers if end is None else end
        return torch.stack(self.z[start:end]).sum(0)

    def speaker_sum(self) -> torch.Tensor:
        """Sum of layers 2..Q (everything but the content layer)."""
        return self.layer_sum(1)


def _stage_conv_params(stride: int) -> tuple[int, int]:
    # kernel - 2*padding == stride keeps frame counts exact multiples
    if stride % 2 == 0:
        return 2 * stride, stride // 2
    return 2 * stride + 1, (stride + 1) // 2


class ResidualUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.elu(self.conv1(F.elu(x))))


def _stage_widths(base_channels: int, num_stages: int) -> list[int]:
    return [min(base_channels * 2 ** i, base_channels * 8) for i in range(num_stages)]


class SeqEncoder(nn.Module):
    """Strided conv stack: (B, L) audio -> (B, T, d) latents, T = L / hop.

    Each stage downsamples first, then refines, so the residual units run at
    the short side of every stage (the full-length tail is where CPU time goes).
    """

    def __init__(self, dim: int, base_channels: int, strides: tuple[int, ...]):
        super().__init__()
        widths = _stage_widths(base_channels, len(strides))
        layers: list[nn.Module] = []
        in_ch = 1
        for i, s in enumerate(strides):
            k, p = _stage_conv_params(s)
            layers += [nn.Conv1d(in_ch, widths[i], k, stride=s, padding=p),
                       ResidualUnit(widths[i]), nn.ELU()]
            in_ch = widths[i]
        layers += [nn.Conv1d(widths[-1], dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x.unsqueeze(1)).transpose(1, 2)


class SeqDecoder(nn.Module):
    """Transposed mirror of SeqEncoder: (B, T, d) -> (B, T * hop) in [-1, 1]."""

    def __init__(self, dim: int, base_channels: int, strides: tuple[int, ...]):
        super().__init__()
        widths = _stage_widths(base_channels, len(strides))
        tail = max(base_channels // 2, 8)
        layers: list[nn.Module] = [nn.Conv1d(dim, widths[-1], 3, padding=1)]
        for i in reversed(range(len(strides))):
            s = strides[i]
            k, p = _stage_conv_params(s)
            out_ch = widths[i - 1] if i > 0 else tail
            layers += [ResidualUnit(widths[i]), nn.ELU(),
                       nn.ConvTranspose1d(widths[i], out_ch, k, stride=s, padding=p)]
        layers += [nn.ELU(), nn.Conv1d(tail, 1, 7, padding=3)]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.net(z.transpose(1, 2))).squeeze(1)


class ResidualVQ(nn.Module):
    """Cascaded nearest-neighbor quantizers with EMA codebook updates."""

    def __init__(self, num_quantizers: int, codebook_size: int, dim: int,
                 ema_decay: float = 0.99, dead_code_epochs: int = 2):
        super().__init__()
        self.num_quantizers = num_quantizers
        self.codebook_size = codebook_size
        self.dim = dim
        self.ema_decay = ema_decay
        self.dead_code_epochs = dead_code_epochs
        self.register_buffer("embed", torch.randn(num_quantizers, codebook_size, dim) * 0.01)
        self.register_buffer("ema_count", torch.zeros(num_quantizers, codebook_size))
        self.register_buffer("ema_sum", torch.zeros(num_quantizers, codebook_size, dim))
        self.register_buffer("initialized", torch.tensor(False))
        self.register_buffer("epoch_usage", torch.zeros(num_quantizers, codebook_size))
        self.register_buffer("unused_epochs", torch.zeros(num_quantizers, codebook_size))

    def _nearest(self, layer: int, vectors: torch.Tensor) -> torch.Tensor:
        book = self.embed[layer]
        d2 = (vectors.pow(2).sum(1, keepdim=True)
              - 2.0 * vectors @ book.t()
              + book.pow(2).sum(1)[None, :])
        return d2.argmin(dim=1)

    def quantize_layers(self, latents: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, d) -> codes (Q, B, T) and quantized layers z (Q, B, T, d)."""
        shape = latents.shape[:-1]
        residual = latents.reshape(-1, self.dim)
        codes, zs = [], []
        for q in range(self.num_quantizers):
            idx = self._nearest(q, residual)
            z = self.embed[q][idx]
            codes.append(idx.reshape(shape))
            zs.append(z.reshape(*shape, self.dim))
            residual = residual - z
        return torch.stack(codes), torch.stack(zs)

    @torch.no_grad()
    def kmeans_init(self, latents: torch.Tensor, seed: int = 0, iters: int = 12) -> None:
        """Per-layer k-means on the first training batch of latents."""
        gen = torch.Generator().manual_seed(seed)
        residual = latents.reshape(-1, self.dim).clone()
        for q in range(self.num_quantizers):
            centers = _kmeans(residual, self.codebook_size, iters, gen)
            self.embed[q] = centers
            self.ema_count[q].fill_(1.0)
            self.ema_sum[q] = centers.clone()
            idx = self._nearest(q, residual)
            residual = residual - self.embed[q][idx]
        self.initialized.fill_(True)

    @torch.no_grad()
    def _ema_update(self, layer: int, vectors: torch.Tensor, idx: torch.Tensor) -> None:
        onehot = F.one_hot(idx, self.codebook_size).to(vectors.dtype)
        counts = onehot.sum(0)
        sums = onehot.t() @ vectors
        d = self.ema_decay
        self.ema_count[layer].mul_(d).add_(counts, alpha=1 - d)
        self.ema_sum[layer].mul_(d).add_(sums, alpha=1 - d)
        # Laplace-smoothed means keep rarely used codes finite
        n = self.ema_count[layer].sum()
        smoothed = (self.ema_count[layer] + 1e-5) / (n + self.codebook_size * 1e-5) * n
        self.embed[layer] = self.ema_sum[layer] / smoothed.unsqueeze(1)
        self.epoch_usage[layer] += counts

    def forward(self, latents: torch.Tensor, update: bool = False
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Quantize with straight-through gradients.

        Returns (z_sum_ste, z1_ste, commit_loss, codes); gradients of the STE
        outputs flow to the encoder, codebooks train only via EMA.
        """
        shape = latents.shape[:-1]
        flat = latents.reshape(-1, self.dim)
        residual = flat
        z_total = torch.zeros_like(flat)
        z1 = None
        commit = latents.new_zeros(())
        codes = []
        for q in range(self.num_quantizers):
            idx = self._nearest(q, residual.detach())
            z = self.embed[q][idx]
            if update and self.training:
                self._ema_update(q, residual.detach(), idx)
                z = self.embed[q][idx]
            commit = commit + F.mse_loss(residual, z.detach())
            codes.append(idx.reshape(shape))
            z_total = z_total + z
            if q == 0:
                z1 = z_total.clone()
            residual = residual - z
        commit = commit / self.num_quantizers
        z_sum_ste = flat + (z_total - flat).detach()
        z1_ste = flat + (z1 - flat).detach()
        return (z_sum_ste.reshape(*shape, self.dim),
                z1_ste.reshape(*shape, self.dim),
                commit, torch.stack(codes))

    @torch.no_grad()
    def end_epoch(self, reseed_pool: torch.Tensor | None = None) -> int:
        """Dead-code bookkeeping; reseeds codes unused for N consecutive epochs."""
        used = self.epoch_usage > 0
        self.unused_epochs[used] = 0
        self.unused_epochs[~used] += 1
        reseeded = 0
        if reseed_pool is not None and reseed_pool.numel():
            pool = reseed_pool.reshape(-1, self.dim)
            gen = torch.Generator().manual_seed(int(self.unused_epochs.sum().item()))
            for q in range(self.num_quantizers):
                dead = torch.nonzero(self.unused_epochs[q] >= self.dead_code_epochs).flatten()
                if not len(dead):
                    continue
                pick = torch.randint(0, pool.shape[0], (len(dead),), generator=gen)
                fresh = pool[pick] + torch.randn(len(dead), self.dim, generator=gen) * 1e-4
                self.embed[q, dead] = fresh
                self.ema_sum[q, dead] = fresh
                self.ema_count[q, dead] = 1.0
                self.unused_epochs[q, dead] = 0
                reseeded += len(dead)
        self.epoch_usage.zero_()
        return reseeded


@torch.no_grad()
def _kmeans(data: torch.Tensor, k: int, iters: int, gen: torch.Generator) -> torch.Tensor:
    n = data.shape[0]
    if n >= k:
        centers = data[torch.randperm(n, generator=gen)[:k]].clone()
    else:
        pick = torch.randint(0, n, (k,), generator=gen)
        centers = data[pick] + torch.randn(k, data.shape[1], generator=gen) * 1e-3
    for _ in range(iters):
        d2 = torch.cdist(data, centers).pow(2)
        assign = d2.argmin(1)
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = data[mask].mean(0)
    # nudge duplicate centroids apart so codebook rows stay distinct
    for j in range(1, k):
        if (centers[:j] - centers[j]).pow(2).sum(1).min() < 1e-12:
            centers[j] += torch.randn(data.shape[1], generator=gen) * 1e-4
    return centers


class CodecModel(nn.Module):
    """Encoder, residual VQ, decoder, and the content/speaker probes."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        hop = int(np.prod(cfg.strides))
        if hop != cfg.hop:
            raise ValueError(f"stride product {hop} must equal hop {cfg.hop}")
        self.encoder = SeqEncoder(cfg.dim, cfg.base_channels, cfg.strides)
        self.decoder = SeqDecoder(cfg.dim, cfg.base_channels, cfg.strides)
        self.rvq = ResidualVQ(cfg.num_quantizers, cfg.codebook_size, cfg.dim)
        self.content_probe = nn.Linear(cfg.dim, cfg.proxy_coeffs)
        self.speaker_probe = nn.Linear(cfg.dim, cfg.proxy_coeffs)

    @property
    def hop(self) -> int:
        return self.cfg.hop

    def trim_to_frames(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[-1] // self.hop
        if t < 1:
            raise ValueError(f"audio too short: {x.shape[-1]} samples < one {self.hop}-sample frame")
        return x[..., :t * self.hop]

    def encode_batch(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L) audio -> (B, floor(L/hop), d) latents."""
        return self.encoder(self.trim_to_frames(x))

    def decode_batch(self, z: torch.Tensor) -> torch.Tensor:
        """(B, T, d) latents -> (B, T*hop) audio in [-1, 1]."""
        if z.shape[-1] != self.cfg.dim:
            raise ValueError(f"latent dim {z.shape[-1]} != codec dim {self.cfg.dim}")
        return self.decoder(z)

    @torch.no_grad()
    def roundtrip_batch(self, x: torch.Tensor) -> torch.Tensor:
        """Full encode/quantize/decode pass used as an augmentation."""
        latents = self.encode_batch(x)
        _, zs = self.rvq.quantize_layers(latents)
        return self.decode_batch(zs.sum(0))

    def speaker_sum_batch(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (z1, speaker_sum, latents) for a (B, L) batch; no grads."""
        with torch.no_grad():
            latents = self.encode_batch(x)
            _, zs = self.rvq.quantize_layers(latents)
        return zs[0], zs[1:].sum(0), latents

    def residual_latents_batch(self, x: torch.Tensor) -> torch.Tensor:
        """l - z1 on a batch; differentiable w.r.t. x through the encoder."""
        latents = self.encode_batch(x)
        with torch.no_grad():
            flat = latents.reshape(-1, self.cfg.dim)
            z1 = self.rvq.embed[0][self.rvq._nearest(0, flat)].reshape_as(latents)
        return latents - z1


def _as_tensor(audio: AudioBuffer | np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(audio, AudioBuffer):
        audio = audio.samples
    if isinstance(audio, np.ndarray):
        audio = torch.from_numpy(np.ascontiguousarray(audio))
    return audio.float()


def encode(model: CodecModel, audio: AudioBuffer | np.ndarray | torch.Tensor) -> LatentSequence:
    """Compress one clip into frame latents; t = floor(samples / hop)."""
    x = _as_tensor(audio)
    if x.numel() == 0:
        raise ValueError("empty audio")
    model.eval()
    with torch.no_grad():
        values = model.encode_batch(x[None])[0]
    return LatentSequence(values, frame_rate=model.cfg.frame_rate)


def quantize(model: CodecModel, latents: LatentSequence | torch.Tensor) -> QuantizedLayers:
    """Residual quantization of a (t, d) latent sequence over all layers."""
    values = latents.values if isinstance(latents, LatentSequence) else latents
    if values.shape[-1] != model.cfg.dim:
        raise ValueError(f"latent dim {values.shape[-1]} != codec dim {model.cfg.dim}")
    with torch.no_grad():
        codes, zs = model.rvq.quantize_layers(values[None])
    return QuantizedLayers(z=[zs[q, 0] for q in range(zs.shape[0])],
                           codes=[codes[q, 0] for q in range(codes.shape[0])],
                           frame_rate=model.cfg.frame_rate)


def dequantize_sum(q: QuantizedLayers) -> LatentSequence:
    """Elementwise sum of all quantized layers."""
    return LatentSequence(q.layer_sum(), frame_rate=q.frame_rate)


def decode(model: CodecModel, latents: LatentSequence | torch.Tensor) -> AudioBuffer:
    """Reconstruct audio from latents; exactly t*hop samples in [-1, 1]."""
    values = latents.values if isinstance(latents, LatentSequence) else latents
    model.eval()
    with torch.no_grad():
        x = model.decode_batch(values[None])[0]
    return AudioBuffer(x.numpy().astype(np.float32), model.cfg.sample_rate)


def speaker_latents(model: CodecModel, audio: AudioBuffer | np.ndarray | torch.Tensor) -> LatentSequence:
    """l_s = l - z1: encoder output minus its first-layer quantization."""
    seq = encode(model, audio)
    with torch.no_grad():
        flat = seq.values
        idx = model.rvq._nearest(0, flat)
        z1 = model.rvq.embed[0][idx]
    return LatentSequence(seq.values - z1, frame_rate=seq.frame_rate)


def content_proxy_target(audio: AudioBuffer | np.ndarray | torch.Tensor,
                         cfg: CodecConfig | None = None) -> np.ndarray:
    """Frame-aligned content descriptor: 20 energy-normalized mel-cepstra.

    Each frame's mel spectrum is normalized by its total energy before the
    log, so amplitude scaling leaves the target unchanged; DCT coefficient 0
    (pure energy) is dropped.
    """
    cfg = cfg or CodecConfig()
    x = _as_tensor(audio)
    t = x.shape[-1] // cfg.hop
    if t < 1:
        raise ValueError("audio too short for one frame")
    x = x[:t * cfg.hop]
    with torch.no_grad():
        power = power_stft(x, cfg.proxy_window, cfg.hop)[..., :t]
        bank = mel_filterbank(cfg.sample_rate, cfg.proxy_window, cfg.proxy_mels)
        mel = bank @ power
        sums = mel.sum(0, keepdim=True)
        mel = torch.where(sums > 0, mel / sums.clamp_min(1e-30), torch.zeros_like(mel))
        logm = torch.log(mel + 1e-10)
        dct = dct_matrix(cfg.proxy_coeffs + 1, cfg.proxy_mels)[1:]
        coeffs = dct @ logm
    return coeffs.t().numpy().astype(np.float32)


def train_codec(dataset, config, val_dataset=None,
                log_path: str | Path | None = None,
                progress: bool = True) -> tuple[CodecModel, dict]:
    """Stage-1 training: reconstruction + commitment + content distillation.

    `dataset`/`val_dataset` are ClipDatasets; `config` carries codec and
    codec_train sections (a RunConfig). Returns the model (best validation
    SI-SNR state) and a summary dict.
    """
    from .metrics import si_snr  # local import to avoid a cycle

    ccfg: CodecConfig = config.codec
    tcfg: CodecTrainConfig = config.codec_train
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    torch.manual_seed(tcfg.seed)
    model = CodecModel(ccfg)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr)
    rng = np.random.default_rng(tcfg.seed)

    clips = torch.from_numpy(dataset.as_array())
    clips = clips[:, :clips.shape[1] // ccfg.hop * ccfg.hop]
    targets = torch.from_numpy(np.stack([
        content_proxy_target(clips[i].numpy(), ccfg) for i in range(len(clips))
    ]))
    val_clips = None
    if val_dataset is not None and len(val_dataset):
        val_clips = torch.from_numpy(val_dataset.as_array())[:64]
        val_clips = val_clips[:, :val_clips.shape[1] // ccfg.hop * ccfg.hop]

    log_fh = open(log_path, "w") if log_path else None
    best = {"si_snr": -np.inf, "state": None}
    step = 0
    summary: dict = {}
    try:
        for epoch in range(tcfg.epochs):
            order = rng.permutation(len(clips))
            model.train()
            for start in range(0, len(order), tcfg.batch_size):
                idx = order[start:start + tcfg.batch_size]
                x = clips[idx]
                latents = model.encode_batch(x)
                if not bool(model.rvq.initialized):
                    model.rvq.kmeans_init(latents.detach(), seed=tcfg.seed)
                z_sum, z1, commit, _ = model.rvq(latents, update=True)
                x_hat = model.decode_batch(z_sum)
                proxy = targets[idx]
                distill = F.mse_loss(model.content_probe(z1), proxy)
                spk_probe = F.mse_loss(model.speaker_probe((z_sum - z1).detach()), proxy)
                recon_l1 = (x - x_hat).abs().mean()
                align = si_snr_loss(x, x_hat)
                mel = loss_mel(x, x_hat, ccfg.sample_rate) if tcfg.mel_weight > 0 else x.new_zeros(())
                loss = (tcfg.wav_l1_weight * recon_l1 + tcfg.mel_weight * mel
                        + tcfg.align_weight * align
                        + tcfg.commitment_weight * commit
                        + tcfg.distill_weight * distill + spk_probe)
                if not torch.isfinite(loss):
                    raise FloatingPointError(
                        f"codec training diverged at step {step}: "
                        f"l1={recon_l1.item():.4g} mel={mel.item():.4g} align={align.item():.4g} "
                        f"commit={commit.item():.4g} distill={distill.item():.4g}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
                opt.step()
                if log_fh and step % tcfg.log_every == 0:
                    log_fh.write(json.dumps({
                        "step": step, "epoch": epoch, "loss": loss.item(),
                        "l1": recon_l1.item(), "mel": mel.item(), "align": align.item(),
                        "commit": commit.item(), "distill": distill.item(),
                        "spk_probe": spk_probe.item()}) + "\n")
                    log_fh.flush()
                step += 1
            model.rvq.end_epoch(reseed_pool=latents.detach())

            model.eval()
            stats = {"epoch": epoch, "step": step}
            if val_clips is not None:
                with torch.no_grad():
                    snrs, c_mse, s_mse = [], [], []
                    for start in range(0, len(val_clips), tcfg.batch_size):
                        vx = val_clips[start:start + tcfg.batch_size]
                        vl = model.encode_batch(vx)
                        _, vzs = model.rvq.quantize_layers(vl)
                        vx_hat = model.decode_batch(vzs.sum(0))
                        for i in range(len(vx)):
                            snrs.append(si_snr(vx[i].numpy(), vx_hat[i].numpy()))
                        vp = torch.stack([torch.from_numpy(content_proxy_target(vx[i].numpy(), ccfg))
                                          for i in range(len(vx))])
                        c_mse.append(float(F.mse_loss(model.content_probe(vzs[0]), vp)))
                        s_mse.append(float(F.mse_loss(model.speaker_probe(vzs[1:].sum(0)), vp)))
                stats.update(val_si_snr=float(np.mean(snrs)),
                             content_probe_mse=float(np.mean(c_mse)),
                             speaker_probe_mse=float(np.mean(s_mse)))
                if stats["val_si_snr"] > best["si_snr"]:
                    best = {"si_snr": stats["val_si_snr"],
                            "state": {k: v.clone() for k, v in model.state_dict().items()}}
            if progress:
                print(f"[codec] epoch {epoch}: " + " ".join(
                    f"{k}={v:.4g}" for k, v in stats.items() if k not in ("epoch", "step")))
            if log_fh:
                log_fh.write(json.dumps({"val": stats}) + "\n")
                log_fh.flush()
            summary = stats
    finally:
        if log_fh:
            log_fh.close()
    if best["state"] is not None:
        model.load_state_dict(best["state"])
        summary["best_val_si_snr"] = best["si_snr"]
    model.eval()
    return model, summary
