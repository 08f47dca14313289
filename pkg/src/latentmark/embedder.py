"""Cross-attention watermark embedder: writes the payload into the summed
speaker latents as a learned residual, then reconstructs audio through the
frozen codec decoder."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .audio import AudioBuffer
from .codec import CodecModel
from .config import EmbedderConfig
from .payload import PayloadEmbedding, WatermarkPayload


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype)[:, None]
    idx = torch.arange(0, dim, 2, dtype=dtype)[None, :]
    angle = pos / torch.pow(10000.0, idx / dim)
    pe = torch.zeros(length, dim, dtype=dtype)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : (dim - dim // 2)])
    return pe


class WatermarkEmbedder(nn.Module):
    """Transformer decoder over frames with cross-attention to the payload.

    Output is residual: s_hat = s + gamma * delta(s, w'), so a zero gamma
    reduces to the identity and early training stays close to the plain
    reconstruction.
    """

    def __init__(self, latent_dim: int, cfg: EmbedderConfig):
        super().__init__()
        if cfg.per_layer:
            raise NotImplementedError("per-RVQ-layer embedding variant is not implemented; "
                                      "set embedder.per_layer = false")
        self.cfg = cfg
        self.in_proj = nn.Linear(latent_dim, cfg.width)
        layer = nn.TransformerDecoderLayer(
            d_model=cfg.width, nhead=cfg.heads,
            dim_feedforward=cfg.width * cfg.ffn_mult,
            dropout=0.0, batch_first=True, norm_first=True)
        self.blocks = nn.TransformerDecoder(layer, num_layers=cfg.layers)
        self.out_proj = nn.Linear(cfg.width, latent_dim)
        self.gamma = nn.Parameter(torch.tensor(float(cfg.gamma_init)))

    def forward(self, speaker_sum: torch.Tensor, w_proj: torch.Tensor) -> torch.Tensor:
        """(B, T, d) speaker latents + (B, n/4, width) payload -> (B, T, d)."""
        if w_proj.shape[-1] != self.cfg.width:
            raise ValueError(f"payload width {w_proj.shape[-1]} != embedder width {self.cfg.width}")
        h = self.in_proj(speaker_sum)
        h = h + sinusoidal_positions(h.shape[1], self.cfg.width).to(h.dtype)
        delta = self.blocks(tgt=h, memory=w_proj)
        return speaker_sum + self.gamma * self.out_proj(delta)


def embed_latents(embedder: WatermarkEmbedder, speaker_sum: torch.Tensor,
                  w_proj: torch.Tensor) -> torch.Tensor:
    """Single-clip wrapper: (t, d) + (n/4, width) -> (t, d)."""
    embedder.eval()
    with torch.no_grad():
        return embedder(speaker_sum[None], w_proj[None])[0]


def watermark_audio(codec: CodecModel, embedder: WatermarkEmbedder,
                    payload_embedding: PayloadEmbedding,
                    audio: AudioBuffer | np.ndarray | torch.Tensor,
                    payload: WatermarkPayload) -> AudioBuffer:
    """Embed a payload into one clip: content layer passes through untouched."""
    from .codec import _as_tensor

    x = _as_tensor(audio)
    if x.numel() == 0:
        raise ValueError("empty audio")
    codec.eval()
    embedder.eval()
    with torch.no_grad():
        z1, spk, _ = codec.speaker_sum_batch(x[None])
        hex_t = torch.from_numpy(payload.hex.astype(np.int64))[None]
        w_proj = payload_embedding(hex_t)
        s_hat = embedder(spk, w_proj)
        out = codec.decode_batch(z1 + s_hat)[0]
    return AudioBuffer(out.numpy().astype(np.float32), codec.cfg.sample_rate)


def watermark_batch(codec: CodecModel, embedder: WatermarkEmbedder,
                    payload_embedding: PayloadEmbedding,
                    x: torch.Tensor, hex_batch: torch.Tensor) -> torch.Tensor:
    """Batched embedding used by training and evaluation; no grad."""
    with torch.no_grad():
        z1, spk, _ = codec.speaker_sum_batch(x)
        s_hat = embedder(spk, payload_embedding(hex_batch))
        return codec.decode_batch(z1 + s_hat)
