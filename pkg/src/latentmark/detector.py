"""Global transformer watermark decoder: payload symbols from CLS tokens,
per-frame presence probabilities from frame tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .audio import AudioBuffer
from .augment import FrameLabels, dual_threshold_vad
from .codec import CodecModel
from .config import DetectorConfig
from .payload import hex_to_bits


@dataclass
class DetectionResult:
    """Decoded payload distribution plus per-frame presence probabilities."""

    w_hat: np.ndarray           # (n/4, 16) row-stochastic
    p_hat: np.ndarray           # (t,) in [0, 1]
    bits: np.ndarray            # (n,) hard decision
    presence_score: float       # mean p_hat over speech-active frames

    def hex_str(self) -> str:
        return "".join(format(int(s), "x") for s in self.w_hat.argmax(axis=1))

    def per_symbol_confidence(self) -> np.ndarray:
        return self.w_hat.max(axis=1)


class WatermarkDetector(nn.Module):
    """Transformer encoder over (CLS bank + projected speaker latents).

    Frame tokens carry no positional encoding, so the CLS readout is
    permutation-invariant over frames by construction, matching the
    order-tolerant global decoding this detector is meant to do.
    """

    def __init__(self, latent_dim: int, cfg: DetectorConfig, n_bits: int = 16):
        super().__init__()
        if n_bits % 4 != 0:
            raise ValueError("n_bits must be divisible by 4")
        self.cfg = cfg
        self.n_symbols = n_bits // 4
        self.in_proj = nn.Linear(latent_dim, cfg.width)
        self.cls = nn.Parameter(torch.randn(self.n_symbols, cfg.width) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.width, nhead=cfg.heads,
            dim_feedforward=cfg.width * cfg.ffn_mult,
            dropout=0.0, batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, num_layers=cfg.layers)
        self.payload_head = nn.Linear(cfg.width, 16)
        self.presence_head = nn.Linear(cfg.width, 1)

    def forward(self, speaker_latents: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, d) -> (w_hat (B, n/4, 16) softmax rows, p_hat (B, T) sigmoid)."""
        B = speaker_latents.shape[0]
        tokens = self.in_proj(speaker_latents)
        cls = self.cls[None].expand(B, -1, -1)
        h = self.blocks(torch.cat([cls, tokens], dim=1))
        w_logits = self.payload_head(h[:, :self.n_symbols])
        p_logits = self.presence_head(h[:, self.n_symbols:]).squeeze(-1)
        return torch.softmax(w_logits, dim=-1), torch.sigmoid(p_logits)


def hard_decision(w_hat: np.ndarray | torch.Tensor) -> np.ndarray:
    """Per-row argmax (lowest index wins ties), then hex -> bits."""
    if isinstance(w_hat, torch.Tensor):
        w_hat = w_hat.detach().numpy()
    symbols = np.argmax(w_hat, axis=-1)  # np.argmax returns the first maximum
    return hex_to_bits(symbols)


def decode_watermark(detector: WatermarkDetector, codec: CodecModel,
                     audio: AudioBuffer | np.ndarray | torch.Tensor,
                     vad_labels: FrameLabels | None = None) -> DetectionResult:
    """Recover the payload distribution and presence track from one clip."""
    from .codec import _as_tensor

    x = _as_tensor(audio)
    if x.numel() == 0:
        raise ValueError("empty audio")
    detector.eval()
    codec.eval()
    with torch.no_grad():
        ls = codec.residual_latents_batch(x[None])
        w_hat, p_hat = detector(ls)
    w_hat = w_hat[0].numpy()
    p_hat = p_hat[0].numpy()
    if vad_labels is None:
        vad_labels = dual_threshold_vad(x.numpy())
    active = vad_labels.labels[:len(p_hat)].astype(bool)
    presence = float(p_hat[active].mean()) if active.any() else 0.0
    return DetectionResult(w_hat=w_hat, p_hat=p_hat,
                           bits=hard_decision(w_hat), presence_score=presence)


def presence_decision(result: DetectionResult, vad_labels: FrameLabels,
                      threshold: float = 0.5) -> bool:
    """Watermark present iff mean presence over speech frames exceeds threshold."""
    active = vad_labels.labels[:len(result.p_hat)].astype(bool)
    if not active.any():
        return False
    return float(result.p_hat[active].mean()) > threshold
