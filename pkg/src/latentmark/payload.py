"""Watermark payloads: bit/hex conversion and projection into the embedder space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

_NIBBLE_WEIGHTS = np.array([8, 4, 2, 1], dtype=np.int64)  # MSB-first


def bits_to_hex(bits: np.ndarray) -> np.ndarray:
    """Pack a {0,1} bit vector (or batch, last axis) into MSB-first nibbles."""
    bits = np.asarray(bits)
    if bits.shape[-1] % 4 != 0:
        raise ValueError(f"bit length must be divisible by 4, got {bits.shape[-1]}")
    if not np.isin(bits, (0, 1)).all():
        raise ValueError("bits must be 0 or 1")
    nibbles = bits.astype(np.int64).reshape(*bits.shape[:-1], -1, 4)
    return nibbles @ _NIBBLE_WEIGHTS


def hex_to_bits(hex_seq: np.ndarray) -> np.ndarray:
    """Inverse of bits_to_hex: expand {0..15} symbols to MSB-first bits."""
    hex_seq = np.asarray(hex_seq)
    if hex_seq.size and (hex_seq.min() < 0 or hex_seq.max() > 15):
        raise ValueError("hex symbols must be in 0..15")
    sym = hex_seq.astype(np.int64)[..., None]
    bits = (sym >> np.array([3, 2, 1, 0])) & 1
    return bits.reshape(*hex_seq.shape[:-1], -1).astype(np.uint8)


@dataclass
class WatermarkPayload:
    """An n-bit payload together with its n/4-symbol hexadecimal form."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1 or self.bits.size % 4 != 0:
            raise ValueError(f"payload must be a 1-D bit vector with length divisible by 4, got shape {self.bits.shape}")
        if self.bits.size and not np.isin(self.bits, (0, 1)).all():
            raise ValueError("payload bits must be 0 or 1")

    @property
    def n_bits(self) -> int:
        return self.bits.size

    @property
    def hex(self) -> np.ndarray:
        return bits_to_hex(self.bits)

    def hex_str(self) -> str:
        return "".join(format(int(s), "x") for s in self.hex)

    @classmethod
    def from_hex(cls, hex_seq: np.ndarray) -> "WatermarkPayload":
        return cls(hex_to_bits(np.asarray(hex_seq)))

    @classmethod
    def from_hex_str(cls, text: str) -> "WatermarkPayload":
        text = text.strip().lower()
        if not text or any(c not in "0123456789abcdef" for c in text):
            raise ValueError(f"payload must be a hex string, got {text!r}")
        return cls.from_hex(np.array([int(c, 16) for c in text]))


def random_payload(n: int = 16, seed: int | None = None,
                   rng: np.random.Generator | None = None) -> WatermarkPayload:
    """Uniform i.i.d. payload bits, deterministic given seed (or explicit rng)."""
    if n % 4 != 0 or n <= 0:
        raise ValueError(f"n must be a positive multiple of 4, got {n}")
    if rng is None:
        rng = np.random.default_rng(seed)
    return WatermarkPayload(rng.integers(0, 2, size=n, dtype=np.uint8))


class PayloadEmbedding(nn.Module):
    """Learned projection of the hex sequence into the embedder latent space.

    w'[i] = table[hex[i]] + positional[i]; trained jointly with the embedder.
    """

    def __init__(self, n_bits: int = 16, embed_dim: int = 256):
        super().__init__()
        if n_bits % 4 != 0:
            raise ValueError("n_bits must be divisible by 4")
        self.n_symbols = n_bits // 4
        self.embed_dim = embed_dim
        self.table = nn.Embedding(16, embed_dim)
        self.positional = nn.Parameter(torch.zeros(self.n_symbols, embed_dim))
        nn.init.normal_(self.positional, std=0.02)

    def forward(self, hex_seq: torch.Tensor) -> torch.Tensor:
        """(..., n/4) int symbols -> (..., n/4, embed_dim)."""
        if hex_seq.shape[-1] != self.n_symbols:
            raise ValueError(f"expected {self.n_symbols} symbols, got {hex_seq.shape[-1]}")
        return self.table(hex_seq) + self.positional


def project_payload(embedding: PayloadEmbedding, hex_seq: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Project one hex sequence; returns (n/4, embed_dim)."""
    if not isinstance(hex_seq, torch.Tensor):
        hex_seq = torch.as_tensor(np.asarray(hex_seq), dtype=torch.long)
    with torch.no_grad():
        return embedding(hex_seq)
