"""Latent-swap cloning surrogate: donor content latents + prompt speaker
latents, stretched to the donor's timeline and lightly noised. Stands in for
full zero-shot voice cloning systems when probing watermark survival."""

from __future__ import annotations

import numpy as np
import torch

from .audio import AudioBuffer
from .augment import dual_threshold_vad
from .codec import CodecModel, encode, quantize, speaker_latents
from .config import SurrogateConfig


def stretch_speaker_latents(ls: torch.Tensor, target_len: int,
                            mode: str = "nearest",
                            rng: np.random.Generator | None = None,
                            speech_mask: np.ndarray | None = None) -> torch.Tensor:
    """Map (t_p, d) prompt latents onto t_c output frames.

    nearest: output frame j copies input frame round(j * t_p / t_c).
    random_resample: output frames are i.i.d. uniform draws from the
    speech-active prompt frames (all frames if no speech mask is given).
    """
    t_p = ls.shape[0]
    if t_p < 1:
        raise ValueError("empty speaker latents")
    if target_len < 1:
        raise ValueError("target length must be positive")
    if mode == "nearest":
        idx = np.clip(np.round(np.arange(target_len) * (t_p / target_len)).astype(np.int64),
                      0, t_p - 1)
    elif mode == "random_resample":
        if rng is None:
            raise ValueError("random_resample mode needs an rng")
        pool = np.arange(t_p)
        if speech_mask is not None:
            active = np.nonzero(speech_mask[:t_p])[0]
            if len(active):
                pool = active
        idx = rng.choice(pool, size=target_len, replace=True)
    else:
        raise ValueError(f"unknown stretch mode: {mode!r}")
    return ls[torch.from_numpy(np.ascontiguousarray(idx))]


def clone(codec: CodecModel, prompt_audio: AudioBuffer, donor_audio: AudioBuffer,
          config: SurrogateConfig | None = None,
          rng: np.random.Generator | None = None) -> AudioBuffer:
    """Synthesize donor content in the prompt speaker's latents.

    z1 comes from the donor (bit-exact content provenance); speaker latents
    are stretched copies of prompt frames plus Gaussian noise at
    config.speaker_noise_std times their RMS. Output length follows the donor.
    """
    config = config or SurrogateConfig()
    if config.speaker_noise_std < 0:
        raise ValueError("speaker_noise_std must be >= 0")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    donor_q = quantize(codec, encode(codec, donor_audio))
    z1 = donor_q.z[0]
    ls = speaker_latents(codec, prompt_audio).values
    speech = dual_threshold_vad(prompt_audio).labels
    stretched = stretch_speaker_latents(ls, z1.shape[0], mode=config.stretch_mode,
                                        rng=rng, speech_mask=speech)
    if config.speaker_noise_std > 0:
        rms = float(stretched.pow(2).mean().sqrt())
        noise = rng.normal(0.0, config.speaker_noise_std * rms, size=tuple(stretched.shape))
        stretched = stretched + torch.from_numpy(noise.astype(np.float32))
    with torch.no_grad():
        out = codec.decode_batch((z1 + stretched)[None])[0]
    return AudioBuffer(out.numpy().astype(np.float32), codec.cfg.sample_rate)
