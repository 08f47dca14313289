"""Cloning-style distortion pipeline with per-frame label bookkeeping,
plus the dual-threshold voice activity detector feeding the presence loss.

Label convention: 1 marks a codec frame that still contains both speech and
a watermark; masked, replaced, padded or silent frames are 0. Labels are
threaded through every transform at sample resolution and reduced to frames
(a frame is 1 only if every sample in it is 1) so the soundness invariant
holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch
from scipy.signal import resample_poly

from .audio import AudioBuffer
from .config import AugmentConfig, VadConfig
from .dsp import butter_filter

HOP = 320  # codec frame length in samples at 16 kHz


@dataclass
class FrameLabels:
    """{0,1} per codec frame; 1 = speech plus watermark survive in the frame."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.uint8)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class AugmentedSample:
    audio: AudioBuffer
    labels: FrameLabels
    applied: list = field(default_factory=list)
    provenance: np.ndarray | None = None  # per-sample source index, -1 = destroyed


# ---------------------------------------------------------------- VAD


def _frame_view(x: np.ndarray, hop: int = HOP) -> np.ndarray:
    t = len(x) // hop
    return x[:t * hop].reshape(t, hop)


def _dilate(mask: np.ndarray, cond: np.ndarray) -> np.ndarray:
    grown = mask.copy()
    while True:
        neighbor = np.zeros_like(grown)
        neighbor[1:] |= grown[:-1]
        neighbor[:-1] |= grown[1:]
        new = neighbor & ~grown & cond
        if not new.any():
            return grown
        grown |= new


def dual_threshold_vad(audio: AudioBuffer | np.ndarray, cfg: VadConfig | None = None,
                       hop: int = HOP) -> FrameLabels:
    """Short-time-energy dual-threshold speech detection at the codec frame rate.

    Frames above the high threshold seed speech regions; regions grow through
    adjacent frames above the low threshold, with a zero-crossing-rate rescue
    for unvoiced boundaries. Thresholds derive from the clip's noise floor
    (10th percentile of frame energies) with absolute caps so that all-speech
    clips are still detected.
    """
    cfg = cfg or VadConfig()
    x = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio, dtype=np.float32)
    frames = _frame_view(x, hop)
    if frames.shape[0] == 0:
        return FrameLabels(np.zeros(0, dtype=np.uint8))
    energy = (frames ** 2).mean(axis=1)
    signs = np.signbit(frames)
    zcr = np.abs(np.diff(signs.astype(np.int8), axis=1)).mean(axis=1)

    floor = max(float(np.percentile(energy, cfg.floor_percentile)), 1e-8)
    low = min(floor * cfg.low_mult, cfg.low_cap)
    high = max(min(floor * cfg.high_mult, cfg.high_cap), low)

    speech = energy > high
    speech = _dilate(speech, energy > low)
    quiet = ~speech
    if quiet.any():
        zcr_thresh = cfg.zcr_mult * max(float(np.median(zcr[quiet])), 1e-3)
        rescue = (zcr > zcr_thresh) & (energy > floor * 2.0)
        speech = _dilate(speech, rescue)
    return FrameLabels(speech.astype(np.uint8))


def frame_labels_from_samples(sample_labels: np.ndarray | torch.Tensor,
                              hop: int = HOP) -> np.ndarray:
    """A frame is labeled 1 only if every one of its samples is labeled 1."""
    if isinstance(sample_labels, torch.Tensor):
        sample_labels = sample_labels.numpy()
    frames = _frame_view(np.asarray(sample_labels), hop)
    if frames.shape[0] == 0:
        return np.zeros(0, dtype=np.uint8)
    return frames.min(axis=1).astype(np.uint8)


def upsample_frame_labels(labels: np.ndarray, total_len: int, hop: int = HOP) -> np.ndarray:
    out = np.zeros(total_len, dtype=np.uint8)
    reach = min(len(labels) * hop, total_len)
    out[:reach] = np.repeat(np.asarray(labels, dtype=np.uint8), hop)[:reach]
    return out


# ------------------------------------------------- tensor-level transforms
#
# Each core op takes (audio, sample_labels, provenance) torch tensors and
# returns new ones plus a record dict. Gradients flow through masking,
# shuffling, replacement and gain; codec round-trip, filtering and
# resampling use a straight-through identity; speed changes length and
# detaches.


def _windows(length: int, window: int) -> list[tuple[int, int]]:
    bounds = list(range(0, length, window)) + [length]
    return [(bounds[i], bounds[i + 1]) for i in range(len(bounds) - 1)]


def _core_mask(x, slab, prov, p, window, rng):
    spans = _windows(x.shape[0], window)
    fired = rng.random(len(spans)) < p
    keep = torch.ones_like(x)
    for (a, b), hit in zip(spans, fired):
        if hit:
            keep[a:b] = 0.0
            slab[a:b] = 0
            if prov is not None:
                prov[a:b] = -1
    record = {"op": "mask", "p": p, "window": window,
              "masked": [i for i, h in enumerate(fired) if h]}
    return x * keep, slab, prov, record


def _core_shuffle(x, slab, prov, p, window, rng):
    fired = bool(rng.random() < p)
    record = {"op": "shuffle", "p": p, "window": window, "fired": fired}
    if not fired:
        return x, slab, prov, record
    spans = _windows(x.shape[0], window)
    perm = rng.permutation(len(spans))
    x = torch.cat([x[spans[i][0]:spans[i][1]] for i in perm])
    slab = torch.cat([slab[spans[i][0]:spans[i][1]] for i in perm])
    if prov is not None:
        prov = torch.cat([prov[spans[i][0]:spans[i][1]] for i in perm])
    record["permutation"] = perm.tolist()
    return x, slab, prov, record


def _core_replace(x, original, slab, prov, p, window, rng):
    if original.shape[0] < x.shape[0]:
        raise ValueError(f"original ({original.shape[0]}) shorter than watermarked ({x.shape[0]})")
    original = original[:x.shape[0]]
    spans = _windows(x.shape[0], window)
    fired = rng.random(len(spans)) < p
    mix = torch.zeros_like(x)
    for (a, b), hit in zip(spans, fired):
        if hit:
            mix[a:b] = 1.0
            slab[a:b] = 0
            if prov is not None:
                prov[a:b] = -1
    record = {"op": "replace", "p": p, "window": window,
              "replaced": [i for i, h in enumerate(fired) if h]}
    return x * (1.0 - mix) + original * mix, slab, prov, record


def _core_codec_roundtrip(x, slab, prov, codec):
    t = x.shape[0] // codec.hop
    if t < 1:
        raise ValueError("audio too short for codec round-trip")
    x = x[:t * codec.hop]
    slab = slab[:t * codec.hop]
    if prov is not None:
        prov = prov[:t * codec.hop]
    with torch.no_grad():
        y = codec.roundtrip_batch(x[None].detach())[0]
    out = x + (y - x).detach()  # straight-through
    return out, slab, prov, {"op": "codec_roundtrip", "frames": t}


def _nearest_indices(new_len: int, old_len: int) -> np.ndarray:
    idx = np.round(np.arange(new_len) * (old_len / new_len)).astype(np.int64)
    return np.clip(idx, 0, old_len - 1)


def _core_speed(x, slab, prov, factor, sample_rate, vad_cfg):
    frac = Fraction(factor).limit_denominator(40)
    up, down = frac.denominator, frac.numerator
    y = resample_poly(x.detach().numpy().astype(np.float64), up, down).astype(np.float32)
    y_t = torch.from_numpy(y)  # length changed: embedder gradient is cut here
    src = _nearest_indices(len(y), x.shape[0])
    wm_mask = slab.numpy()[src]
    speech = upsample_frame_labels(dual_threshold_vad(y, vad_cfg).labels, len(y))
    slab = torch.from_numpy((wm_mask * speech).astype(np.float32))
    if prov is not None:
        prov = prov[torch.from_numpy(src)]
    return y_t, slab, prov, {"op": "speed", "factor": float(frac), "up": up, "down": down}


def _core_gain(x, slab, prov, gain):
    return (x * gain).clamp(-1.0, 1.0), slab, prov, {"op": "gain", "gain": gain}


def _core_filter(x, slab, prov, kind, cutoff, sample_rate):
    y = butter_filter(x.detach().numpy(), sample_rate, cutoff, kind)
    out = x + (torch.from_numpy(y) - x).detach()
    return out, slab, prov, {"op": "filter", "kind": kind, "cutoff": cutoff}


def _core_resample_chain(x, slab, prov, sample_rate):
    half = sample_rate // 2
    xn = x.detach().numpy().astype(np.float64)
    y = resample_poly(resample_poly(xn, 1, 2), 2, 1).astype(np.float32)
    if len(y) >= x.shape[0]:
        y = y[:x.shape[0]]
    else:
        y = np.pad(y, (0, x.shape[0] - len(y)))
    out = x + (torch.from_numpy(y) - x).detach()
    return out, slab, prov, {"op": "resample", "via_hz": half}


def _core_perturb(x, slab, prov, cfg: AugmentConfig, rng, sample_rate, vad_cfg):
    records = []
    if rng.random() < cfg.perturb_prob:
        factor = float(rng.uniform(*cfg.speed_range))
        x, slab, prov, rec = _core_speed(x, slab, prov, factor, sample_rate, vad_cfg)
        records.append(rec)
    if rng.random() < cfg.perturb_prob:
        gain = float(rng.uniform(*cfg.gain_range))
        x, slab, prov, rec = _core_gain(x, slab, prov, gain)
        records.append(rec)
    if rng.random() < cfg.perturb_prob:
        if rng.random() < 0.5:
            kind, cutoff = "lowpass", cfg.lowpass_hz
        else:
            kind, cutoff = "highpass", cfg.highpass_hz
        x, slab, prov, rec = _core_filter(x, slab, prov, kind, cutoff, sample_rate)
        records.append(rec)
    if rng.random() < cfg.perturb_prob:
        x, slab, prov, rec = _core_resample_chain(x, slab, prov, sample_rate)
        records.append(rec)
    return x, slab, prov, {"op": "perturb", "applied": records}


def augment_core(x: torch.Tensor, original: torch.Tensor | None,
                 sample_labels: torch.Tensor, cfg: AugmentConfig,
                 rng: np.random.Generator, sample_rate: int = 16000,
                 vad_cfg: VadConfig | None = None, codec=None,
                 with_provenance: bool = False):
    """Run the fixed pipeline mask -> shuffle -> replace -> codec -> perturb."""
    vad_cfg = vad_cfg or VadConfig()
    window = int(round(cfg.window_ms / 1000.0 * sample_rate))
    slab = sample_labels.float().clone()
    prov = torch.arange(x.shape[0], dtype=torch.int64) if with_provenance else None
    records = []
    if cfg.mask_enabled:
        x, slab, prov, rec = _core_mask(x, slab, prov, cfg.mask_prob, window, rng)
        records.append(rec)
    if cfg.shuffle_enabled:
        x, slab, prov, rec = _core_shuffle(x, slab, prov, cfg.shuffle_prob, window, rng)
        records.append(rec)
    if cfg.replace_enabled:
        if original is None:
            raise ValueError("replace augmentation requires the original audio")
        x, slab, prov, rec = _core_replace(x, original, slab, prov, cfg.replace_prob, window, rng)
        records.append(rec)
    if cfg.codec_roundtrip_enabled:
        if codec is None:
            raise ValueError("codec round-trip augmentation requires a codec model")
        x, slab, prov, rec = _core_codec_roundtrip(x, slab, prov, codec)
        records.append(rec)
    if cfg.perturb_enabled:
        x, slab, prov, rec = _core_perturb(x, slab, prov, cfg, rng, sample_rate, vad_cfg)
        records.append(rec)
    return x, slab, prov, records


# ------------------------------------------------------ sample-level API


def _sample_state(sample: AugmentedSample) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(sample.audio.samples.copy())
    slab = torch.from_numpy(
        upsample_frame_labels(sample.labels.labels, len(sample.audio.samples)).astype(np.float32))
    return x, slab


def _finish(sample: AugmentedSample, x: torch.Tensor, slab: torch.Tensor,
            record: dict) -> AugmentedSample:
    audio = AudioBuffer(x.detach().numpy().astype(np.float32), sample.audio.sample_rate)
    labels = FrameLabels(frame_labels_from_samples(slab.numpy()))
    return AugmentedSample(audio, labels, applied=sample.applied + [record])


def mask_frames(sample: AugmentedSample, p: float = 0.2,
                rng: np.random.Generator | None = None,
                window_ms: float = 50.0) -> AugmentedSample:
    """Zero 50 ms windows independently with probability p; their labels drop to 0."""
    rng = rng or np.random.default_rng()
    x, slab = _sample_state(sample)
    window = int(round(window_ms / 1000.0 * sample.audio.sample_rate))
    x, slab, _, rec = _core_mask(x, slab, None, p, window, rng)
    return _finish(sample, x, slab, rec)


def shuffle_windows(sample: AugmentedSample, p: float = 0.5,
                    window_ms: float = 50.0,
                    rng: np.random.Generator | None = None) -> AugmentedSample:
    """With per-clip probability p, permute 50 ms windows; labels travel along."""
    rng = rng or np.random.default_rng()
    x, slab = _sample_state(sample)
    window = int(round(window_ms / 1000.0 * sample.audio.sample_rate))
    x, slab, _, rec = _core_shuffle(x, slab, None, p, window, rng)
    return _finish(sample, x, slab, rec)


def replace_segments(watermarked_sample: AugmentedSample, original_audio: AudioBuffer,
                     p: float = 0.5, segment_ms: float = 50.0,
                     rng: np.random.Generator | None = None) -> AugmentedSample:
    """Splice original-audio segments over the watermarked clip; labels drop to 0."""
    rng = rng or np.random.default_rng()
    if len(original_audio.samples) < len(watermarked_sample.audio.samples):
        raise ValueError("original audio shorter than watermarked audio")
    x, slab = _sample_state(watermarked_sample)
    orig = torch.from_numpy(original_audio.samples.copy())
    window = int(round(segment_ms / 1000.0 * watermarked_sample.audio.sample_rate))
    x, slab, _, rec = _core_replace(x, orig, slab, None, p, window, rng)
    return _finish(watermarked_sample, x, slab, rec)


def codec_roundtrip(sample: AugmentedSample, codec) -> AugmentedSample:
    """Neural re-encoding distortion; labels pass through unchanged."""
    x, slab = _sample_state(sample)
    x, slab, _, rec = _core_codec_roundtrip(x, slab, None, codec)
    return _finish(sample, x, slab, rec)


def perturb(sample: AugmentedSample, p: float = 0.1,
            rng: np.random.Generator | None = None,
            cfg: AugmentConfig | None = None,
            vad_cfg: VadConfig | None = None) -> AugmentedSample:
    """Speed, gain, filter and resample perturbations, each firing with probability p."""
    import dataclasses

    rng = rng or np.random.default_rng()
    cfg = dataclasses.replace(cfg or AugmentConfig(), perturb_prob=p)
    x, slab = _sample_state(sample)
    x, slab, _, rec = _core_perturb(x, slab, None, cfg, rng,
                                    sample.audio.sample_rate, vad_cfg or VadConfig())
    return _finish(sample, x, slab, rec)


def augment_pipeline(watermarked: AudioBuffer, original: AudioBuffer,
                     vad_labels: FrameLabels, config: AugmentConfig,
                     rng: np.random.Generator, codec=None,
                     vad_cfg: VadConfig | None = None,
                     with_provenance: bool = False) -> AugmentedSample:
    """Full distortion pipeline; initial labels = speech AND watermarked."""
    x = torch.from_numpy(watermarked.samples.copy())
    orig = torch.from_numpy(original.samples.copy())
    slab = torch.from_numpy(
        upsample_frame_labels(vad_labels.labels, len(watermarked.samples)).astype(np.float32))
    x, slab, prov, records = augment_core(
        x, orig, slab, config, rng, watermarked.sample_rate, vad_cfg, codec,
        with_provenance=with_provenance)
    audio = AudioBuffer(x.detach().numpy().astype(np.float32), watermarked.sample_rate)
    labels = FrameLabels(frame_labels_from_samples(slab.numpy()))
    sample = AugmentedSample(audio, labels, applied=records)
    if with_provenance:
        sample.provenance = prov.numpy()
    return sample


def add_white_noise(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive white noise at a target SNR; used by the evaluation harness."""
    power = float(np.mean(x.astype(np.float64) ** 2))
    if power <= 0:
        return x.copy()
    noise_power = power / (10.0 ** (snr_db / 10.0))
    noise = rng.normal(0.0, np.sqrt(noise_power), size=len(x))
    return np.clip(x + noise, -1.0, 1.0).astype(np.float32)
