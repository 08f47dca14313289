"""Synthetic multi-speaker speech-like corpus generator.

Utterances are syllable sequences: voiced vowel segments (glottal sawtooth
source shaped by per-speaker formant resonators), optional fricative noise
bursts, and pauses. Content (the vowel sequence) varies per utterance while
f0 range, formant scaling and tilt are speaker traits, giving the codec a
real content/speaker split to learn.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import iirpeak, lfilter

from .audio import AudioBuffer, save_wav

VOWEL_FORMANTS = {
    "a": (800.0, 1200.0, 2500.0),
    "e": (500.0, 1900.0, 2600.0),
    "i": (300.0, 2300.0, 3000.0),
    "o": (480.0, 900.0, 2400.0),
    "u": (320.0, 780.0, 2250.0),
}


@dataclass
class SpeakerTraits:
    f0: float
    formant_scale: float
    tilt_cut: float
    breath: float
    fric_cut: float


def _speaker(rng: np.random.Generator) -> SpeakerTraits:
    return SpeakerTraits(
        f0=float(rng.uniform(85.0, 280.0)),
        formant_scale=float(rng.uniform(0.82, 1.28)),
        tilt_cut=float(rng.uniform(900.0, 2600.0)),
        breath=float(rng.uniform(0.01, 0.06)),
        fric_cut=float(rng.uniform(1800.0, 3200.0)),
    )


def _edge_envelope(n: int, sr: int, edge_ms: float = 12.0) -> np.ndarray:
    edge = min(int(sr * edge_ms / 1000.0), max(n // 4, 1))
    env = np.ones(n)
    ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, edge))
    env[:edge] = ramp
    env[-edge:] = ramp[::-1]
    return env


def _voiced_segment(dur: float, spk: SpeakerTraits, vowel: str, sr: int,
                    rng: np.random.Generator) -> np.ndarray:
    n = int(dur * sr)
    t = np.arange(n) / sr
    contour = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.4, 1.6) * t + rng.uniform(0, 6.28))
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * 5.5 * t)
    f0 = spk.f0 * rng.uniform(0.92, 1.08) * contour * vibrato
    phase = np.cumsum(f0) / sr
    source = 2.0 * (phase % 1.0) - 1.0
    source += spk.breath * rng.standard_normal(n)
    # spectral tilt: one-pole lowpass
    alpha = np.exp(-2 * np.pi * spk.tilt_cut / sr)
    source = lfilter([1 - alpha], [1, -alpha], source)
    out = np.zeros(n)
    for idx, f in enumerate(VOWEL_FORMANTS[vowel]):
        fc = min(f * spk.formant_scale, sr / 2 * 0.95)
        b, a = iirpeak(fc / (sr / 2), Q=fc / rng.uniform(80.0, 140.0))
        out += lfilter(b, a, source) * (1.0, 0.63, 0.35)[idx]
    out *= _edge_envelope(n, sr)
    rms = np.sqrt(np.mean(out ** 2)) + 1e-9
    return out / rms * rng.uniform(0.12, 0.22)


def _fricative_segment(dur: float, spk: SpeakerTraits, sr: int,
                       rng: np.random.Generator) -> np.ndarray:
    n = int(dur * sr)
    noise = rng.standard_normal(n)
    alpha = np.exp(-2 * np.pi * spk.fric_cut / sr)
    hp = noise - lfilter([1 - alpha], [1, -alpha], noise)
    hp *= _edge_envelope(n, sr)
    rms = np.sqrt(np.mean(hp ** 2)) + 1e-9
    return hp / rms * rng.uniform(0.03, 0.08)


def synth_utterance(spk: SpeakerTraits, duration: float, sr: int,
                    rng: np.random.Generator) -> np.ndarray:
    total = int(duration * sr)
    pieces = [np.zeros(int(rng.uniform(0.12, 0.3) * sr))]
    filled = len(pieces[0])
    vowels = list(VOWEL_FORMANTS)
    while filled < total:
        seg = _voiced_segment(rng.uniform(0.14, 0.32), spk, vowels[rng.integers(len(vowels))],
                              sr, rng)
        pieces.append(seg)
        filled += len(seg)
        if rng.random() < 0.3:
            fric = _fricative_segment(rng.uniform(0.05, 0.12), spk, sr, rng)
            pieces.append(fric)
            filled += len(fric)
        if rng.random() < 0.6:
            pause = np.zeros(int(rng.uniform(0.06, 0.28) * sr))
            pieces.append(pause)
            filled += len(pause)
    x = np.concatenate(pieces)[:total]
    peak = np.abs(x).max() + 1e-9
    if peak > 0.95:
        x = x / peak * 0.95
    return x.astype(np.float32)


def generate_toy_corpus(out_dir: str | Path, num_speakers: int = 36,
                        utterances_per_speaker: int = 24, seed: int = 0,
                        sample_rate: int = 16000,
                        duration_range: tuple[float, float] = (1.8, 3.2)) -> list[Path]:
    """Write a deterministic WAV corpus; returns the created file paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in range(num_speakers):
        spk_rng = np.random.default_rng([seed, s])
        spk = _speaker(spk_rng)
        for u in range(utterances_per_speaker):
            utt_rng = np.random.default_rng([seed, s, u])
            dur = float(utt_rng.uniform(*duration_range))
            x = synth_utterance(spk, dur, sample_rate, utt_rng)
            path = out / f"spk{s:02d}_utt{u:03d}.wav"
            save_wav(AudioBuffer(x, sample_rate), path)
            paths.append(path)
    return paths
