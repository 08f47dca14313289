"""Audio file ingestion, resampling and clip dataset construction.

All downstream code works on mono float32 signals in [-1, 1] at a fixed
working sample rate (16 kHz by default); files are resampled on ingestion.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

WORKING_SAMPLE_RATE = 16000
INT16_FULL_SCALE = 32768.0


@dataclass
class AudioBuffer:
    """Mono PCM signal: float samples in [-1, 1] plus a sample rate."""

    samples: np.ndarray
    sample_rate: int = WORKING_SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def copy(self) -> "AudioBuffer":
        return AudioBuffer(self.samples.copy(), self.sample_rate)


def load_wav(path: str | Path) -> AudioBuffer:
    """Read a 16-bit PCM mono WAV file, normalizing samples by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise ValueError(f"unsupported encoding in {path}: {exc}") from exc
    if channels != 1:
        raise ValueError(f"multi-channel unsupported: {path} has {channels} channels")
    if width != 2:
        raise ValueError(f"unsupported encoding: {path} has {8 * width}-bit samples, expected 16-bit PCM")
    data = np.frombuffer(frames, dtype="<i2").astype(np.float32) / INT16_FULL_SCALE
    return AudioBuffer(data, sample_rate=rate)


def save_wav(buffer: AudioBuffer, path: str | Path) -> None:
    """Write 16-bit PCM mono WAV; values outside [-1, 1] are clipped."""
    clipped = np.clip(buffer.samples, -1.0, 1.0)
    ints = np.clip(np.round(clipped * INT16_FULL_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(buffer.sample_rate)
        wf.writeframes(ints.tobytes())


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited (polyphase) resampling to target_rate."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == buffer.sample_rate:
        return buffer.copy()
    gcd = math.gcd(int(target_rate), int(buffer.sample_rate))
    up, down = target_rate // gcd, buffer.sample_rate // gcd
    out = resample_poly(buffer.samples.astype(np.float64), up, down)
    target_len = int(round(len(buffer.samples) * target_rate / buffer.sample_rate))
    if len(out) > target_len:
        out = out[:target_len]
    elif len(out) < target_len:
        out = np.pad(out, (0, target_len - len(out)))
    return AudioBuffer(out.astype(np.float32), sample_rate=target_rate)


@dataclass
class Clip:
    audio: AudioBuffer
    source: str
    offset: int  # sample offset within the source file


@dataclass
class ClipDataset:
    """Fixed-length clips cut from one split of a WAV directory."""

    clips: list[Clip] = field(default_factory=list)
    clip_length: float = 3.0
    split: str = "train"
    sample_rate: int = WORKING_SAMPLE_RATE

    def __len__(self) -> int:
        return len(self.clips)

    def __getitem__(self, i: int) -> Clip:
        return self.clips[i]

    def as_array(self) -> np.ndarray:
        """Stack all clips into an (N, L) float32 array."""
        return np.stack([c.audio.samples for c in self.clips]).astype(np.float32)


def _split_files(files: list[Path], split_ratio: float, seed: int) -> tuple[list[Path], list[Path]]:
    order = np.random.default_rng(seed).permutation(len(files))
    n_train = int(round(len(files) * split_ratio))
    train = [files[i] for i in sorted(order[:n_train])]
    val = [files[i] for i in sorted(order[n_train:])]
    return train, val


def make_dataset(root_dir: str | Path,
                 clip_length: float = 3.0,
                 split_ratio: float = 0.8,
                 seed: int = 0,
                 split: str = "train",
                 sample_rate: int = WORKING_SAMPLE_RATE) -> ClipDataset:
    """Scan root_dir recursively for *.wav, split by file, cut fixed clips.

    The file-level split is a pure function of the sorted directory listing
    and the seed, so train and held-out sets stay disjoint across calls.
    Clips are cut with hop == clip length; a short tail (or short file) is
    zero-padded to the full clip length.
    """
    if split not in ("train", "val", "test"):
        raise ValueError(f"split must be train/val/test, got {split!r}")
    root = Path(root_dir)
    files = sorted(root.rglob("*.wav"))
    if not files:
        raise FileNotFoundError(f"no WAV files under {root}")
    train_files, val_files = _split_files(files, split_ratio, seed)
    chosen = train_files if split == "train" else val_files

    clip_samples = int(round(clip_length * sample_rate))
    clips: list[Clip] = []
    for path in chosen:
        buf = load_wav(path)
        if buf.sample_rate != sample_rate:
            buf = resample(buf, sample_rate)
        x = buf.samples
        n_full = len(x) // clip_samples
        for k in range(n_full):
            seg = x[k * clip_samples:(k + 1) * clip_samples]
            clips.append(Clip(AudioBuffer(seg, sample_rate), str(path), k * clip_samples))
        tail = len(x) - n_full * clip_samples
        if tail > 0 or n_full == 0:
            seg = x[n_full * clip_samples:]
            seg = np.pad(seg, (0, clip_samples - len(seg)))
            clips.append(Clip(AudioBuffer(seg, sample_rate), str(path), n_full * clip_samples))
    return ClipDataset(clips=clips, clip_length=clip_length, split=split, sample_rate=sample_rate)
