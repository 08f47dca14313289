"""Configuration tree: dataclasses, YAML files, env and CLI overrides.

Every run resolves a single ``RunConfig`` before any model code executes;
the resolved tree is echoed into checkpoints, logs and reports.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

ENV_PREFIX = "LATENTMARK_"


@dataclass
class CodecConfig:
    sample_rate: int = 16000
    hop: int = 320  # 50 Hz frame rate at 16 kHz
    dim: int = 128
    codebook_size: int = 1024
    num_quantizers: int = 8
    base_channels: int = 32
    strides: tuple[int, ...] = (4, 4, 5, 4)
    # content proxy target (frame-aligned mel-cepstra)
    proxy_coeffs: int = 20
    proxy_mels: int = 64
    proxy_window: int = 1024

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop


@dataclass
class PayloadConfig:
    bits: int = 16  # divisible by 4
    embed_dim: int = 256  # must equal embedder width

    @property
    def symbols(self) -> int:
        return self.bits // 4


@dataclass
class EmbedderConfig:
    width: int = 256
    layers: int = 4
    heads: int = 1
    ffn_mult: int = 4
    gamma_init: float = 0.1
    per_layer: bool = False  # slot for a per-RVQ-layer variant; only the summed form is implemented


@dataclass
class DetectorConfig:
    width: int = 512
    layers: int = 8
    heads: int = 1
    ffn_mult: int = 4


@dataclass
class VadConfig:
    floor_percentile: float = 10.0
    low_mult: float = 4.0
    high_mult: float = 16.0
    # absolute caps keep all-speech clips detectable (mean-square energies)
    low_cap: float = 2.5e-3
    high_cap: float = 1e-2
    zcr_mult: float = 2.0


@dataclass
class AugmentConfig:
    mask_enabled: bool = True
    mask_prob: float = 0.2
    shuffle_enabled: bool = True
    shuffle_prob: float = 0.5
    replace_enabled: bool = True
    replace_prob: float = 0.5
    codec_roundtrip_enabled: bool = True
    perturb_enabled: bool = True
    perturb_prob: float = 0.1
    window_ms: float = 50.0
    speed_range: tuple[float, float] = (0.9, 1.1)
    gain_range: tuple[float, float] = (0.5, 1.5)
    lowpass_hz: float = 3500.0
    highpass_hz: float = 300.0


@dataclass
class LossWeights:
    vad: float = 1.0
    cos: float = 2.0
    mel: float = 2.0
    adv: float = 1.0
    dec: float = 1.0


@dataclass
class CodecTrainConfig:
    lr: float = 3e-4
    epochs: int = 10
    batch_size: int = 16
    commitment_weight: float = 0.25
    distill_weight: float = 1.0
    wav_l1_weight: float = 10.0
    mel_weight: float = 0.25
    align_weight: float = 1.0
    ema_decay: float = 0.99
    dead_code_epochs: int = 2
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 25


@dataclass
class TrainConfig:
    lr: float = 5e-5
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 1.0
    adv_warmup_epochs: int = 1
    val_every_epochs: int = 1
    val_clips: int = 32
    log_every: int = 25
    disable_vad_loss: bool = False
    disable_augmentation: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class SurrogateConfig:
    stretch_mode: str = "random_resample"  # or "nearest"
    speaker_noise_std: float = 0.05  # relative to speaker-latent RMS
    seed: int = 0


@dataclass
class DataConfig:
    root: str = ""
    clip_seconds: float = 3.0
    split_ratio: float = 0.8
    seed: int = 0


@dataclass
class EvalConfig:
    attacks: tuple[str, ...] = (
        "identity",
        "mask",
        "shuffle",
        "replace",
        "codec_roundtrip",
        "resample",
        "amplitude",
        "filter",
        "white",
        "vc",
    )
    num_clips: int = 200
    num_random_candidates: int = 99
    white_snr_db: float = 20.0
    seed: int = 0
    # optional CI thresholds, e.g. {"identity": {"acc_min": 0.99}}
    thresholds: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    payload: PayloadConfig = field(default_factory=PayloadConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    vad: VadConfig = field(default_factory=VadConfig)
    codec_train: CodecTrainConfig = field(default_factory=CodecTrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0


def toy_profile() -> RunConfig:
    """Reduced-dimension profile sized for single-core CPU training runs."""
    cfg = RunConfig()
    cfg.codec = CodecConfig(dim=48, codebook_size=128, base_channels=12)
    cfg.payload = PayloadConfig(bits=16, embed_dim=96)
    cfg.embedder = EmbedderConfig(width=96, layers=2, ffn_mult=3)
    cfg.detector = DetectorConfig(width=160, layers=3, ffn_mult=3)
    cfg.codec_train = CodecTrainConfig(lr=3e-4, epochs=8, batch_size=16)
    cfg.train = TrainConfig(lr=2e-4, epochs=12, batch_size=12)
    cfg.data = DataConfig(clip_seconds=2.0)
    return cfg


PROFILES = {"default": RunConfig, "toy": toy_profile}


def asdict(cfg: Any) -> dict:
    return dataclasses.asdict(cfg)


def _coerce(value: str, target: Any) -> Any:
    """Parse a string override to the type of the current value."""
    if isinstance(target, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, (tuple, list)):
        parts = [p for p in value.split(",") if p != ""]
        elem = target[0] if len(target) else ""
        return type(target)(_coerce(p, elem) for p in parts)
    if isinstance(target, dict):
        return yaml.safe_load(value)
    return value


def _apply_tree(cfg: Any, tree: dict, path: str = "") -> None:
    for key, value in tree.items():
        if not hasattr(cfg, key):
            raise KeyError(f"unknown config key: {path}{key}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _apply_tree(current, value, path=f"{path}{key}.")
        elif isinstance(value, str) and not isinstance(current, str):
            setattr(cfg, key, _coerce(value, current))
        elif isinstance(current, tuple) and isinstance(value, list):
            setattr(cfg, key, tuple(value))
        else:
            setattr(cfg, key, value)


def apply_env_overrides(cfg: RunConfig, environ: dict | None = None) -> RunConfig:
    """Apply LATENTMARK_SECTION__KEY=value overrides from the environment."""
    env = os.environ if environ is None else environ
    for name, value in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().split("__")
        node: dict = {}
        leaf = node
        for part in dotted[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[dotted[-1]] = value
        _apply_tree(cfg, node)
    return cfg


def load_config(path: str | Path | None = None,
                profile: str = "default",
                overrides: dict | None = None,
                use_env: bool = True) -> RunConfig:
    """Resolve profile defaults, then config file, then env, then overrides."""
    if profile not in PROFILES:
        raise KeyError(f"unknown profile: {profile!r} (have {sorted(PROFILES)})")
    cfg = PROFILES[profile]()
    if path is not None:
        with open(path) as fh:
            tree = yaml.safe_load(fh) or {}
        if "profile" in tree:
            name = tree.pop("profile")
            if name != profile and profile == "default":
                cfg = PROFILES[name]()
        _apply_tree(cfg, tree)
    if use_env:
        apply_env_overrides(cfg)
    if overrides:
        _apply_tree(cfg, overrides)
    return cfg
