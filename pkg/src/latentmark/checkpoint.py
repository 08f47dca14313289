"""Versioned checkpoint containers for the codec and the watermark models."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch

from .codec import CodecModel
from .config import (CodecConfig, DetectorConfig, EmbedderConfig, PayloadConfig,
                     RunConfig, asdict)
from .detector import WatermarkDetector
from .embedder import WatermarkEmbedder
from .payload import PayloadEmbedding

FORMAT_VERSION = 1
CODEC_KIND = "codec"
WATERMARK_KIND = "watermark"


def _header(codec_cfg: CodecConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "d": codec_cfg.dim,
        "K": codec_cfg.codebook_size,
        "hop": codec_cfg.hop,
        "sample_rate": codec_cfg.sample_rate,
    }


def _check_header(blob: dict, kind: str, path) -> None:
    header = blob.get("header", {})
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"checkpoint format version mismatch in {path}: "
                         f"found {version}, expected {FORMAT_VERSION}")
    if blob.get("kind") != kind:
        raise ValueError(f"wrong checkpoint kind in {path}: "
                         f"found {blob.get('kind')!r}, expected {kind!r}")


def save_codec_checkpoint(model: CodecModel, path: str | Path, meta: dict | None = None) -> None:
    torch.save({
        "kind": CODEC_KIND,
        "header": _header(model.cfg),
        "config": asdict(model.cfg),
        "state": model.state_dict(),
        "meta": meta or {},
    }, path)


def load_codec_checkpoint(path: str | Path) -> tuple[CodecModel, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    _check_header(blob, CODEC_KIND, path)
    cfg = CodecConfig(**{k: tuple(v) if isinstance(v, list) else v
                         for k, v in blob["config"].items()})
    model = CodecModel(cfg)
    model.load_state_dict(blob["state"])
    model.eval()
    return model, blob.get("meta", {})


@dataclass
class WatermarkSystem:
    """Everything needed to embed and detect: frozen codec + stage-2 models."""

    codec: CodecModel
    embedder: WatermarkEmbedder
    payload_embedding: PayloadEmbedding
    detector: WatermarkDetector
    config: RunConfig

    def eval(self) -> "WatermarkSystem":
        for m in (self.codec, self.embedder, self.payload_embedding, self.detector):
            m.eval()
        return self


def build_watermark_models(cfg: RunConfig) -> tuple[WatermarkEmbedder, PayloadEmbedding, WatermarkDetector]:
    if cfg.payload.embed_dim != cfg.embedder.width:
        raise ValueError(f"payload embed_dim {cfg.payload.embed_dim} must equal "
                         f"embedder width {cfg.embedder.width}")
    embedder = WatermarkEmbedder(cfg.codec.dim, cfg.embedder)
    payload_embedding = PayloadEmbedding(cfg.payload.bits, cfg.payload.embed_dim)
    detector = WatermarkDetector(cfg.codec.dim, cfg.detector, cfg.payload.bits)
    return embedder, payload_embedding, detector


def save_watermark_checkpoint(system: WatermarkSystem, path: str | Path,
                              meta: dict | None = None,
                              optimizer_state: dict | None = None,
                              discriminator_state: dict | None = None) -> None:
    torch.save({
        "kind": WATERMARK_KIND,
        "header": _header(system.codec.cfg),
        "config": asdict(system.config),
        "state": {
            "embedder": system.embedder.state_dict(),
            "payload_embedding": system.payload_embedding.state_dict(),
            "detector": system.detector.state_dict(),
        },
        "optimizer": optimizer_state,
        "discriminator": discriminator_state,
        "meta": meta or {},
    }, path)


def _runconfig_from_dict(tree: dict) -> RunConfig:
    cfg = RunConfig()
    for section_name, section in tree.items():
        current = getattr(cfg, section_name, None)
        if dataclasses.is_dataclass(current) and isinstance(section, dict):
            fields = {f.name for f in dataclasses.fields(current)}
            for key, value in section.items():
                if key not in fields:
                    continue
                if isinstance(value, list):
                    value = tuple(value)
                if dataclasses.is_dataclass(getattr(current, key)) and isinstance(value, dict):
                    sub = getattr(current, key)
                    for k2, v2 in value.items():
                        if hasattr(sub, k2):
                            setattr(sub, k2, tuple(v2) if isinstance(v2, list) else v2)
                else:
                    setattr(current, key, value)
        elif section is not None and current is not None and not dataclasses.is_dataclass(current):
            setattr(cfg, section_name, section)
    return cfg


def load_watermark_checkpoint(path: str | Path, codec: CodecModel) -> tuple[WatermarkSystem, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    _check_header(blob, WATERMARK_KIND, path)
    cfg = _runconfig_from_dict(blob["config"])
    header = blob["header"]
    if header["d"] != codec.cfg.dim or header["hop"] != codec.cfg.hop:
        raise ValueError(f"watermark checkpoint {path} was trained against a different codec "
                         f"(d={header['d']}, hop={header['hop']})")
    embedder, payload_embedding, detector = build_watermark_models(cfg)
    embedder.load_state_dict(blob["state"]["embedder"])
    payload_embedding.load_state_dict(blob["state"]["payload_embedding"])
    detector.load_state_dict(blob["state"]["detector"])
    system = WatermarkSystem(codec, embedder, payload_embedding, detector, cfg).eval()
    return system, blob.get("meta", {})


def load_watermark_optimizer_state(path: str | Path) -> tuple[dict | None, dict | None]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return blob.get("optimizer"), blob.get("discriminator")
