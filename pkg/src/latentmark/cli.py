"""Command-line entry point: training, embedding, detection, attacks,
evaluation and spectrogram export."""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audio import AudioBuffer, load_wav, make_dataset, resample, save_wav
from .checkpoint import load_codec_checkpoint, load_watermark_checkpoint, save_codec_checkpoint
from .config import RunConfig, asdict, load_config
from .payload import WatermarkPayload


def get_version() -> str:
    """Package version plus a git describe suffix when available."""
    try:
        out = subprocess.run(
            ["git", "-C", str(Path(__file__).resolve().parent), "describe",
             "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _stamp(cfg: RunConfig, extra: dict | None = None) -> dict:
    blob = {"version": get_version(), "config": asdict(cfg)}
    if extra:
        blob.update(extra)
    return blob


def _write_sidecar(path: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(_stamp(cfg, extra), indent=2, sort_keys=True) + "\n")


def _load_clip(path: str, cfg: RunConfig) -> AudioBuffer:
    buf = load_wav(path)
    if buf.sample_rate != cfg.codec.sample_rate:
        buf = resample(buf, cfg.codec.sample_rate)
    return buf


def _require_dir(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise SystemExit(f"error: {flag} does not name a directory: {path}")
    return p


def cmd_make_corpus(args, cfg: RunConfig) -> int:
    from .corpus import generate_toy_corpus
    paths = generate_toy_corpus(args.out_dir, num_speakers=args.speakers,
                                utterances_per_speaker=args.utterances, seed=args.seed)
    print(f"wrote {len(paths)} files to {args.out_dir}")
    return 0


def cmd_train_codec(args, cfg: RunConfig) -> int:
    from .codec import train_codec
    _require_dir(args.data, "--data")
    if args.epochs is not None:
        cfg.codec_train.epochs = args.epochs
    cfg.codec_train.seed = args.seed
    train_ds = make_dataset(args.data, cfg.data.clip_seconds, cfg.data.split_ratio,
                            cfg.data.seed, split="train", sample_rate=cfg.codec.sample_rate)
    val_ds = make_dataset(args.data, cfg.data.clip_seconds, cfg.data.split_ratio,
                          cfg.data.seed, split="val", sample_rate=cfg.codec.sample_rate)
    out = Path(args.out)
    log_path = out.with_suffix(".log.jsonl")
    model, summary = train_codec(train_ds, cfg, val_dataset=val_ds, log_path=log_path)
    save_codec_checkpoint(model, out, meta=_stamp(cfg, {"summary": summary}))
    print(f"codec checkpoint written to {out}")
    return 0


def cmd_train_wm(args, cfg: RunConfig) -> int:
    from .training import train_watermark
    _require_dir(args.data, "--data")
    codec, _ = load_codec_checkpoint(args.codec)
    cfg.codec = codec.cfg
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.train.seed = args.seed
    cfg.train.disable_vad_loss = args.no_vad_loss
    cfg.train.disable_augmentation = args.no_augment
    train_ds = make_dataset(args.data, cfg.data.clip_seconds, cfg.data.split_ratio,
                            cfg.data.seed, split="train", sample_rate=cfg.codec.sample_rate)
    val_ds = make_dataset(args.data, cfg.data.clip_seconds, cfg.data.split_ratio,
                          cfg.data.seed, split="val", sample_rate=cfg.codec.sample_rate)
    out = Path(args.out)
    _, summary = train_watermark(codec, train_ds, cfg, val_dataset=val_ds,
                                 out_path=out, log_path=out.with_suffix(".log.jsonl"),
                                 init_path=args.init)
    _write_sidecar(out, cfg, {"summary": {k: v for k, v in summary.items()
                                          if isinstance(v, (int, float))}})
    print(f"watermark checkpoint written to {out}")
    return 0


def _load_system(args, cfg: RunConfig):
    codec, _ = load_codec_checkpoint(args.codec)
    system, meta = load_watermark_checkpoint(args.wm, codec)
    system.config.surrogate = cfg.surrogate
    system.config.eval = cfg.eval
    return system, meta


def cmd_embed(args, cfg: RunConfig) -> int:
    from .embedder import watermark_audio
    system, _ = _load_system(args, cfg)
    payload = WatermarkPayload.from_hex_str(args.payload)
    if payload.n_bits != system.config.payload.bits:
        raise SystemExit(f"error: payload {args.payload!r} has {payload.n_bits} bits, "
                         f"model expects {system.config.payload.bits}")
    clip = _load_clip(args.input, system.config)
    out = watermark_audio(system.codec, system.embedder, system.payload_embedding,
                          clip, payload)
    save_wav(out, args.output)
    _write_sidecar(Path(args.output), system.config,
                   {"payload_hex": payload.hex_str(), "input": args.input,
                    "num_samples": len(out.samples)})
    print(f"embedded {payload.hex_str()} into {args.output}")
    return 0


def cmd_detect(args, cfg: RunConfig) -> int:
    from .detector import decode_watermark, presence_decision
    from .augment import dual_threshold_vad
    system, _ = _load_system(args, cfg)
    clip = _load_clip(args.input, system.config)
    result = decode_watermark(system.detector, system.codec, clip)
    vad = dual_threshold_vad(clip, system.config.vad)
    record = {
        "payload_hex": result.hex_str(),
        "bits": "".join(str(int(b)) for b in result.bits),
        "presence": bool(presence_decision(result, vad, args.threshold)),
        "presence_score": round(result.presence_score, 6),
        "per_symbol_conf": [round(float(c), 6) for c in result.per_symbol_confidence()],
        "num_frames": int(len(result.p_hat)),
        "version": get_version(),
    }
    text = json.dumps(record, indent=2, sort_keys=True)
    print(text)
    if args.json:
        Path(args.json).write_text(text + "\n")
    return 0


def cmd_attack(args, cfg: RunConfig) -> int:
    from .checkpoint import WatermarkSystem
    from .metrics import apply_attack
    codec, _ = load_codec_checkpoint(args.codec)
    if args.mode == "vc" and not args.donor:
        raise SystemExit("error: --mode vc requires --donor")
    clip = _load_clip(args.input, cfg)
    x = clip.samples[:len(clip.samples) // codec.cfg.hop * codec.cfg.hop]
    reference = x
    if args.reference:
        ref = _load_clip(args.reference, cfg)
        reference = ref.samples
    donor = _load_clip(args.donor, cfg).samples if args.donor else None
    system = WatermarkSystem(codec, None, None, None, cfg)  # attacks only need the codec
    rng = np.random.default_rng(args.seed)
    out = apply_attack(args.mode, x, reference, system, rng, donor=donor,
                       white_snr_db=cfg.eval.white_snr_db, surrogate_cfg=cfg.surrogate)
    save_wav(AudioBuffer(out, cfg.codec.sample_rate), args.output)
    _write_sidecar(Path(args.output), cfg,
                   {"mode": args.mode, "seed": args.seed, "input": args.input,
                    "donor": args.donor, "num_samples": int(len(out))})
    print(f"attack {args.mode} written to {args.output}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .metrics import run_eval
    _require_dir(args.data, "--data")
    system, _ = _load_system(args, cfg)
    dataset = make_dataset(args.data, cfg.data.clip_seconds, cfg.data.split_ratio,
                           cfg.data.seed, split="val",
                           sample_rate=system.codec.cfg.sample_rate)
    attacks = tuple(args.attacks.split(",")) if args.attacks else cfg.eval.attacks
    if args.num_clips is not None:
        cfg.eval.num_clips = args.num_clips
    report = run_eval(system, dataset, attacks=attacks, seed=args.seed,
                      eval_cfg=cfg.eval, surrogate_cfg=cfg.surrogate, progress=True)
    report.config["version"] = get_version()
    report.config["run_config"] = asdict(cfg)
    print(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    violations = report.check_thresholds(cfg.eval.thresholds)
    for v in violations:
        print(f"THRESHOLD VIOLATION: {v}", file=sys.stderr)
    return 1 if violations else 0


def spectrogram_band(system, clip: AudioBuffer) -> np.ndarray:
    """Per-frame watermark probabilities for the top color band."""
    from .detector import decode_watermark
    result = decode_watermark(system.detector, system.codec, clip)
    return result.p_hat


def cmd_spectrogram(args, cfg: RunConfig) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import torch
    from .dsp import log_mel_spectrogram

    system, _ = _load_system(args, cfg)
    clip = _load_clip(args.input, system.config)
    band = spectrogram_band(system, clip)
    mel = log_mel_spectrogram(torch.from_numpy(clip.samples), clip.sample_rate,
                              512, 160, n_mels=80).numpy()
    fig, (ax_band, ax_mel) = plt.subplots(
        2, 1, figsize=(10.0, 4.0), dpi=100,
        gridspec_kw={"height_ratios": [1, 7]}, constrained_layout=True)
    ax_band.imshow(band[None, :], aspect="auto", cmap="coolwarm", vmin=0.0, vmax=1.0)
    ax_band.set_yticks([])
    ax_band.set_xticks([])
    ax_band.set_title("watermark probability", fontsize=8)
    ax_mel.imshow(mel, aspect="auto", origin="lower", cmap="magma")
    ax_mel.set_xlabel("frame")
    ax_mel.set_ylabel("mel bin")
    fig.savefig(args.output)
    plt.close(fig)
    _write_sidecar(Path(args.output), system.config,
                   {"num_frames": int(len(band)),
                    "band": [round(float(p), 6) for p in band]})
    print(f"spectrogram written to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentmark",
        description="Speaker-latent audio watermarking: train, embed, detect, attack, evaluate.")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--profile", default="default", choices=["default", "toy"],
                        help="base config profile")
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate the synthetic toy corpus")
    p.add_argument("out_dir")
    p.add_argument("--speakers", type=int, default=36)
    p.add_argument("--utterances", type=int, default=24)
    p.set_defaults(func=cmd_make_corpus)

    p = sub.add_parser("train-codec", help="stage 1: train the RVQ codec")
    p.add_argument("--data", required=True, help="WAV corpus directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train-wm", help="stage 2: train embedder + detector")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--init", help="resume from this stage-2 checkpoint")
    p.add_argument("--no-vad-loss", action="store_true", help="ablation: drop the presence loss")
    p.add_argument("--no-augment", action="store_true", help="ablation: train on clean audio")
    p.set_defaults(func=cmd_train_wm)

    p = sub.add_parser("embed", help="embed a payload into a clip")
    p.add_argument("input")
    p.add_argument("payload", help="hex string, e.g. a1f0")
    p.add_argument("output")
    p.add_argument("--codec", required=True)
    p.add_argument("--wm", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("detect", help="decode payload + presence from a clip")
    p.add_argument("input")
    p.add_argument("--codec", required=True)
    p.add_argument("--wm", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--json", help="also write the JSON record here")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("attack", help="apply a distortion or the cloning surrogate")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--mode", required=True,
                   choices=["identity", "mask", "shuffle", "replace", "codec_roundtrip",
                            "resample", "amplitude", "filter", "white", "vc",
                            "augment_pipeline"])
    p.add_argument("--codec", required=True)
    p.add_argument("--donor", help="donor clip for --mode vc")
    p.add_argument("--reference", help="original clip for --mode replace/augment_pipeline")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="attack-matrix evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--wm", required=True)
    p.add_argument("--attacks", help="comma-separated subset of attack names")
    p.add_argument("--num-clips", type=int)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("spectrogram", help="mel spectrogram with watermark probability band")
    p.add_argument("input")
    p.add_argument("output", help="PNG path")
    p.add_argument("--codec", required=True)
    p.add_argument("--wm", required=True)
    p.set_defaults(func=cmd_spectrogram)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, profile=args.profile)
    cfg.seed = args.seed
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
