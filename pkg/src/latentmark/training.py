"""Joint training of embedder + detector (+ payload embedding + discriminator)
over a frozen codec, with the five-term loss and the distortion pipeline."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch

from .augment import (augment_core, dual_threshold_vad, frame_labels_from_samples,
                      upsample_frame_labels)
from .checkpoint import (WatermarkSystem, build_watermark_models,
                         load_watermark_optimizer_state, save_watermark_checkpoint)
from .codec import CodecModel
from .config import RunConfig
from .losses import (SpectrogramDiscriminator, discriminator_step, loss_adv,
                     loss_cos, loss_dec, loss_mel, loss_vad, total_loss)
from .metrics import bitwise_acc
from .payload import bits_to_hex, hex_to_bits
from .surrogate import clone
from .audio import AudioBuffer


def _freeze(model: torch.nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()


def _coerce_length(x: torch.Tensor, slab: torch.Tensor, length: int) -> tuple[torch.Tensor, torch.Tensor]:
    if x.shape[0] >= length:
        return x[:length], slab[:length]
    pad = length - x.shape[0]
    return (torch.cat([x, torch.zeros(pad, dtype=x.dtype)]),
            torch.cat([slab, torch.zeros(pad, dtype=slab.dtype)]))


def _augment_batch(x_hat: torch.Tensor, x: torch.Tensor, speech: np.ndarray,
                   cfg: RunConfig, codec: CodecModel, rng_key: list[int]
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample distortion pipeline, re-batched to the training length.

    The pipeline order (mask, shuffle, replace, codec round-trip, perturb) is
    preserved, but the round-trip runs as one batched codec pass since the
    first three ops keep every clip at the training length.
    """
    import dataclasses

    B, L = x_hat.shape
    T = L // codec.hop
    acfg = cfg.train.augment
    pre_cfg = dataclasses.replace(acfg, codec_roundtrip_enabled=False, perturb_enabled=False)
    post_cfg = dataclasses.replace(acfg, mask_enabled=False, shuffle_enabled=False,
                                   replace_enabled=False, codec_roundtrip_enabled=False)
    rngs = [np.random.default_rng(rng_key + [i]) for i in range(B)]

    mids, slabs = [], []
    for i in range(B):
        slab = torch.from_numpy(upsample_frame_labels(speech[i], L).astype(np.float32))
        xi, slab_i, _, _ = augment_core(x_hat[i], x[i], slab, pre_cfg, rngs[i],
                                        cfg.codec.sample_rate, cfg.vad)
        mids.append(xi)
        slabs.append(slab_i)
    mid = torch.stack(mids)
    if acfg.codec_roundtrip_enabled:
        with torch.no_grad():
            rt = codec.roundtrip_batch(mid.detach())
        mid = mid + (rt - mid).detach()  # straight-through

    outs, labels = [], []
    for i in range(B):
        xi, slab_i = mid[i], slabs[i]
        if acfg.perturb_enabled:
            xi, slab_i, _, _ = augment_core(xi, None, slab_i, post_cfg, rngs[i],
                                            cfg.codec.sample_rate, cfg.vad)
        xi, slab_i = _coerce_length(xi, slab_i, L)
        outs.append(xi)
        labels.append(torch.from_numpy(
            frame_labels_from_samples(slab_i.numpy(), codec.hop)[:T].astype(np.float32)))
    return torch.stack(outs), torch.stack(labels)


def validate(system: WatermarkSystem, val_clips: torch.Tensor, speech: np.ndarray,
             seed: int, max_clips: int = 32) -> dict:
    """Clean / augmented / surrogate-VC bit accuracies on a fixed seed stream."""
    cfg = system.config
    codec = system.codec
    system.eval()
    n = min(max_clips, len(val_clips))
    x = val_clips[:n]
    rng = np.random.default_rng([seed, 7])
    bits = rng.integers(0, 2, size=(n, cfg.payload.bits), dtype=np.uint8)
    hex_t = torch.from_numpy(bits_to_hex(bits))
    with torch.no_grad():
        z1, spk, _ = codec.speaker_sum_batch(x)
        s_hat = system.embedder(spk, system.payload_embedding(hex_t))
        x_wm = codec.decode_batch(z1 + s_hat)

        def acc_of(audio_batch: torch.Tensor) -> float:
            ls = codec.residual_latents_batch(audio_batch)
            w_hat, _ = system.detector(ls)
            sym = w_hat.argmax(-1).numpy()
            accs = [bitwise_acc(hex_to_bits(sym[i]), bits[i]) for i in range(len(sym))]
            return float(np.mean(accs))

        clean_acc = acc_of(x_wm)
        x_aug, _ = _augment_batch(x_wm, x[:, :x_wm.shape[1]], speech[:n], cfg, codec,
                                  rng_key=[seed, 11])
        aug_acc = acc_of(x_aug)

        vc_out = []
        for i in range(n):
            donor = val_clips[(i + 1) % len(val_clips)][:x_wm.shape[1]]
            cloned = clone(codec, AudioBuffer(x_wm[i].numpy(), cfg.codec.sample_rate),
                           AudioBuffer(donor.numpy(), cfg.codec.sample_rate),
                           cfg.surrogate, rng=np.random.default_rng([seed, 13, i]))
            vc_out.append(torch.from_numpy(cloned.samples))
        vc_acc = acc_of(torch.stack(vc_out))
    return {"clean_acc": clean_acc, "aug_acc": aug_acc, "vc_acc": vc_acc,
            "mean_acc": float((clean_acc + aug_acc + vc_acc) / 3.0)}


def train_watermark(codec: CodecModel, dataset, config: RunConfig,
                    val_dataset=None, out_path: str | Path | None = None,
                    log_path: str | Path | None = None,
                    init_path: str | Path | None = None,
                    progress: bool = True) -> tuple[WatermarkSystem, dict]:
    """Stage-2 training loop; codec parameters stay bit-identical (frozen)."""
    tcfg = config.train
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    torch.manual_seed(tcfg.seed)
    _freeze(codec)

    embedder, payload_embedding, detector = build_watermark_models(config)
    disc = SpectrogramDiscriminator(sample_rate=config.codec.sample_rate)
    system = WatermarkSystem(codec, embedder, payload_embedding, detector, config)

    gen_params = (list(embedder.parameters()) + list(payload_embedding.parameters())
                  + list(detector.parameters()))
    opt = torch.optim.Adam(gen_params, lr=tcfg.lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=tcfg.lr)

    step = 0
    if init_path is not None:
        from .checkpoint import load_watermark_checkpoint
        loaded, meta = load_watermark_checkpoint(init_path, codec)
        embedder.load_state_dict(loaded.embedder.state_dict())
        payload_embedding.load_state_dict(loaded.payload_embedding.state_dict())
        detector.load_state_dict(loaded.detector.state_dict())
        opt_state, disc_state = load_watermark_optimizer_state(init_path)
        if opt_state:
            opt.load_state_dict(opt_state)
        if disc_state:
            disc.load_state_dict(disc_state)
        step = int(meta.get("step", 0))

    hop = codec.hop
    clips = torch.from_numpy(dataset.as_array())
    clips = clips[:, :clips.shape[1] // hop * hop]
    speech = np.stack([dual_threshold_vad(clips[i].numpy(), config.vad).labels
                       for i in range(len(clips))])
    if val_dataset is not None and len(val_dataset):
        val_clips = torch.from_numpy(val_dataset.as_array())
        val_clips = val_clips[:, :val_clips.shape[1] // hop * hop]
        val_speech = np.stack([dual_threshold_vad(val_clips[i].numpy(), config.vad).labels
                               for i in range(len(val_clips))])
    else:
        val_clips, val_speech = None, None

    order_rng = np.random.default_rng([tcfg.seed, 1])
    payload_rng = np.random.default_rng([tcfg.seed, 2])
    log_fh = open(log_path, "w") if log_path else None
    best = {"mean_acc": -1.0, "metrics": None, "state": None}
    summary: dict = {"step": step}
    t0 = time.time()
    try:
        for epoch in range(tcfg.epochs):
            order = order_rng.permutation(len(clips))
            for start in range(0, len(order), tcfg.batch_size):
                idx = order[start:start + tcfg.batch_size]
                x = clips[idx]
                B = len(idx)
                embedder.train(); payload_embedding.train(); detector.train()

                bits = payload_rng.integers(0, 2, size=(B, config.payload.bits), dtype=np.uint8)
                hex_t = torch.from_numpy(bits_to_hex(bits))

                z1, spk, _ = codec.speaker_sum_batch(x)
                s_hat = embedder(spk, payload_embedding(hex_t))
                x_hat = codec.decode_batch(z1 + s_hat)

                if tcfg.disable_augmentation:
                    x_aug = x_hat
                    labels = torch.from_numpy(speech[idx].astype(np.float32))
                else:
                    x_aug, labels = _augment_batch(x_hat, x[:, :x_hat.shape[1]], speech[idx],
                                                   config, codec,
                                                   rng_key=[tcfg.seed, 3, epoch, start])

                ls = codec.residual_latents_batch(x_aug)
                w_hat, p_hat = detector(ls)

                parts = {
                    "dec": loss_dec(w_hat, hex_t),
                    "cos": loss_cos(spk, s_hat),
                    "mel": loss_mel(x[:, :x_hat.shape[1]], x_hat, config.codec.sample_rate),
                }
                if not tcfg.disable_vad_loss:
                    parts["vad"] = loss_vad(p_hat, labels)
                if tcfg.weights.adv > 0 and epoch >= tcfg.adv_warmup_epochs:
                    parts["adv"] = loss_adv(disc, x_hat)
                loss = total_loss(parts, tcfg.weights)

                opt.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(gen_params, tcfg.grad_clip)
                opt.step()

                if tcfg.weights.adv > 0:
                    d_loss = discriminator_step(disc, x[:, :x_hat.shape[1]], x_hat)
                    opt_d.zero_grad(set_to_none=True)
                    d_loss.backward()
                    opt_d.step()
                else:
                    d_loss = torch.zeros(())

                if log_fh and step % tcfg.log_every == 0:
                    entry = {"step": step, "epoch": epoch, "loss": loss.item(),
                             "disc": d_loss.item(),
                             **{k: v.item() for k, v in parts.items()}}
                    log_fh.write(json.dumps(entry) + "\n")
                    log_fh.flush()
                step += 1

            if val_clips is not None and (epoch + 1) % tcfg.val_every_epochs == 0:
                metrics = validate(system, val_clips, val_speech, seed=tcfg.seed,
                                   max_clips=tcfg.val_clips)
                metrics.update(epoch=epoch, step=step,
                               elapsed_s=round(time.time() - t0, 1))
                if progress:
                    print(f"[wm] epoch {epoch}: clean={metrics['clean_acc']:.3f} "
                          f"aug={metrics['aug_acc']:.3f} vc={metrics['vc_acc']:.3f} "
                          f"({metrics['elapsed_s']}s)")
                if log_fh:
                    log_fh.write(json.dumps({"val": metrics}) + "\n")
                    log_fh.flush()
                if metrics["mean_acc"] > best["mean_acc"]:
                    best = {"mean_acc": metrics["mean_acc"], "metrics": metrics,
                            "state": {
                                "embedder": {k: v.clone() for k, v in embedder.state_dict().items()},
                                "payload_embedding": {k: v.clone() for k, v in payload_embedding.state_dict().items()},
                                "detector": {k: v.clone() for k, v in detector.state_dict().items()},
                            }}
                summary = metrics
    finally:
        if log_fh:
            log_fh.close()

    if best["state"] is not None:
        embedder.load_state_dict(best["state"]["embedder"])
        payload_embedding.load_state_dict(best["state"]["payload_embedding"])
        detector.load_state_dict(best["state"]["detector"])
        summary = dict(best["metrics"])
    summary["step"] = step
    system.eval()
    if out_path is not None:
        meta = {"step": step,
                "disable_vad_loss": tcfg.disable_vad_loss,
                "disable_augmentation": tcfg.disable_augmentation,
                "val_metrics": {k: v for k, v in summary.items() if isinstance(v, (int, float))},
                "seed": tcfg.seed}
        save_watermark_checkpoint(system, out_path, meta=meta,
                                  optimizer_state=opt.state_dict(),
                                  discriminator_state=disc.state_dict())
    return system, summary
