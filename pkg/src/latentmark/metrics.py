"""Detection and quality metrics plus the attack-matrix evaluation harness."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import AudioBuffer
from .augment import (add_white_noise, augment_core, dual_threshold_vad,
                      upsample_frame_labels)
from .checkpoint import WatermarkSystem
from .config import AugmentConfig, EvalConfig, SurrogateConfig
from .detector import hard_decision
from .dsp import butter_filter
from .payload import random_payload
from .surrogate import clone

SI_SNR_CAP_DB = 60.0


def bitwise_acc(decoded_bits: np.ndarray, true_bits: np.ndarray) -> float:
    """Fraction of payload bits decoded correctly."""
    decoded_bits = np.asarray(decoded_bits)
    true_bits = np.asarray(true_bits)
    if decoded_bits.shape != true_bits.shape:
        raise ValueError(f"length mismatch: {decoded_bits.shape} vs {true_bits.shape}")
    return float((decoded_bits == true_bits).mean())


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int((np.asarray(a) != np.asarray(b)).sum())


def far(decoded_bits: np.ndarray, true_bits: np.ndarray, num_random: int = 99,
        seed: int | None = None, rng: np.random.Generator | None = None) -> int:
    """False attribution for one item against 1 truth + num_random candidates.

    Random candidates are uniform, redrawn on collision with the ground truth;
    a candidate tying the ground-truth Hamming distance counts as a false
    attribution (conservative reading of "closest match is not the truth").
    """
    decoded_bits = np.asarray(decoded_bits)
    true_bits = np.asarray(true_bits)
    if decoded_bits.shape != true_bits.shape:
        raise ValueError(f"length mismatch: {decoded_bits.shape} vs {true_bits.shape}")
    if rng is None:
        rng = np.random.default_rng(seed)
    n = len(true_bits)
    d_true = hamming(decoded_bits, true_bits)
    for _ in range(num_random):
        while True:
            cand = rng.integers(0, 2, size=n, dtype=np.uint8)
            if hamming(cand, true_bits) != 0:
                break
        if hamming(decoded_bits, cand) <= d_true:
            return 1
    return 0


def si_snr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Scale-invariant SNR in dB after mean-centering, capped at +/-60 dB."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise ValueError(f"length mismatch: {reference.shape} vs {estimate.shape}")
    ref = reference - reference.mean()
    est = estimate - estimate.mean()
    ref_energy = float(ref @ ref)
    if ref_energy <= 0:
        raise ValueError("zero-energy reference")
    proj = (est @ ref) / ref_energy * ref
    err = est - proj
    err_energy = float(err @ err)
    proj_energy = float(proj @ proj)
    if err_energy == 0:
        return SI_SNR_CAP_DB
    if proj_energy == 0:
        return -SI_SNR_CAP_DB
    value = 10.0 * np.log10(proj_energy / err_energy)
    return float(np.clip(value, -SI_SNR_CAP_DB, SI_SNR_CAP_DB))


@dataclass
class AttackRow:
    attack: str
    acc: float
    far: float
    num_samples: int


@dataclass
class EvalReport:
    rows: list[AttackRow]
    si_snr_mean: float
    num_clips: int
    seed: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        blob = {
            "rows": [dataclasses.asdict(r) for r in self.rows],
            "quality": {"si_snr_mean": self.si_snr_mean},
            "num_clips": self.num_clips,
            "seed": self.seed,
            "config": self.config,
        }
        return json.dumps(blob, indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"{'attack':<16} {'ACC':>7} {'FAR':>7} {'n':>5}"]
        for r in self.rows:
            lines.append(f"{r.attack:<16} {r.acc:>7.3f} {r.far:>7.3f} {r.num_samples:>5d}")
        lines.append(f"quality: SI-SNR mean = {self.si_snr_mean:.2f} dB over {self.num_clips} clips")
        return "\n".join(lines)

    def check_thresholds(self, thresholds: dict) -> list[str]:
        """Returns human-readable violations of configured per-attack bounds."""
        violations = []
        by_name = {r.attack: r for r in self.rows}
        for attack, bounds in thresholds.items():
            if attack == "quality":
                if "si_snr_min" in bounds and self.si_snr_mean < bounds["si_snr_min"]:
                    violations.append(f"quality: SI-SNR {self.si_snr_mean:.2f} < {bounds['si_snr_min']}")
                continue
            row = by_name.get(attack)
            if row is None:
                violations.append(f"{attack}: no such attack row")
                continue
            if "acc_min" in bounds and row.acc < bounds["acc_min"]:
                violations.append(f"{attack}: ACC {row.acc:.3f} < {bounds['acc_min']}")
            if "far_max" in bounds and row.far > bounds["far_max"]:
                violations.append(f"{attack}: FAR {row.far:.3f} > {bounds['far_max']}")
        return violations


def _item_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def apply_attack(name: str, watermarked: np.ndarray, original: np.ndarray,
                 system: WatermarkSystem, rng: np.random.Generator,
                 donor: np.ndarray | None = None,
                 white_snr_db: float = 20.0,
                 surrogate_cfg: SurrogateConfig | None = None) -> np.ndarray:
    """Single-clip attack dispatch; returns the distorted signal."""
    sr = system.codec.cfg.sample_rate
    acfg = AugmentConfig()
    x = torch.from_numpy(watermarked.copy())
    slab = torch.ones(len(watermarked))
    window = int(round(acfg.window_ms / 1000.0 * sr))
    if name == "identity":
        return watermarked.copy()
    if name == "mask":
        from .augment import _core_mask
        out, _, _, _ = _core_mask(x, slab, None, acfg.mask_prob, window, rng)
        return out.numpy()
    if name == "shuffle":
        from .augment import _core_shuffle
        out, _, _, _ = _core_shuffle(x, slab, None, 1.0, window, rng)
        return out.numpy()
    if name == "replace":
        from .augment import _core_replace
        out, _, _, _ = _core_replace(x, torch.from_numpy(original.copy()), slab, None,
                                     acfg.replace_prob, window, rng)
        return out.numpy()
    if name == "codec_roundtrip":
        with torch.no_grad():
            return system.codec.roundtrip_batch(x[None])[0].numpy()
    if name == "resample":
        from .augment import _core_resample_chain
        out, _, _, _ = _core_resample_chain(x, slab, None, sr)
        return out.numpy()
    if name == "amplitude":
        gain = float(rng.uniform(*acfg.gain_range))
        return np.clip(watermarked * gain, -1.0, 1.0).astype(np.float32)
    if name == "filter":
        if rng.random() < 0.5:
            return butter_filter(watermarked, sr, acfg.lowpass_hz, "lowpass")
        return butter_filter(watermarked, sr, acfg.highpass_hz, "highpass")
    if name == "white":
        return add_white_noise(watermarked, white_snr_db, rng)
    if name == "vc":
        if donor is None:
            raise ValueError("vc attack requires a donor clip")
        cloned = clone(system.codec, AudioBuffer(watermarked, sr), AudioBuffer(donor, sr),
                       surrogate_cfg or SurrogateConfig(), rng=rng)
        return cloned.samples
    if name == "augment_pipeline":
        speech = dual_threshold_vad(watermarked)
        slab = torch.from_numpy(
            upsample_frame_labels(speech.labels, len(watermarked)).astype(np.float32))
        out, _, _, _ = augment_core(x, torch.from_numpy(original.copy()), slab, acfg,
                                    rng, sr, codec=system.codec)
        return out.detach().numpy()
    raise ValueError(f"unknown attack: {name!r}")


def run_eval(system: WatermarkSystem, dataset, attacks: tuple[str, ...] | None = None,
             seed: int = 0, eval_cfg: EvalConfig | None = None,
             surrogate_cfg: SurrogateConfig | None = None,
             progress: bool = False) -> EvalReport:
    """Attack matrix: per attack and clip, embed a fresh payload, attack, decode.

    Deterministic per (seed, clip index, attack index); FAR candidates come
    from an item-indexed seed stream.
    """
    from .embedder import watermark_audio
    from .detector import decode_watermark

    eval_cfg = eval_cfg or EvalConfig()
    attacks = tuple(attacks) if attacks is not None else eval_cfg.attacks
    surrogate_cfg = surrogate_cfg or SurrogateConfig()
    if len(dataset) == 0:
        raise ValueError("empty evaluation dataset")
    system.eval()
    n_bits = system.config.payload.bits
    hop = system.codec.cfg.hop
    clips = dataset.as_array()
    num = min(eval_cfg.num_clips, len(clips))
    clips = clips[:num]
    L = clips.shape[1] // hop * hop
    clips = clips[:, :L]

    rows = []
    snrs: list[float] = []
    for a_idx, attack in enumerate(attacks):
        accs, fars = [], []
        for i in range(num):
            original = clips[i]
            pay = random_payload(n_bits, rng=_item_rng(seed, a_idx, i, 1))
            wm = watermark_audio(system.codec, system.embedder, system.payload_embedding,
                                 original, pay)
            if attack == "identity":
                snrs.append(si_snr(original[:len(wm.samples)], wm.samples))
            donor = clips[(i + 1) % num] if attack == "vc" else None
            attacked = apply_attack(attack, wm.samples, original[:len(wm.samples)],
                                    system, _item_rng(seed, a_idx, i, 2), donor=donor,
                                    white_snr_db=eval_cfg.white_snr_db,
                                    surrogate_cfg=surrogate_cfg)
            result = decode_watermark(system.detector, system.codec, attacked)
            accs.append(bitwise_acc(result.bits, pay.bits))
            fars.append(far(result.bits, pay.bits, eval_cfg.num_random_candidates,
                            rng=_item_rng(seed, a_idx, i, 3)))
        rows.append(AttackRow(attack=attack, acc=float(np.mean(accs)),
                              far=float(np.mean(fars)), num_samples=num))
        if progress:
            print(f"[eval] {attack}: ACC={rows[-1].acc:.3f} FAR={rows[-1].far:.3f}")
    return EvalReport(rows=rows,
                      si_snr_mean=float(np.mean(snrs)) if snrs else float("nan"),
                      num_clips=num, seed=seed,
                      config={"attacks": list(attacks),
                              "num_random_candidates": eval_cfg.num_random_candidates,
                              "white_snr_db": eval_cfg.white_snr_db,
                              "surrogate": dataclasses.asdict(surrogate_cfg)})
