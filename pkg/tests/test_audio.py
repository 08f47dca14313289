import wave

import numpy as np
import pytest

from latentmark.audio import AudioBuffer, load_wav, make_dataset, resample, save_wav


def _write_raw(path, data_int16, channels=1, rate=16000):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(data_int16, dtype="<i2").tobytes())


def test_load_wav_normalization(tmp_path):
    path = tmp_path / "a.wav"
    _write_raw(path, np.array([0, 32767, -32768, 16384]))
    buf = load_wav(path)
    assert buf.sample_rate == 16000
    assert buf.samples[1] == pytest.approx(32767 / 32768)
    assert buf.samples[2] == pytest.approx(-1.0)


def test_load_wav_length(tmp_path):
    path = tmp_path / "b.wav"
    _write_raw(path, np.zeros(16000, dtype=np.int16))
    buf = load_wav(path)
    assert len(buf.samples) == 16000


def test_load_wav_rejects_stereo(tmp_path):
    path = tmp_path / "st.wav"
    _write_raw(path, np.zeros(200, dtype=np.int16), channels=2)
    with pytest.raises(ValueError, match="multi-channel"):
        load_wav(path)


def test_load_wav_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "nope.wav")


def test_load_wav_rejects_8bit(tmp_path):
    path = tmp_path / "b8.wav"
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(1)
        wf.setframerate(16000)
        wf.writeframes(bytes(100))
    with pytest.raises(ValueError, match="unsupported encoding"):
        load_wav(path)


def test_save_load_roundtrip_error_bound(tmp_path):
    rng = np.random.default_rng(0)
    buf = AudioBuffer(rng.uniform(-1, 1, 5000).astype(np.float32))
    path = tmp_path / "rt.wav"
    save_wav(buf, path)
    back = load_wav(path)
    assert np.abs(back.samples - buf.samples).max() <= 2 / 32768


def test_save_zero_and_clipping(tmp_path):
    path = tmp_path / "z.wav"
    save_wav(AudioBuffer(np.zeros(100, dtype=np.float32)), path)
    assert np.all(load_wav(path).samples == 0)
    save_wav(AudioBuffer(np.array([1.5, -2.0], dtype=np.float32)), path)
    back = load_wav(path)
    assert back.samples[0] == pytest.approx(32767 / 32768)
    assert back.samples[1] == pytest.approx(-1.0)


def test_resample_identity_and_length():
    buf = AudioBuffer(np.random.default_rng(1).uniform(-1, 1, 16000).astype(np.float32))
    same = resample(buf, 16000)
    assert np.array_equal(same.samples, buf.samples)
    down = resample(buf, 8000)
    assert len(down.samples) == 8000
    with pytest.raises(ValueError):
        resample(buf, 0)


def test_resample_roundtrip_sine_correlation():
    sr = 16000
    t = np.arange(sr) / sr
    sine = AudioBuffer(np.sin(2 * np.pi * 1000 * t).astype(np.float32))
    back = resample(resample(sine, 8000), 16000)
    a, b = sine.samples, back.samples
    corr = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert corr > 0.99


def test_resample_scale_preserving():
    buf = AudioBuffer(np.random.default_rng(2).uniform(-0.5, 0.5, 4000).astype(np.float32))
    doubled = AudioBuffer(buf.samples * 0.5)
    a = resample(buf, 8000).samples * 0.5
    b = resample(doubled, 8000).samples
    assert np.allclose(a, b, atol=1e-7)


def _make_corpus_dir(tmp_path, n_files, seconds=5.0, rate=16000):
    rng = np.random.default_rng(0)
    for i in range(n_files):
        x = rng.uniform(-0.3, 0.3, int(seconds * rate)).astype(np.float32)
        save_wav(AudioBuffer(x, rate), tmp_path / f"f{i:02d}.wav")


def test_make_dataset_split_counts(tmp_path):
    _make_corpus_dir(tmp_path, 10)
    train = make_dataset(tmp_path, clip_length=3.0, split_ratio=0.8, seed=0, split="train")
    val = make_dataset(tmp_path, clip_length=3.0, split_ratio=0.8, seed=0, split="val")
    train_files = {c.source for c in train.clips}
    val_files = {c.source for c in val.clips}
    assert len(train_files) == 8 and len(val_files) == 2
    assert train_files.isdisjoint(val_files)


def test_make_dataset_clip_cutting(tmp_path):
    _make_corpus_dir(tmp_path, 1, seconds=5.0)
    ds = make_dataset(tmp_path, clip_length=3.0, split_ratio=1.0, seed=0, split="train")
    assert len(ds) == 2  # one full clip + one zero-padded tail
    assert all(len(c.audio.samples) == 48000 for c in ds.clips)
    assert np.all(ds.clips[1].audio.samples[-16000:] == 0)


def test_make_dataset_deterministic(tmp_path):
    _make_corpus_dir(tmp_path, 6)
    a = make_dataset(tmp_path, 3.0, 0.5, seed=9, split="train")
    b = make_dataset(tmp_path, 3.0, 0.5, seed=9, split="train")
    assert [c.source for c in a.clips] == [c.source for c in b.clips]


def test_make_dataset_empty_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        make_dataset(tmp_path, 3.0, 0.8, 0, "train")
