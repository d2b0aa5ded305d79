import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqdisc.audio import Waveform, read_wav, write_wav
from seqdisc.errors import DataError, FormatError
from seqdisc.frontend import (ENERGY_FLOOR, FbankConfig, cmvn_utterance, extract_features, logmel,
                              mel_filterbank, read_feature_archive, read_features,
                              write_feature_archive)


def test_one_second_gives_98_frames_of_80_dims():
    f = logmel(Waveform(np.random.default_rng(0).standard_normal(16000)))
    # 1 + floor((16000 - 400) / 160)
    assert f.shape == (98, 80)


def test_frame_count_formula_across_lengths():
    cfg = FbankConfig()
    for n in (400, 401, 559, 560, 12345):
        assert logmel(Waveform(np.ones(n)), cfg).shape[0] == 1 + (n - 400) // 160


def test_sine_peaks_in_the_bin_nearest_its_frequency():
    rate = 16000
    t = np.arange(rate) / rate
    f = logmel(Waveform(np.sin(2 * np.pi * 1000.0 * t), rate))
    peak = np.argmax(f, axis=1)
    assert (peak == peak[0]).all()
    # independent mel centres from the filterbank formula
    lo, hi = 2595 * np.log10(1 + 20 / 700), 2595 * np.log10(1 + 8000 / 700)
    centres = 700 * (10 ** (np.linspace(lo, hi, 82)[1:-1] / 2595) - 1)
    assert peak[0] == np.argmin(np.abs(centres - 1000.0))


def test_silence_hits_the_energy_floor():
    f = logmel(Waveform(np.zeros(1600)))
    assert np.all(f == np.log(ENERGY_FLOOR))


def test_too_short_waveform_is_rejected():
    with pytest.raises(DataError):
        logmel(Waveform(np.zeros(399)))


def test_scaling_shifts_log_energies_by_twice_log_scale():
    x = np.random.default_rng(1).standard_normal(4000)
    a = logmel(Waveform(x))
    b = logmel(Waveform(3.0 * x))
    assert np.allclose(b - a, 2 * np.log(3.0), atol=1e-9)


def test_filterbank_triangles_are_non_negative_and_peak_at_one():
    fb = mel_filterbank(FbankConfig(num_mels=10, fft_size=4096), 16000)
    assert fb.min() >= 0 and fb.max() <= 1 + 1e-12
    assert (fb.max(axis=1) > 0.9).all()


def test_cmvn_moments():
    x = np.random.default_rng(2).normal(3.0, 5.0, size=(50, 80))
    y = cmvn_utterance(x)
    assert np.abs(y.mean(axis=0)).max() < 1e-9
    assert np.abs(y.var(axis=0) - 1).max() < 1e-6


def test_cmvn_constant_column_becomes_zero():
    x = np.random.default_rng(3).normal(size=(20, 4))
    x[:, 2] = 3.7
    assert np.abs(cmvn_utterance(x)[:, 2]).max() < 1e-6


def test_cmvn_needs_two_frames():
    with pytest.raises(DataError):
        cmvn_utterance(np.zeros((1, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(1, 10))
def test_cmvn_is_idempotent(seed, T, D):
    x = np.random.default_rng(seed).normal(size=(T, D)) * 10
    once = cmvn_utterance(x)
    assert np.allclose(cmvn_utterance(once), once, atol=1e-6)


def test_dither_off_is_deterministic():
    x = Waveform(np.random.default_rng(4).standard_normal(3000))
    assert np.array_equal(extract_features(x), extract_features(x))


def test_feature_archive_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    feats = {"u1": rng.normal(size=(7, 3)), "u2": rng.normal(size=(2, 3))}
    path = tmp_path / "f.fea"
    write_feature_archive(path, feats)
    raw = path.read_bytes()
    assert raw[:4] == b"FEA1"
    assert np.frombuffer(raw[4:12], "<u4").tolist() == [7, 3]
    back = dict(read_feature_archive(path))
    for k in feats:
        assert np.array_equal(back[k], feats[k].astype(np.float32))
    assert np.array_equal(read_features(path, "u2"), feats["u2"].astype(np.float32))
    idx = (tmp_path / "f.fea.idx").read_text().split()
    assert idx == ["u1", "0", "u2", str(12 + 7 * 3 * 4)]


def test_feature_archive_detects_corruption(tmp_path):
    path = tmp_path / "f.fea"
    write_feature_archive(path, {"u": np.zeros((4, 2))})
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(FormatError):
        list(read_feature_archive(path))


@pytest.mark.parametrize("dtype", ["int16", "float32"])
def test_wav_round_trip(tmp_path, dtype):
    x = np.random.default_rng(6).uniform(-0.5, 0.5, size=(2, 1000))
    write_wav(tmp_path / "a.wav", Waveform(x, 8000), dtype)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 8000 and back.channels == 2
    assert np.abs(back.samples - x).max() < (1 / 32768 if dtype == "int16" else 1e-7)


def test_waveform_rejects_odd_sample_rate():
    with pytest.raises(DataError):
        Waveform(np.zeros(10), 44100)
