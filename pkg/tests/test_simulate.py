import json
import math

import numpy as np
import pytest

from seqdisc.audio import Waveform, write_wav
from seqdisc.errors import DataError, SimulationError
from seqdisc.simulate import (Rir, RoomSpec, SimulationConfig, convolve, image_source_rir,
                              load_noises, mix_at_snr, plan_simulation, power, read_noise_manifest,
                              sample_rir, schroeder_t60, simulate_utterance, synthetic_noise,
                              utterance_rng)


def naive_convolve(x, h, n):
    out = np.zeros(n)
    for i in range(n):
        for k in range(len(h)):
            if 0 <= i - k < len(x):
                out[i] += h[k] * x[i - k]
    return out


def test_unit_impulse_is_identity():
    x = np.random.default_rng(0).standard_normal(100)
    y = convolve(Waveform(x), Rir(np.array([[1.0]]), 16000, 0.3))
    assert np.allclose(y.samples[0], x, atol=1e-12)


def test_shifted_impulse_delays_by_one_sample():
    x = np.random.default_rng(1).standard_normal(50)
    y = convolve(Waveform(x), Rir(np.array([[0.0, 1.0]]), 16000, 0.3)).samples[0]
    assert y[0] == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(y[1:], x[:-1], atol=1e-12)


def test_convolution_matches_naive_reference():
    rng = np.random.default_rng(2)
    x, h = rng.standard_normal(1000), rng.standard_normal(200)
    y = convolve(Waveform(x), Rir(h[None], 16000, 0.3)).samples[0]
    assert len(y) == 1000
    assert np.abs(y - naive_convolve(x, h, 1000)).max() <= 1e-6


def test_convolution_rejects_rate_mismatch():
    with pytest.raises(SimulationError):
        convolve(Waveform(np.zeros(10), 8000), Rir(np.ones((1, 3)), 16000, 0.3))


def test_multi_mic_rir_gives_one_channel_per_mic():
    rir = Rir(np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.0]]), 16000, 0.3)
    y = convolve(Waveform(np.arange(5.0)), rir)
    assert y.channels == 3 and len(y) == 5


def test_short_t60_is_rejected():
    with pytest.raises(SimulationError):
        RoomSpec(t60_range=(0.05, 0.3)).validate()
    with pytest.raises(SimulationError):
        image_source_rir((5, 4, 3), (1, 1, 1), [(2, 2, 1.5)], 0.04)


def test_room_geometry_is_validated():
    with pytest.raises(SimulationError):
        RoomSpec(dims_low=(4, 4, 0), dims_high=(5, 5, 3)).validate()
    with pytest.raises(SimulationError):
        image_source_rir((5, 4, 3), (6, 1, 1), [(2, 2, 1.5)], 0.3)


def test_sabine_rir_decay_matches_nominal_t60():
    est = schroeder_t60(image_source_rir((6.0, 5.5, 3.0), (1.5, 1.7, 1.4), [(3.0, 2.75, 1.5)],
                                         0.3)[0], 16000)
    assert 0.24 <= est <= 0.36


def test_source_at_mic_has_direct_path_peak_first():
    taps = image_source_rir((5.0, 4.0, 3.0), (2.0, 2.0, 1.5), [(2.0, 2.0, 1.5)], 0.3)[0]
    # distances are clamped to one sample, so the direct path lands at tap 0 or 1
    first = np.flatnonzero(taps)[0]
    assert first <= 1 and np.argmax(taps) == first


def test_rir_length_covers_t60():
    rir = sample_rir(RoomSpec(), np.random.default_rng(3))
    assert rir.taps.shape[1] >= rir.t60 * rir.sample_rate
    assert np.isfinite(rir.taps).all()


def test_random_rooms_mostly_land_within_twenty_percent():
    rng = np.random.default_rng(4)
    hits = 0
    for _ in range(40):
        rir = sample_rir(RoomSpec(), rng)
        est = schroeder_t60(rir.taps[0], rir.sample_rate)
        hits += abs(est - rir.t60) <= 0.2 * rir.t60
    assert hits / 40 >= 0.85


def test_infinite_snr_returns_speech():
    s = Waveform(np.random.default_rng(5).standard_normal(100))
    assert mix_at_snr(s, Waveform(np.ones(10)), math.inf, np.random.default_rng(0)) is s


def test_equal_power_at_zero_db_uses_unit_scale():
    rng = np.random.default_rng(6)
    s = rng.standard_normal(1000)
    n = rng.standard_normal(1000)
    n *= math.sqrt(power(s) / power(n))
    out = mix_at_snr(Waveform(s), Waveform(n), 0.0, np.random.default_rng(0)).samples[0] - s
    assert math.sqrt(power(out) / power(n)) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("snr", [-5.0, 0.0, 10.0, 17.3])
def test_mixed_components_have_requested_snr(snr):
    rng = np.random.default_rng(7)
    s = Waveform(rng.standard_normal(3000))
    n = Waveform(rng.standard_normal(1234) * 0.1)
    noise_part = mix_at_snr(s, n, snr, rng).samples - s.samples
    measured = 10 * math.log10(power(s.samples) / power(noise_part))
    assert abs(measured - snr) <= 1e-6


def test_silent_noise_is_rejected():
    with pytest.raises(SimulationError):
        mix_at_snr(Waveform(np.ones(10)), Waveform(np.zeros(10)), 5.0, np.random.default_rng(0))


def test_zero_probability_passes_primary_through():
    x = Waveform(np.random.default_rng(8).standard_normal(2000))
    out = simulate_utterance([(x, 0)], SimulationConfig(probability=0.0),
                             np.random.default_rng(0), [Waveform(np.ones(100))])
    assert out is x


def test_simulation_is_deterministic_under_seed():
    x = Waveform(np.random.default_rng(9).standard_normal(4000))
    noise = [synthetic_noise("white", 8000, np.random.default_rng(1))]
    a = simulate_utterance([(x, 0)], SimulationConfig(), utterance_rng(3, 17), noise)
    b = simulate_utterance([(x, 0)], SimulationConfig(), utterance_rng(3, 17), noise)
    assert np.array_equal(a.samples, b.samples)
    c = simulate_utterance([(x, 0)], SimulationConfig(), utterance_rng(3, 18), noise)
    assert not np.array_equal(a.samples, c.samples)


def test_two_overlapping_speakers_sum_their_convolutions():
    rng = np.random.default_rng(10)
    a, b = Waveform(rng.standard_normal(3000)), Waveform(rng.standard_normal(3000))
    cfg = SimulationConfig()
    out = simulate_utterance([(a, 0), (b, 1500)], cfg, np.random.default_rng(11))
    plan = plan_simulation(2, cfg, np.random.default_rng(11))
    want = np.zeros((1, 4500))
    want[:, :3000] += convolve(a, plan.rirs[0]).samples
    want[:, 1500:] += convolve(b, plan.rirs[1]).samples
    assert np.allclose(out.samples, want, atol=1e-12)


def test_multi_mic_output_channels_match_mic_count():
    spec = RoomSpec(mic_offsets=((0, 0, 0), (0.1, 0, 0)))
    x = Waveform(np.random.default_rng(12).standard_normal(2000))
    out = simulate_utterance([(x, 0)], SimulationConfig(room=spec), np.random.default_rng(0),
                             [synthetic_noise("babble", 5000, np.random.default_rng(0))])
    assert out.channels == 2 and len(out) == 2000


def test_too_many_speakers_is_an_error():
    x = Waveform(np.zeros(500))
    with pytest.raises(SimulationError):
        simulate_utterance([(x, 0)] * 3, SimulationConfig(max_speakers=2), np.random.default_rng(0))


def test_simulation_frequency_within_three_sigma(monkeypatch):
    # room synthesis is irrelevant to the coin flip, so stub it out for speed
    import seqdisc.simulate as sim
    monkeypatch.setattr(sim, "sample_room", lambda spec, rng: (5.0, 4.0, 3.0))
    monkeypatch.setattr(sim, "sample_rir", lambda *a, **k: None)
    p, n = 0.3, 10_000
    cfg = SimulationConfig(probability=p)
    hits = sum(plan_simulation(1, cfg, utterance_rng(0, i)).rirs is not None for i in range(n))
    assert abs(hits / n - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_noise_manifest(tmp_path):
    write_wav(tmp_path / "n.wav", Waveform(np.full(100, 0.25)))
    (tmp_path / "noise.jsonl").write_text(json.dumps({"id": "n", "path": "n.wav",
                                                      "type": "hum"}) + "\n")
    entries = read_noise_manifest(tmp_path / "noise.jsonl")
    assert entries[0].type == "hum"
    assert np.allclose(load_noises(tmp_path / "noise.jsonl")[0].samples, 0.25)
    (tmp_path / "bad.jsonl").write_text("{}\n")
    with pytest.raises(DataError):
        read_noise_manifest(tmp_path / "bad.jsonl")
