"""On-the-fly reverberation and noise simulation.

Each utterance draws its own room, source/microphone positions, T60, noise
clip and SNR from an explicit generator, so workers can simulate in
parallel and reruns with the same seed are bit-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from .audio import Waveform, read_wav
from .errors import DataError, SimulationError

SPEED_OF_SOUND = 343.0
MIN_T60 = 0.05


@dataclass(frozen=True)
class RoomSpec:
    """Sampling ranges for rectangular rooms.

    ``mic_offsets`` (M x 3, metres) are relative to an array centre that is
    drawn inside the room like the sources, at least ``wall_margin`` from
    every wall.
    """

    dims_low: tuple[float, float, float] = (4.0, 4.0, 2.5)
    dims_high: tuple[float, float, float] = (8.0, 7.0, 3.5)
    t60_range: tuple[float, float] = (0.2, 0.5)
    mic_offsets: tuple[tuple[float, float, float], ...] = ((0.0, 0.0, 0.0),)
    wall_margin: float = 0.5

    def validate(self) -> None:
        lo, hi = np.asarray(self.dims_low), np.asarray(self.dims_high)
        if lo.shape != (3,) or hi.shape != (3,) or (lo <= 0).any() or (hi < lo).any():
            raise SimulationError("room dimensions need 0 < low <= high in 3 axes")
        t_lo, t_hi = self.t60_range
        if not (MIN_T60 < t_lo <= t_hi <= 2.0):
            raise SimulationError(f"T60 range must lie in ({MIN_T60}, 2] s, got {self.t60_range}")
        offs = np.asarray(self.mic_offsets, dtype=float)
        if offs.ndim != 2 or offs.shape[1] != 3 or len(offs) < 1:
            raise SimulationError("mic_offsets must be an M x 3 array with M >= 1")
        extent = np.abs(offs).max(axis=0)
        if (lo - 2 * (self.wall_margin + extent) <= 0).any():
            raise SimulationError("smallest room cannot hold the array and margins")

    @property
    def num_mics(self) -> int:
        return len(self.mic_offsets)


@dataclass(frozen=True, eq=False)
class Rir:
    """Impulse responses shaped ``(num_mics, length)``."""

    taps: np.ndarray
    sample_rate: int
    t60: float

    @property
    def num_mics(self) -> int:
        return self.taps.shape[0]


@dataclass(frozen=True)
class Room:
    dims: np.ndarray
    mics: np.ndarray
    t60: float


def sabine_reflection(dims: Sequence[float], t60: float) -> float:
    """Wall reflection coefficient from Sabine's reverberation formula."""
    lx, ly, lz = dims
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    absorption = 24.0 * math.log(10.0) * volume / (SPEED_OF_SOUND * surface * t60)
    if absorption >= 1.0:
        raise SimulationError(f"T60 {t60:.3f} s is too short for a {lx}x{ly}x{lz} m room")
    return math.sqrt(1.0 - absorption)


def image_source_rir(dims, source, mics, t60: float, rate: int = 16000,
                     length: int | None = None, max_order: int = 8,
                     energy_floor: float = 1e-6) -> np.ndarray:
    """Image-source impulse responses for a shoebox room, shape ``(M, length)``.

    Images are enumerated up to ``max_order`` reflections, extended while the
    RIR window can still hold them, and dropped once their energy falls below
    ``energy_floor`` times the direct path.  Arrivals are rounded to the
    nearest sample.
    """
    dims = np.asarray(dims, dtype=float)
    source = np.asarray(source, dtype=float)
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    if t60 <= MIN_T60:
        raise SimulationError(f"T60 must exceed {MIN_T60} s")
    for p in (source, *mics):
        if (p < 0).any() or (p > dims).any():
            raise SimulationError("source and microphones must lie inside the room")
    if length is None:
        length = int(math.ceil(1.2 * t60 * rate))
    beta = sabine_reflection(dims, t60)
    # orders needed for images to arrive within the window
    reach = np.ceil(length / rate * SPEED_OF_SOUND / (2.0 * dims)).astype(int) + 1
    reach = np.maximum(reach, max_order)
    axes = [np.arange(-n, n + 1) for n in reach]
    out = np.zeros((len(mics), length))
    min_dist = SPEED_OF_SOUND / rate
    for m, mic in enumerate(mics):
        # per axis: image coordinate and reflection count for (mirror p, cell r)
        coords, counts = [], []
        for k in range(3):
            r = axes[k]
            c, n = [], []
            for p in (0, 1):
                c.append((1 - 2 * p) * source[k] + 2 * r * dims[k] - mic[k])
                n.append(np.abs(2 * r - p) if p else np.abs(2 * r))
            coords.append(np.concatenate(c))
            counts.append(np.concatenate(n))
        dx, dy, dz = np.meshgrid(*coords, indexing="ij", sparse=True)
        nx, ny, nz = np.meshgrid(*counts, indexing="ij", sparse=True)
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        order = nx + ny + nz
        dist = np.maximum(dist, min_dist)
        amp = beta ** order / (4.0 * math.pi * dist)
        direct = 1.0 / (4.0 * math.pi * max(np.linalg.norm(source - mic), min_dist))
        delay = np.rint(dist * rate / SPEED_OF_SOUND).astype(np.int64)
        keep = (delay < length) & (amp * amp >= energy_floor * direct * direct)
        np.add.at(out[m], delay[keep], amp[keep])
    return out


def schroeder_t60(rir: np.ndarray, rate: int, fit_db: tuple[float, float] = (-5.0, -25.0)) -> float:
    """T60 from a line fit to the backward-integrated energy decay curve."""
    energy = np.asarray(rir, dtype=float) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    edc_db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))
    hi, lo = fit_db
    sel = np.flatnonzero((edc_db <= hi) & (edc_db >= lo))
    if len(sel) < 2:
        raise SimulationError("decay curve too short to estimate T60")
    t = sel / rate
    slope, _ = np.polyfit(t, edc_db[sel], 1)
    if slope >= 0:
        raise SimulationError("energy decay curve does not decay")
    return -60.0 / slope


def sample_room(spec: RoomSpec, rng: np.random.Generator) -> Room:
    spec.validate()
    dims = rng.uniform(spec.dims_low, spec.dims_high)
    offs = np.asarray(spec.mic_offsets, dtype=float)
    extent = np.abs(offs).max(axis=0)
    lo = spec.wall_margin + extent
    center = rng.uniform(lo, dims - lo)
    t60 = float(rng.uniform(*spec.t60_range))
    return Room(dims, center + offs, t60)


def sample_source(spec: RoomSpec, room: Room, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(spec.wall_margin, room.dims - spec.wall_margin)


def sample_rir(spec: RoomSpec, rng: np.random.Generator, rate: int = 16000,
               room: Room | None = None) -> Rir:
    """Draw a room (unless given), a source position and the resulting RIR."""
    room = room or sample_room(spec, rng)
    source = sample_source(spec, room, rng)
    taps = image_source_rir(room.dims, source, room.mics, room.t60, rate)
    return Rir(taps, rate, room.t60)


def convolve(wave: Waveform, rir: Rir) -> Waveform:
    """Linear convolution truncated to the input length, one output per mic."""
    if wave.sample_rate != rir.sample_rate:
        raise SimulationError(f"sample rate mismatch: {wave.sample_rate} vs {rir.sample_rate}")
    n = len(wave)
    x = wave.samples
    if x.shape[0] not in (1, rir.num_mics):
        raise SimulationError("waveform channels must be 1 or match the RIR mic count")
    out = np.stack([fftconvolve(x[min(m, x.shape[0] - 1)], rir.taps[m])[:n]
                    for m in range(rir.num_mics)])
    return Waveform(out, wave.sample_rate)


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def noise_segment(noise: Waveform, length: int, offset: int) -> np.ndarray:
    """``length`` samples of ``noise`` starting at ``offset``, looping as needed."""
    idx = (offset + np.arange(length)) % len(noise)
    return noise.samples[:, idx]


def snr_scale(speech: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    p_noise = power(noise)
    if p_noise <= 0.0:
        raise SimulationError("noise has zero power")
    return math.sqrt(power(speech) / (p_noise * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float,
               rng: np.random.Generator) -> Waveform:
    """Add ``noise`` scaled to the requested full-utterance SNR.

    ``snr_db = inf`` returns ``speech`` untouched.  The noise starts at a
    random offset and loops to cover the speech.
    """
    if speech.sample_rate != noise.sample_rate:
        raise SimulationError("speech and noise sample rates differ")
    if math.isinf(snr_db) and snr_db > 0:
        return speech
    if noise.channels not in (1, speech.channels):
        raise SimulationError("noise channels must be 1 or match the speech")
    if power(noise.samples) <= 0.0:
        raise SimulationError("noise has zero power")
    seg = noise_segment(noise, len(speech), int(rng.integers(len(noise))))
    seg = np.broadcast_to(seg, speech.samples.shape)
    scale = snr_scale(speech.samples, seg, snr_db)
    return Waveform(speech.samples + scale * seg, speech.sample_rate)


# noise sources ----------------------------------------------------------------

@dataclass(frozen=True)
class NoiseEntry:
    id: str
    path: str
    type: str = "unknown"


def read_noise_manifest(path: str | Path) -> list[NoiseEntry]:
    entries = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            p = Path(rec["path"])
            entries.append(NoiseEntry(str(rec["id"]), str(p if p.is_absolute() else base / p),
                                      str(rec.get("type", "unknown"))))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad noise manifest record ({exc})") from None
    return entries


def synthetic_noise(kind: str, length: int, rng: np.random.Generator,
                    rate: int = 16000) -> Waveform:
    """White noise or a babble-like sum of modulated band-limited voices."""
    if kind == "white":
        return Waveform(rng.standard_normal(length), rate)
    if kind == "babble":
        t = np.arange(length) / rate
        out = np.zeros(length)
        for _ in range(6):
            f0 = rng.uniform(90, 250)
            voice = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h
                        for h in range(1, 12))
            envelope = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2, 6) * t + rng.uniform(0, 6))
            out += voice * envelope
        return Waveform(out / np.std(out), rate)
    raise ValueError(f"unknown synthetic noise kind {kind!r}")


# per-utterance simulation -----------------------------------------------------

@dataclass(frozen=True)
class SimulationConfig:
    room: RoomSpec = field(default_factory=RoomSpec)
    snr_range: tuple[float, float] = (0.0, 20.0)
    probability: float = 1.0
    max_speakers: int = 4

    def validate(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise SimulationError("simulation probability must lie in [0, 1]")
        lo, hi = self.snr_range
        if lo > hi:
            raise SimulationError("empty SNR range")
        if self.max_speakers < 1:
            raise SimulationError("max_speakers must be >= 1")
        self.room.validate()


@dataclass(frozen=True, eq=False)
class SimulationPlan:
    """Everything drawn for one utterance; ``rirs`` is None when passed through."""

    rirs: list[Rir] | None
    room: Room | None = None
    noise_index: int | None = None
    snr_db: float = math.inf


def plan_simulation(num_sources: int, cfg: SimulationConfig, rng: np.random.Generator,
                    num_noises: int = 0, rate: int = 16000) -> SimulationPlan:
    cfg.validate()
    if not 1 <= num_sources <= cfg.max_speakers:
        raise SimulationError(f"need 1..{cfg.max_speakers} sources, got {num_sources}")
    if rng.random() >= cfg.probability:
        return SimulationPlan(None)
    room = sample_room(cfg.room, rng)
    rirs = [sample_rir(cfg.room, rng, rate, room) for _ in range(num_sources)]
    if num_noises:
        return SimulationPlan(rirs, room, int(rng.integers(num_noises)),
                              float(rng.uniform(*cfg.snr_range)))
    return SimulationPlan(rirs, room)


def render(plan: SimulationPlan, sources: Sequence[tuple[Waveform, int]],
           noises: Sequence[Waveform], rng: np.random.Generator) -> Waveform:
    primary = sources[0][0]
    if plan.rirs is None:
        return primary
    length = max(off + len(w) for w, off in sources)
    out = np.zeros((plan.rirs[0].num_mics, length))
    for (wave, off), rir in zip(sources, plan.rirs):
        if off < 0:
            raise SimulationError("source offsets must be non-negative")
        wet = convolve(wave, rir)
        out[:, off:off + len(wave)] += wet.samples
    mixed = Waveform(out, primary.sample_rate)
    if plan.noise_index is not None:
        mixed = mix_at_snr(mixed, noises[plan.noise_index], plan.snr_db, rng)
    return mixed


def simulate_utterance(sources: Sequence[tuple[Waveform, int]], cfg: SimulationConfig,
                       rng: np.random.Generator, noises: Sequence[Waveform] = ()) -> Waveform:
    """Reverberate each source in a shared sampled room, sum at offsets, add noise.

    With probability ``1 - cfg.probability`` the primary source comes back
    unmodified.
    """
    if not sources:
        raise SimulationError("no sources")
    rates = {w.sample_rate for w, _ in sources} | {n.sample_rate for n in noises}
    if len(rates) != 1:
        raise SimulationError("all sources and noises must share one sample rate")
    plan = plan_simulation(len(sources), cfg, rng, len(noises), sources[0][0].sample_rate)
    return render(plan, sources, noises, rng)


def utterance_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-utterance stream: global seed combined with the utterance index."""
    return np.random.default_rng([seed, index])


def load_noises(manifest: str | Path) -> list[Waveform]:
    return [read_wav(e.path) for e in read_noise_manifest(manifest)]
