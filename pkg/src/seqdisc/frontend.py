"""Log-mel filterbank features and utterance-level mean/variance normalization."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .audio import Waveform
from .errors import DataError, FormatError

ENERGY_FLOOR = 1e-10
VARIANCE_FLOOR = 1e-10


@dataclass(frozen=True)
class FbankConfig:
    num_mels: int = 80
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int | None = None
    low_hz: float = 20.0
    high_hz: float | None = None
    dither: float = 0.0

    def __post_init__(self):
        if self.num_mels < 1:
            raise ValueError("num_mels must be >= 1")
        if not 0 < self.hop_ms <= self.window_ms:
            raise ValueError("need 0 < hop_ms <= window_ms")

    @property
    def frame_rate(self) -> float:
        return 1000.0 / self.hop_ms

    def window_samples(self, rate: int) -> int:
        return int(round(rate * self.window_ms / 1000.0))

    def hop_samples(self, rate: int) -> int:
        return int(round(rate * self.hop_ms / 1000.0))

    def nfft(self, rate: int) -> int:
        if self.fft_size:
            return self.fft_size
        return 1 << (self.window_samples(rate) - 1).bit_length()

    def num_frames(self, num_samples: int, rate: int) -> int:
        win, hop = self.window_samples(rate), self.hop_samples(rate)
        return 0 if num_samples < win else 1 + (num_samples - win) // hop

    def num_samples(self, num_frames: int, rate: int) -> int:
        """Smallest waveform length giving exactly ``num_frames`` frames."""
        return (num_frames - 1) * self.hop_samples(rate) + self.window_samples(rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FbankConfig, rate: int) -> np.ndarray:
    """Triangles linear on the mel scale, shape ``(num_mels, nfft // 2 + 1)``."""
    nfft = cfg.nfft(rate)
    high = cfg.high_hz or rate / 2.0
    edges = np.linspace(hz_to_mel(cfg.low_hz), hz_to_mel(high), cfg.num_mels + 2)
    bins = hz_to_mel(np.arange(nfft // 2 + 1) * rate / nfft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins - left) / (center - left)
    down = (right - bins) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def mel_centers_hz(cfg: FbankConfig, rate: int) -> np.ndarray:
    high = cfg.high_hz or rate / 2.0
    return mel_to_hz(np.linspace(hz_to_mel(cfg.low_hz), hz_to_mel(high), cfg.num_mels + 2)[1:-1])


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = 1 + (len(x) - win) // hop
    return np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n]


def logmel(wave: Waveform, cfg: FbankConfig = FbankConfig(), channel: int = 0,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """``T x num_mels`` log mel energies of one channel (Hamming window, power spectrum)."""
    rate = wave.sample_rate
    x = wave.channel(channel)
    win, hop = cfg.window_samples(rate), cfg.hop_samples(rate)
    if len(x) < win:
        raise DataError(f"waveform of {len(x)} samples is shorter than one {win}-sample window")
    if cfg.dither > 0:
        rng = rng or np.random.default_rng(0)
        x = x + cfg.dither * rng.standard_normal(len(x))
    frames = frame_signal(x, win, hop) * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n=cfg.nfft(rate), axis=1)) ** 2
    energies = power @ mel_filterbank(cfg, rate).T
    return np.log(np.maximum(energies, ENERGY_FLOOR))


def cmvn_utterance(feats: np.ndarray) -> np.ndarray:
    """Per-dimension zero mean and unit variance over the utterance."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise DataError("utterance CMVN needs at least 2 frames")
    mean = feats.mean(axis=0)
    var = feats.var(axis=0)
    return (feats - mean) / np.sqrt(np.maximum(var, VARIANCE_FLOOR))


def extract_features(wave: Waveform, cfg: FbankConfig = FbankConfig()) -> np.ndarray:
    return cmvn_utterance(logmel(wave, cfg))


# feature archive -------------------------------------------------------------

FEATURE_MAGIC = b"FEA1"


def write_feature_archive(path: str | Path, feats: Mapping[str, np.ndarray] |
                          Iterable[tuple[str, np.ndarray]]) -> None:
    """Binary records (magic, u32 rows, u32 cols, f32 LE data) plus ``<path>.idx``."""
    path = Path(path)
    items = feats.items() if isinstance(feats, Mapping) else feats
    index = []
    with open(path, "wb") as f:
        for utt, m in items:
            m = np.ascontiguousarray(m, dtype="<f4")
            if m.ndim != 2:
                raise DataError(f"{utt}: feature matrix must be 2-D")
            index.append(f"{utt} {f.tell()}\n")
            f.write(FEATURE_MAGIC + struct.pack("<II", *m.shape))
            f.write(m.tobytes())
    index_path(path).write_text("".join(index))


def index_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".idx")


def _read_record(f, utt: str) -> np.ndarray:
    head = f.read(12)
    if len(head) != 12 or head[:4] != FEATURE_MAGIC:
        raise FormatError(f"{utt}: bad feature record header")
    rows, cols = struct.unpack("<II", head[4:])
    data = f.read(rows * cols * 4)
    if len(data) != rows * cols * 4:
        raise FormatError(f"{utt}: truncated feature record")
    return np.frombuffer(data, dtype="<f4").reshape(rows, cols).astype(np.float64)


def read_feature_index(path: str | Path) -> dict[str, int]:
    out = {}
    for lineno, line in enumerate(index_path(path).read_text().splitlines(), 1):
        parts = line.split()
        if len(parts) != 2 or not parts[1].isdigit():
            raise FormatError(f"expected 'utt_id byte_offset', got {line!r}", lineno)
        out[parts[0]] = int(parts[1])
    return out


def read_feature_archive(path: str | Path) -> Iterator[tuple[str, np.ndarray]]:
    index = read_feature_index(path)
    with open(path, "rb") as f:
        for utt, offset in index.items():
            f.seek(offset)
            yield utt, _read_record(f, utt)


def read_features(path: str | Path, utt: str) -> np.ndarray:
    offset = read_feature_index(path)[utt]
    with open(path, "rb") as f:
        f.seek(offset)
        return _read_record(f, utt)
