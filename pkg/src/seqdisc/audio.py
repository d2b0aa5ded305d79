"""Waveform container and RIFF/WAVE file IO."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import DataError

SAMPLE_RATES = (8000, 16000)


@dataclass(frozen=True, eq=False)
class Waveform:
    """Float samples shaped ``(channels, length)``."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise DataError("waveform samples must be 1-D or (channels, length)")
        object.__setattr__(self, "samples", x)
        if self.sample_rate not in SAMPLE_RATES:
            raise DataError(f"unsupported sample rate {self.sample_rate}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def channel(self, k: int = 0) -> np.ndarray:
        return self.samples[k]


def read_wav(path: str | Path) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        x = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported WAV sample type {data.dtype}")
    return Waveform(x.T if x.ndim == 2 else x, rate)


def write_wav(path: str | Path, wave: Waveform, dtype: str = "float32") -> None:
    """Write 16-bit PCM (``dtype="int16"``) or 32-bit float samples."""
    x = wave.samples.T if wave.channels > 1 else wave.samples[0]
    if dtype == "int16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif dtype == "float32":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unsupported dtype {dtype}")
    wavfile.write(str(path), wave.sample_rate, data)
