"""Log-mel filterbank frontend and short-term speech level measurement."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .corpus import SAMPLE_RATE, Waveform

FRAME_WIDTH_MS = 25
FRAME_STEP_MS = 10
N_FFT = 512
N_MELS = 40
MEL_F_LO = 0.0
MEL_F_HI = 8000.0
LOG_FLOOR = 1e-10
SILENCE_DB = -120.0


@dataclass
class FeatureMatrix:
    """Framed log filterbank energies, one row per 25 ms / 10 ms frame."""

    frames: np.ndarray
    frame_width_ms: int = FRAME_WIDTH_MS
    frame_step_ms: int = FRAME_STEP_MS

    def __len__(self) -> int:
        return len(self.frames)


def frame_signal(waveform: Waveform, width_ms: int = FRAME_WIDTH_MS,
                 step_ms: int = FRAME_STEP_MS) -> np.ndarray:
    """Slice into overlapping frames; a trailing partial frame is dropped."""
    samples = waveform.samples
    width = waveform.sample_rate * width_ms // 1000
    step = waveform.sample_rate * step_ms // 1000
    if len(samples) < width:
        raise ValueError(f"input shorter than one frame ({width} samples)")
    count = (len(samples) - width) // step + 1
    idx = np.arange(width)[None, :] + step * np.arange(count)[:, None]
    return samples[idx]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   f_lo: float = MEL_F_LO, f_hi: float = MEL_F_HI) -> np.ndarray:
    """Triangular filters on the mel scale; rows are bands, columns FFT bins."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_lo), _hz_to_mel(f_hi), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    bank = np.zeros((n_mels, len(bins)))
    for i in range(n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        rising = (bins - lo) / (center - lo)
        falling = (hi - bins) / (hi - center)
        bank[i] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def log_mel_features(waveform: Waveform) -> FeatureMatrix:
    """Hann window, 512-point power spectrum, 40 mel bands, natural log."""
    frames = frame_signal(waveform)
    width = frames.shape[1]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(width) / width)
    spectrum = np.abs(np.fft.rfft(frames * window, n=N_FFT, axis=1)) ** 2
    energies = spectrum @ mel_filterbank().T
    return FeatureMatrix(np.log(energies + LOG_FLOOR))


def short_term_peak_db(waveform: Waveform) -> float:
    """Max frame RMS on the 25 ms / 10 ms grid, in dBFS; -120 floor for silence.

    Inputs shorter than one frame are measured as a single whole-signal frame.
    """
    samples = waveform.samples
    if len(samples) == 0:
        raise ValueError("empty waveform")
    width = waveform.sample_rate * FRAME_WIDTH_MS // 1000
    if len(samples) < width:
        frames = samples[None, :]
    else:
        frames = frame_signal(waveform)
    peak = float(np.sqrt(np.mean(frames * frames, axis=1)).max())
    if peak <= 10.0 ** (SILENCE_DB / 20.0):
        return SILENCE_DB
    return 20.0 * math.log10(peak)


def save_features(path, features: FeatureMatrix) -> None:
    """Debug dump: uint32 header (n_frames, dim) then row-major float64."""
    frames = np.ascontiguousarray(features.frames, dtype="<f8")
    header = struct.pack("<II", frames.shape[0], frames.shape[1])
    Path(path).write_bytes(header + frames.tobytes())


def load_features(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    n_frames, dim = struct.unpack("<II", data[:8])
    frames = np.frombuffer(data[8:], dtype="<f8").reshape(n_frames, dim)
    return FeatureMatrix(frames.copy())
