"""WAV I/O and frame-level activity measurement."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
FRAME = 160  # 10 ms
ACTIVE_DB = -60.0


class AudioFormatError(ValueError):
    pass


def read_wav(path, expect_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Mono 16-bit PCM or float WAV -> float64 in [-1, 1]. No resampling."""
    rate, data = wavfile.read(str(path))
    if rate != expect_rate:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz, expected {expect_rate} Hz")
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, x: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write 32-bit float mono."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), rate, np.asarray(x, dtype=np.float32))


def frame_rms_db(x: np.ndarray, frame: int = FRAME) -> np.ndarray:
    """RMS level in dBFS of each whole frame (a trailing partial frame is ignored)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x) // frame
    ms = np.mean(x[: n * frame].reshape(n, frame) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(ms)


def active_frames(x: np.ndarray, threshold_db: float = ACTIVE_DB, frame: int = FRAME) -> np.ndarray:
    return frame_rms_db(x, frame) >= threshold_db


def frames_to_samples(mask: np.ndarray, n_samples: int, frame: int = FRAME) -> np.ndarray:
    out = np.zeros(n_samples, dtype=bool)
    out[: len(mask) * frame] = np.repeat(np.asarray(mask, dtype=bool), frame)
    return out


def mask_to_segments(mask) -> list[list[int]]:
    """Boolean frame mask -> ``[[start, stop), ...]`` runs of True."""
    m = np.concatenate([[0], np.asarray(mask, dtype=np.int8), [0]])
    edges = np.flatnonzero(np.diff(m))
    return [[int(a), int(b)] for a, b in zip(edges[::2], edges[1::2])]


def segments_to_mask(segments, n_frames: int) -> np.ndarray:
    mask = np.zeros(n_frames, dtype=bool)
    for a, b in segments:
        mask[a:b] = True
    return mask
