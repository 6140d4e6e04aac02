"""STFT analysis, weighted overlap-add synthesis and spectral utilities.

Spectrograms are real arrays of shape ``(2, T, F)`` holding the real and
imaginary planes. Frames are taken without centring padding: frame ``t``
covers samples ``[t * hop, t * hop + win_len)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    win_len: int = 320
    hop: int = 160
    dft_size: int = 320

    def __post_init__(self):
        if self.dft_size < self.win_len:
            raise ValueError("dft_size must be >= win_len")
        if self.win_len % self.hop:
            raise ValueError("hop must divide win_len")

    @property
    def n_bins(self) -> int:
        return self.dft_size // 2 + 1

    @property
    def window(self) -> np.ndarray:
        return periodic_hann(self.win_len)

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.win_len) // self.hop

    def span(self, n_frames: int) -> int:
        """Number of samples a ``n_frames`` spectrogram can synthesise."""
        return (n_frames - 1) * self.hop + self.win_len


DEFAULT = StftConfig()


@lru_cache(maxsize=16)
def _hann(n: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.flags.writeable = False
    return w


def periodic_hann(n: int) -> np.ndarray:
    return _hann(n)


def frame_spectrum(frames: np.ndarray, cfg: StftConfig = DEFAULT) -> np.ndarray:
    """Windowed rFFT of ``(T, win_len)`` frames -> ``(2, T, F)`` float64."""
    spec = np.fft.rfft(frames * cfg.window, n=cfg.dft_size, axis=-1)
    return np.stack([spec.real, spec.imag])


def stft(signal: np.ndarray, cfg: StftConfig = DEFAULT) -> np.ndarray:
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-D signal")
    if len(x) < cfg.win_len:
        raise ValueError(f"signal has {len(x)} samples, need at least {cfg.win_len}")
    n = cfg.n_frames(len(x))
    idx = np.arange(n)[:, None] * cfg.hop + np.arange(cfg.win_len)[None, :]
    return frame_spectrum(x[idx], cfg)


def frame_signals(spec: np.ndarray, cfg: StftConfig = DEFAULT) -> np.ndarray:
    """Inverse DFT of each frame followed by the synthesis window: ``(T, win_len)``."""
    z = np.asarray(spec[0], dtype=np.float64) + 1j * np.asarray(spec[1], dtype=np.float64)
    frames = np.fft.irfft(z, n=cfg.dft_size, axis=-1)[:, : cfg.win_len]
    return frames * cfg.window


def wola_norm(cfg: StftConfig = DEFAULT, n_frames: int | None = None) -> np.ndarray:
    """Sum of squared windows over all frames covering each output sample."""
    n_frames = 1 if n_frames is None else n_frames
    w2 = cfg.window**2
    norm = np.zeros(cfg.span(n_frames))
    for t in range(n_frames):
        norm[t * cfg.hop : t * cfg.hop + cfg.win_len] += w2
    return norm


def _safe_divide(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num)
    ok = den > 1e-10
    out[ok] = num[ok] / den[ok]
    return out


def istft(spec: np.ndarray, out_len: int | None = None, cfg: StftConfig = DEFAULT) -> np.ndarray:
    """Weighted overlap-add synthesis with per-sample squared-window normalisation.

    Samples that no window covers (only the very first one for a periodic
    Hann) come out as 0.
    """
    if spec.ndim != 3 or spec.shape[0] != 2 or spec.shape[2] != cfg.n_bins:
        raise ValueError(f"expected spectrogram (2, T, {cfg.n_bins}), got {spec.shape}")
    n_frames = spec.shape[1]
    span = cfg.span(n_frames)
    if out_len is None:
        out_len = span
    if out_len > span:
        raise ValueError(f"out_len {out_len} exceeds the synthesisable span {span}")
    frames = frame_signals(spec, cfg)
    acc = np.zeros(span)
    for t in range(n_frames):
        acc[t * cfg.hop : t * cfg.hop + cfg.win_len] += frames[t]
    return _safe_divide(acc, wola_norm(cfg, n_frames))[:out_len]


def power_law_compress(spec: np.ndarray, p: float = 0.3) -> np.ndarray:
    """Raise magnitudes to ``p`` while keeping phase; zero bins stay zero."""
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    mag = np.hypot(spec[0], spec[1])
    gain = np.zeros_like(mag)
    nz = mag > 0
    gain[nz] = mag[nz] ** (p - 1.0)
    return spec * gain[None]


def consistency_project(spec: np.ndarray, cfg: StftConfig = DEFAULT) -> np.ndarray:
    """Map a spectrogram onto the set of STFTs of real signals: ``stft(istft(spec))``."""
    return stft(istft(spec, cfg=cfg), cfg)
