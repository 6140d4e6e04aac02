"""Signal chain of a synthetic clip: loudspeaker distortion, time-varying echo path, mixing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import oaconvolve

from tvase import audio

SEGMENT = 8000  # 500 ms at 16 kHz


class ScheduleError(ValueError):
    pass


class LevelError(ValueError):
    pass


def nonlinear_distort(x: np.ndarray, clip: float = 0.8, gain_pos: float = 4.0, gain_neg: float = 0.5) -> np.ndarray:
    """Amplifier hard clipping followed by an asymmetric sigmoid loudspeaker model.

    ``xc = clip(x, +-clip * max|x|)``, ``b = 1.5 xc - 0.3 xc^2``,
    ``y = 4 (2 / (1 + exp(-a b)) - 1)`` with ``a = gain_pos`` where ``b > 0``
    else ``gain_neg``. Silent input is returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("input must be finite")
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak == 0.0:
        return x.copy()
    xc = np.clip(x, -clip * peak, clip * peak)
    b = 1.5 * xc - 0.3 * xc**2
    a = np.where(b > 0, gain_pos, gain_neg)
    # 2 / (1 + e^-z) - 1 == tanh(z / 2), which cannot overflow
    return 4.0 * np.tanh(0.5 * a * b)


@dataclass(frozen=True)
class DelaySchedule:
    """Echo delay per 500-ms segment, in samples: ``max(0, base + extra[k])``."""

    base: int
    extra: tuple[int, ...]
    segment: int = SEGMENT

    def delays(self) -> np.ndarray:
        return np.maximum(0, self.base + np.asarray(self.extra, dtype=np.int64))

    def n_segments(self) -> int:
        return len(self.extra)

    def to_dict(self) -> dict:
        return {"base": self.base, "extra": list(self.extra), "segment": self.segment}

    @classmethod
    def from_dict(cls, d) -> "DelaySchedule":
        return cls(int(d["base"]), tuple(int(e) for e in d["extra"]), int(d["segment"]))


def n_segments(n_samples: int, segment: int = SEGMENT) -> int:
    return max(1, -(-n_samples // segment))


def make_delay_schedule(rng: np.random.Generator, n_samples: int, dynamic: bool,
                        base_range_ms=(0.0, 100.0), extra_ms: float = 20.0,
                        fs: int = audio.SAMPLE_RATE, segment: int = SEGMENT) -> DelaySchedule:
    lo, hi = (int(round(v * fs / 1000)) for v in base_range_ms)
    base = int(rng.integers(lo, hi + 1))
    n = n_segments(n_samples, segment)
    if dynamic:
        e = int(round(extra_ms * fs / 1000))
        extra = tuple(int(v) for v in rng.integers(-e, e + 1, size=n))
    else:
        extra = (0,) * n
    return DelaySchedule(base, extra, segment)


def render_echo(farend: np.ndarray, rirs, delays, segment: int = SEGMENT) -> np.ndarray:
    """Echo with a per-segment delay and impulse response.

    Output segment ``k`` (samples ``[k S, (k+1) S)``) takes the far end delayed by
    ``delays[k]``; each such piece is convolved with ``rirs[k]`` and the tails are
    overlap-added, so the echo is continuous wherever consecutive segments share
    a delay. A single RIR or a single delay applies to every segment. Output has
    the far end's length.
    """
    x = np.asarray(farend, dtype=np.float64)
    n = len(x)
    n_seg = n_segments(n, segment)
    if isinstance(delays, DelaySchedule):
        if delays.segment != segment:
            raise ScheduleError("delay schedule segment length differs from the render segment")
        delays = delays.delays()
    delays = np.atleast_1d(np.asarray(delays, dtype=np.int64))
    rirs = [np.asarray(rirs, dtype=np.float64)] if np.ndim(rirs[0]) == 0 else [np.asarray(h, np.float64) for h in rirs]
    for name, seq in (("delay", delays), ("RIR", rirs)):
        if len(seq) != 1 and len(seq) < n_seg:
            raise ScheduleError(f"{name} schedule covers {len(seq)} segments, clip needs {n_seg}")
    if np.any(delays < 0):
        raise ScheduleError("delays must be non-negative")
    out = np.zeros(n)
    for k in range(n_seg):
        a, b = k * segment, min(n, (k + 1) * segment)
        d = int(delays[0] if len(delays) == 1 else delays[k])
        piece = np.zeros(b - a)
        lo = max(a, d)
        if lo < b:
            piece[lo - a :] = x[lo - d : b - d]
        if not piece.any():
            continue
        h = rirs[0] if len(rirs) == 1 else rirs[k]
        y = oaconvolve(piece, h)[: n - a]
        out[a : a + len(y)] += y
    return out


def _power(x: np.ndarray, where: np.ndarray | None = None) -> float:
    x = np.asarray(x, dtype=np.float64)
    if where is not None:
        x = x[where[: len(x)]]
    return float(np.mean(x**2)) if x.size else 0.0


def nearend_active(nearend: np.ndarray) -> np.ndarray:
    """Sample mask of 10-ms frames where the near end is at or above -60 dBFS."""
    return audio.frames_to_samples(audio.active_frames(nearend), len(nearend))


def level_powers(nearend, echo, noise, active: np.ndarray | None = None):
    """``(P_s, P_d, P_s_full, P_n)``: near end and echo over near-end-active samples,
    near end and noise over the whole clip."""
    if active is None:
        active = nearend_active(nearend)
    p_s = _power(nearend, active)
    p_d = _power(echo, active) if echo is not None else 0.0
    p_sf = _power(nearend)
    p_n = _power(noise) if noise is not None else 0.0
    return p_s, p_d, p_sf, p_n


def _pad(x, n):
    x = np.asarray(x, dtype=np.float64)
    return np.concatenate([x, np.zeros(n - len(x))]) if len(x) < n else x


def _gain(p_ref: float, p_x: float, level_db: float, what: str) -> float:
    if p_ref <= 0.0:
        raise LevelError("near end has no power where it is measured")
    if p_x <= 0.0:
        raise LevelError(f"{what} has zero power but a finite level was requested")
    return math.sqrt(p_ref / (p_x * 10.0 ** (level_db / 10.0)))


def _omitted(level_db) -> bool:
    if level_db is None or level_db == math.inf:
        return True
    if not math.isfinite(level_db):
        raise LevelError(f"level {level_db} dB is not usable")
    return False


def scale_components(nearend, echo, noise, ser_db: float | None, snr_db: float | None):
    """Scaled ``(nearend, echo, noise)`` at the requested SER and SNR, padded to one length.

    A level of ``None`` or ``+inf`` omits that component (returned as zeros).
    """
    n = max(len(nearend), len(echo), 0 if noise is None else len(noise))
    s = _pad(nearend, n)
    d = _pad(echo, n)
    v = None if noise is None else _pad(noise, n)
    p_s, p_d, p_sf, p_n = level_powers(s, d, v)
    if _omitted(ser_db):
        d = np.zeros(n)
    else:
        d = d * _gain(p_s, p_d, ser_db, "echo")
    if _omitted(snr_db):
        v = np.zeros(n)
    elif v is None:
        raise LevelError("noise level requested without a noise signal")
    else:
        v = v * _gain(p_sf, p_n, snr_db, "noise")
    return s, d, v


def mix(nearend, echo, noise, ser_db: float | None, snr_db: float | None):
    """``mic = s + d' + n'`` with the echo scaled to ``ser_db`` and noise to ``snr_db``.

    Returns ``(mic, target)`` where ``target`` is the near end.
    """
    s, d, v = scale_components(nearend, echo, noise, ser_db, snr_db)
    return s + d + v, s


def single_talk_labels(nearend: np.ndarray, echo: np.ndarray, threshold_db: float = audio.ACTIVE_DB) -> np.ndarray:
    """Far-end single-talk frames: near end below and echo at or above ``threshold_db``."""
    n = min(len(nearend), len(echo))
    near = audio.frame_rms_db(np.asarray(nearend)[:n])
    far = audio.frame_rms_db(np.asarray(echo)[:n])
    return (near < threshold_db) & (far >= threshold_db)
