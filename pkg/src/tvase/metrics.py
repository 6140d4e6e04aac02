"""Objective evaluation: ERLE, compressed spectral MSE, level measurement, delay estimation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import correlate

from tvase import audio
from tvase import stft as S
from tvase.scenario.signals import level_powers
from tvase.scenario.synth import load_set

ERLE_EPS = 1e-12
ERLE_CAP_DB = 100.0


class MetricError(ValueError):
    pass


def _sample_mask(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=bool)
    if len(labels) == n:
        return labels
    if len(labels) == n // audio.FRAME:
        return audio.frames_to_samples(labels, n)
    raise MetricError(f"{len(labels)} labels fit neither {n} samples nor {n // audio.FRAME} frames")


def erle(mic, enhanced, labels) -> float:
    """``10 log10(mean(y^2) / mean(s_hat^2))`` over labelled single-talk samples, capped at 100 dB.

    ``labels`` is a per-sample or per-10-ms-frame boolean mask. Both powers are
    floored at ``ERLE_EPS``; an exactly silent output scores the cap.
    """
    y = np.asarray(mic, dtype=np.float64)
    s = np.asarray(enhanced, dtype=np.float64)
    if y.shape != s.shape:
        raise MetricError(f"mic and enhanced lengths differ: {y.shape} vs {s.shape}")
    mask = _sample_mask(labels, len(y))
    if not mask.any():
        raise MetricError("no single-talk frames to evaluate")
    p_y = float(np.mean(y[mask] ** 2))
    p_s = float(np.mean(s[mask] ** 2))
    if p_s == 0.0:
        # silent output: full suppression, unless there was nothing to suppress
        return 0.0 if p_y == 0.0 else ERLE_CAP_DB
    return min(10.0 * math.log10(max(p_y, ERLE_EPS) / max(p_s, ERLE_EPS)), ERLE_CAP_DB)


def compressed_mse(estimate, reference, p: float = 0.3, project: bool = True) -> float:
    """Mean squared difference of power-law compressed ``(2, T, F)`` spectra.

    With ``project`` the estimate is first mapped onto a consistent STFT.
    """
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise MetricError(f"spectrogram shapes differ: {est.shape} vs {ref.shape}")
    if project:
        est = S.consistency_project(est)
        if est.shape != ref.shape:
            raise MetricError("projection changed the frame count")
    diff = S.power_law_compress(est, p) - S.power_law_compress(ref, p)
    return float(np.mean(diff**2))


def measure_levels(nearend, echo, noise=None, labels=None) -> tuple[float, float]:
    """``(SER, SNR)`` in dB as the mixer defines them; ``labels`` marks near-end-active frames.

    Missing noise gives an SNR of ``+inf``.
    """
    s = np.asarray(nearend, dtype=np.float64)
    active = None if labels is None else _sample_mask(labels, len(s))
    p_s, p_d, p_sf, p_n = level_powers(s, echo, noise, active)
    if p_s <= 0 or p_sf <= 0:
        raise MetricError("near end has zero power")
    if p_d <= 0:
        raise MetricError("echo has zero power")
    ser = 10.0 * math.log10(p_s / p_d)
    if noise is None:
        return ser, math.inf
    if p_n <= 0:
        raise MetricError("noise has zero power")
    return ser, 10.0 * math.log10(p_sf / p_n)


def estimate_delay(farend, echo, start: int, length: int, max_lag: int | None = None) -> int:
    """Lag ``L >= 0`` maximising the magnitude of the normalised cross-correlation
    between ``echo[start:start+length]`` and ``farend[start-L:start-L+length]``
    (magnitude, so a polarity-inverted echo path is tracked too).
    """
    f = np.asarray(farend, dtype=np.float64)
    e = np.asarray(echo, dtype=np.float64)
    if start < 0 or length < 1 or start + length > min(len(f), len(e)):
        raise MetricError("window lies outside the signals")
    max_lag = start if max_lag is None else min(max_lag, start)
    w = e[start : start + length]
    nw = np.linalg.norm(w)
    if nw == 0:
        raise MetricError("echo window is silent")
    seg = f[start - max_lag : start + length]  # candidate lag L starts at index max_lag - L
    num = correlate(seg, w, mode="valid")  # num[i] pairs w with seg[i:i+length]
    c = np.concatenate([[0.0], np.cumsum(seg**2)])
    den = np.sqrt(np.maximum(c[length:] - c[:-length], 0.0)) * nw
    score = np.where(den > 0, np.abs(num) / np.where(den > 0, den, 1.0), -np.inf)
    if not np.isfinite(score).any():
        raise MetricError("far-end window is silent")
    i = int(np.argmax(score))
    return max_lag - i


# ---------------------------------------------------------------------------
# reports


@dataclass
class ErleReport:
    rows: list = field(default_factory=list)  # dicts: clip_id, erle_db, erle_frames, compressed_mse
    erle_mean: float | None = None
    erle_std: float | None = None
    mse_mean: float | None = None
    mse_std: float | None = None
    clips: int = 0
    erle_clips: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ErleReport":
        return cls(**json.loads(text))


def _mean_std(values):
    if not values:
        return None, None
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def aggregate(rows) -> ErleReport:
    """Set-level mean and (population) standard deviation of per-clip values."""
    erles = [r["erle_db"] for r in rows if r["erle_db"] is not None]
    mses = [r["compressed_mse"] for r in rows if r["compressed_mse"] is not None]
    em, es = _mean_std(erles)
    mm, ms = _mean_std(mses)
    return ErleReport(rows=list(rows), erle_mean=em, erle_std=es, mse_mean=mm, mse_std=ms,
                      clips=len(rows), erle_clips=len(erles))


def clip_row(clip_id: str, mic, enhanced, target, labels, p: float = 0.3) -> dict:
    mic, enhanced, target = (np.asarray(x, dtype=np.float64) for x in (mic, enhanced, target))
    if not (len(mic) == len(enhanced) == len(target)):
        raise MetricError(f"{clip_id}: signal lengths differ ({len(mic)}, {len(enhanced)}, {len(target)})")
    labels = np.asarray(labels, dtype=bool)
    frames = int(labels.sum())
    row = {"clip_id": clip_id, "erle_frames": frames, "erle_db": None, "compressed_mse": None}
    if frames:
        row["erle_db"] = erle(mic, enhanced, labels)
    if len(mic) >= S.DEFAULT.win_len:
        row["compressed_mse"] = compressed_mse(S.stft(enhanced), S.stft(target), p)
    return row


def evaluate_set(manifest_path, enhanced_dir, p: float = 0.3, suffix: str = "_enhanced.wav") -> ErleReport:
    """Score ``<clip_id><suffix>`` in ``enhanced_dir`` against each manifest clip."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    _, clips = load_set(manifest_path)
    rows = []
    for m in clips:
        enh_path = Path(enhanced_dir) / f"{m.clip_id}{suffix}"
        if not enh_path.exists():
            raise MetricError(f"missing enhanced audio for {m.clip_id}: {enh_path}")
        mic = audio.read_wav(root / m.paths["mic"])
        target = audio.read_wav(root / m.paths["target"])
        enh = audio.read_wav(enh_path)
        rows.append(clip_row(m.clip_id, mic, enh, target, m.labels(), p))
    return aggregate(rows)
