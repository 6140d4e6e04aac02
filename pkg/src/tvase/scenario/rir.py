"""Shoebox room impulse responses by the image-source method, and RT60 measurement."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.signal import butter, sosfilt

SPEED_OF_SOUND = 343.0
SINC_TAPS = 64
SINC_PHASES = 64  # fractional delays are quantised to 1/64 sample
HIGHPASS_HZ = 100.0


class GeometryError(ValueError):
    pass


def absorption(dims, rt60: float, rule: str = "eyring") -> float:
    """Uniform energy absorption coefficient that gives ``rt60`` in a room of ``dims``.

    ``sabine``: alpha = k V / (S T); ``eyring``: alpha = 1 - exp(-k V / (S T)),
    with k = 24 ln(10) / c.
    """
    a, b, c = dims
    volume = a * b * c
    surface = 2.0 * (a * b + a * c + b * c)
    k = 24.0 * math.log(10.0) / SPEED_OF_SOUND
    x = k * volume / (surface * rt60)
    if rule == "sabine":
        alpha = x
    elif rule == "eyring":
        alpha = 1.0 - math.exp(-x)
    else:
        raise ValueError(f"unknown absorption rule {rule!r}")
    if not 0.0 < alpha <= 1.0:
        raise GeometryError(f"rt60={rt60} s is not reachable in a {dims} room (alpha={alpha:.3f})")
    return alpha


def reflection_coefficient(dims, rt60: float, rule: str = "calibrated", fs: int = 16000) -> float:
    """Wall pressure reflection coefficient for a target ``rt60``.

    ``sabine`` / ``eyring`` invert the diffuse-field formulas. ``calibrated``
    (default) starts from Eyring and adjusts beta until the Schroeder decay of
    the image-source energy response (source at the room centre, reference mic
    offset by a quarter of the floor dimensions) has the target T30; the
    diffuse formulas overestimate the decay rate of flat and elongated rooms.
    """
    if rule != "calibrated":
        return math.sqrt(1.0 - absorption(dims, rt60, rule))
    return _calibrated_beta(tuple(float(x) for x in dims), float(rt60), int(fs))


@lru_cache(maxsize=512)
def _calibrated_beta(dims, rt60: float, fs: int) -> float:
    a, b, c = dims
    src = (a / 2, b / 2, c / 2)
    mic = (a / 2 + a / 4, b / 2 + b / 4, c / 2)
    bin_len = 16
    n_bins = -(-int(math.ceil(1.5 * rt60 * fs)) // bin_len)
    table = _energy_table(dims, src, mic, n_bins * bin_len / fs * SPEED_OF_SOUND, bin_len * SPEED_OF_SOUND / fs, n_bins)
    powers = np.arange(table.shape[1])
    log_beta = math.log(math.sqrt(1.0 - absorption(dims, rt60, "eyring")))
    for _ in range(30):
        energy = table @ np.exp(2.0 * log_beta * powers)
        est = schroeder_rt60(energy, fs / bin_len, energy_input=True)
        if abs(est / rt60 - 1.0) < 1e-3:
            break
        # decay rate is close to proportional to -log(beta)
        log_beta *= est / rt60
    return math.exp(log_beta)


def _energy_table(dims, src, mic, reach, bin_width, n_bins):
    """``(time bin, wall hits)`` sums of ``1 / (4 pi d)^2`` over images within ``reach``."""
    (ox, hx), (oy, hy), (oz, hz) = (_axis_images(L, s, m, reach) for L, s, m in zip(dims, src, mic))
    yz2 = (oy[:, None] ** 2 + oz[None, :] ** 2).ravel()
    yzh = (hy[:, None] + hz[None, :]).ravel()
    max_hits = int(hx.max() + yzh.max()) + 1
    table = np.zeros(n_bins * max_hits)
    for x, hxi in zip(ox, hx):
        d = np.sqrt(x * x + yz2)
        ok = d < reach
        d = d[ok]
        key = (d / bin_width).astype(np.int64) * max_hits + hxi + yzh[ok]
        table += np.bincount(key, weights=1.0 / (4.0 * math.pi * d) ** 2, minlength=table.size)
    return table.reshape(n_bins, max_hits)


def _inside(dims, p) -> bool:
    return all(0.0 < x < d for x, d in zip(p, dims))


def _axis_images(length: float, src: float, mic: float, reach: float):
    """1-D image offsets ``u - mic`` and their wall-hit counts along one axis.

    Image coordinate ``u = 2 n L + (1 - 2 q) src`` hits walls ``|n - q| + |n|`` times.
    """
    n_max = int(math.ceil(reach / (2.0 * length))) + 1
    n = np.arange(-n_max, n_max + 1)
    offs, hits = [], []
    for q in (0, 1):
        offs.append(2.0 * n * length + (1 - 2 * q) * src - mic)
        hits.append(np.abs(n - q) + np.abs(n))
    offs, hits = np.concatenate(offs), np.concatenate(hits)
    keep = np.abs(offs) <= reach
    return offs[keep], hits[keep]


def _sinc_bank() -> np.ndarray:
    """``(phases, taps)`` windowed-sinc filters; phase p delays by ``p / phases`` sample."""
    half = SINC_TAPS // 2
    m = np.arange(SINC_TAPS)[None, :] - (half - 1) - np.arange(SINC_PHASES)[:, None] / SINC_PHASES
    return np.sinc(m) * (0.5 + 0.5 * np.cos(np.pi * m / half))


_BANK = _sinc_bank()


def rir_length(rt60: float, fs: int = 16000) -> int:
    return int(math.ceil(rt60 * fs))


def simulate_rir(dims, source, mic, rt60: float, fs: int = 16000, beta: float | None = None,
                 length: int | None = None, rule: str = "calibrated",
                 highpass: float | None = HIGHPASS_HZ) -> np.ndarray:
    """Impulse response from ``source`` to ``mic`` (metres) in a shoebox of ``dims``.

    Each image contributes ``beta**hits / (4 pi d)`` at delay ``d / c``, placed
    with a windowed-sinc fractional-delay filter. ``beta`` overrides the
    coefficient derived from ``rt60`` (``beta=0`` leaves the direct path only).
    A causal 2nd-order high-pass at ``highpass`` Hz removes the DC build-up of
    the all-positive image train; ``None`` skips it.
    """
    dims = tuple(float(x) for x in dims)
    source = tuple(float(x) for x in source)
    mic = tuple(float(x) for x in mic)
    if not _inside(dims, source) or not _inside(dims, mic):
        raise GeometryError("source and microphone must lie strictly inside the room")
    if math.dist(source, mic) < 1e-9:
        raise GeometryError("source and microphone coincide")
    if beta is None:
        if not 0.3 <= rt60 <= 1.3 + 1e-12:
            raise GeometryError(f"rt60 {rt60} outside [0.3, 1.3] s")
        beta = reflection_coefficient(dims, rt60, rule, fs)
    n = rir_length(rt60, fs) if length is None else int(length)
    half = SINC_TAPS // 2
    reach = (n + half) * SPEED_OF_SOUND / fs
    axes = [_axis_images(L, s, m, reach) for L, s, m in zip(dims, source, mic)]
    (ox, hx), (oy, hy), (oz, hz) = axes
    yz2 = (oy[:, None] ** 2 + oz[None, :] ** 2).ravel()
    yzh = (hy[:, None] + hz[None, :]).ravel()
    n_slots = n + SINC_TAPS
    acc = np.zeros(n_slots * SINC_PHASES)
    for x, hxi in zip(ox, hx):
        d = np.sqrt(x * x + yz2)
        ok = d <= reach
        if not ok.any():
            continue
        d = d[ok]
        amp = np.power(beta, hxi + yzh[ok]) / (4.0 * math.pi * d)
        tau = d * (fs / SPEED_OF_SOUND)
        slot = np.rint(tau * SINC_PHASES).astype(np.int64)  # integer part * phases + phase
        acc += np.bincount(slot, weights=amp, minlength=acc.size)[: acc.size]
    grid = acc.reshape(n_slots, SINC_PHASES)
    taps = grid @ _BANK  # (slots, taps): contribution of integer delay i to sample i + k - (half - 1)
    out = np.zeros(n_slots + SINC_TAPS)
    for k in range(SINC_TAPS):
        out[k : k + n_slots] += taps[:, k]
    start = half - 1
    h = out[start : start + n]
    if highpass:
        h = sosfilt(butter(2, highpass, "highpass", fs=fs, output="sos"), h)
    return h


def schroeder_curve(h: np.ndarray, energy_input: bool = False) -> np.ndarray:
    """Energy decay curve in dB (0 dB at t = 0) by backward integration."""
    e = np.asarray(h, dtype=np.float64)
    e = np.cumsum((e if energy_input else e**2)[::-1])[::-1]
    if e[0] <= 0:
        raise ValueError("impulse response has no energy")
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(e / e[0])


def schroeder_rt60(h: np.ndarray, fs: float = 16000, fit: tuple[float, float] = (-5.0, -35.0),
                   energy_input: bool = False) -> float:
    """RT60 from a least-squares line through the decay curve between ``fit`` levels (T30 default).

    ``energy_input`` means ``h`` already holds squared samples (or binned energies).
    """
    edc = schroeder_curve(h, energy_input)
    hi, lo = fit
    idx = np.nonzero((edc <= hi) & (edc >= lo))[0]
    if len(idx) < 2 or edc[-1] > lo:
        raise ValueError(f"decay curve does not span {hi}..{lo} dB")
    slope, _ = np.polyfit(idx / fs, edc[idx], 1)
    return -60.0 / slope
