"""Synthetic test material: speech-like sources and WAV corpora."""
from pathlib import Path

import numpy as np

from tvase import audio


def speechy(n: int, rng: np.random.Generator) -> np.ndarray:
    """Harmonic buzz with drifting pitch, breath noise, and syllable-rate on/off gating."""
    t = np.arange(n) / audio.SAMPLE_RATE
    f0 = rng.uniform(100, 220) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t + rng.uniform(0, 6)))
    phase = 2 * np.pi * np.cumsum(f0) / audio.SAMPLE_RATE
    x = sum(np.sin(k * phase + rng.uniform(0, 6)) / k for k in range(1, 8))
    x = x + 0.3 * rng.standard_normal(n)
    gate = (np.sin(2 * np.pi * rng.uniform(2, 5) * t) > -0.2).astype(float)
    return 0.3 * x * gate * (1 + 0.3 * np.sin(2 * np.pi * 0.7 * t))


def write_corpus(root, seed: int = 0, n_far: int = 3, n_near: int = 3, far_len: int = 32000,
                 near_len: int = 24000, noise: bool = False) -> dict:
    rng = np.random.default_rng(seed)
    root = Path(root)
    dirs = {k: root / k for k in ("far", "near") + (("noise",) if noise else ())}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    for i in range(n_far):
        audio.write_wav(dirs["far"] / f"f{i}.wav", speechy(far_len + 1000 * i, rng))
    for i in range(n_near):
        audio.write_wav(dirs["near"] / f"n{i}.wav", speechy(near_len, rng))
    if noise:
        audio.write_wav(dirs["noise"] / "v0.wav", 0.05 * rng.standard_normal(20000))
    return dirs
