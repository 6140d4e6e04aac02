"""Declarative clip manifests and deterministic synthesis of evaluation sets.

Every random draw of a clip is recorded in its :class:`ClipManifest`;
:func:`render_clip` rebuilds the audio from a manifest alone, and
:func:`synth_set` is that renderer applied to freshly drawn manifests.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from tvase import audio
from tvase.numerics import Rng
from tvase.scenario import room as _room
from tvase.scenario import signals as sig

MANIFEST_NAME = "manifest.json"
SOURCE_LEVEL_DB = -26.0


class SourceError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    varying_rir: bool
    dynamic_delay: bool
    base_delay_ms: tuple[float, float] = (0.0, 100.0)
    extra_delay_ms: float = 20.0
    ser_db: tuple[float, ...] = (0.0, 3.5, 7.0)
    snr_db: float | None = None  # None: no noise
    ser_range: tuple[float, float] | None = None  # set: one clip per pair at a drawn SER
    snr_range: tuple[float, float] | None = None
    nonlinear_fraction: float = 0.5
    clip_seconds: float | None = None
    nearend_onset: tuple[float, float] = (0.25, 0.5)  # fraction of the clip before near-end speech

    def to_dict(self) -> dict:
        return asdict(self)


SCENARIOS = {
    "time-invariant": ScenarioSpec("time-invariant", varying_rir=False, dynamic_delay=False),
    "variant-delay-only": ScenarioSpec("variant-delay-only", varying_rir=False, dynamic_delay=True),
    "variant-RIR-only": ScenarioSpec("variant-RIR-only", varying_rir=True, dynamic_delay=False),
    "variant-delay-and-RIR": ScenarioSpec("variant-delay-and-RIR", varying_rir=True, dynamic_delay=True),
}


def scenario_spec(name: str, profile: str = "test", **overrides) -> ScenarioSpec:
    """Named scenario; ``profile="train"`` switches to the training-data ranges."""
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    spec = SCENARIOS[name]
    if profile == "train":
        spec = replace(spec, base_delay_ms=(0.0, 900.0), nonlinear_fraction=0.8,
                       ser_range=(-15.0, 15.0), snr_range=(-5.0, 20.0))
    elif profile != "test":
        raise ValueError(f"unknown profile {profile!r}")
    return replace(spec, **overrides)


@dataclass
class ClipManifest:
    clip_id: str
    scenario: str
    pair: int
    room_id: int
    room_dims: list
    rt60: float
    trajectory_seed: int
    rir_start: int
    varying_rir: bool
    delay_schedule: dict
    nonlinear: bool
    ser_db: float | None
    snr_db: float | None
    n_samples: int
    nearend_onset: int
    sources: dict  # farend, nearend, noise (paths as given), noise_offset
    paths: dict = field(default_factory=dict)  # farend, echo, nearend, noise, mic, target
    single_talk: list = field(default_factory=list)  # [[start, stop), ...] in 10-ms frames
    master_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClipManifest":
        return cls(**d)

    def labels(self) -> np.ndarray:
        return audio.segments_to_mask(self.single_talk, self.n_samples // audio.FRAME)


def dumps_set(spec: ScenarioSpec | None, master_seed: int, clips: list[ClipManifest]) -> str:
    doc = {
        "master_seed": master_seed,
        "scenario": None if spec is None else spec.to_dict(),
        "clips": [c.to_dict() for c in clips],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def load_set(path) -> tuple[dict, list[ClipManifest]]:
    doc = json.loads(Path(path).read_text())
    return doc, [ClipManifest.from_dict(c) for c in doc["clips"]]


# ---------------------------------------------------------------------------
# rendering


def normalize_level(x: np.ndarray, level_db: float = SOURCE_LEVEL_DB) -> np.ndarray:
    """Scale so frames within 40 dB of the loudest frame have ``level_db`` mean power."""
    x = np.asarray(x, dtype=np.float64)
    db = audio.frame_rms_db(x)
    if db.size == 0 or not np.isfinite(db.max()):
        raise SourceError("source is silent or shorter than one frame")
    mask = audio.frames_to_samples(db >= db.max() - 40.0, len(x))
    p = np.mean(x[mask] ** 2)
    return x * (10.0 ** (level_db / 20.0) / math.sqrt(p))


def _fit(x: np.ndarray, n: int) -> np.ndarray:
    return x[:n] if len(x) >= n else np.concatenate([x, np.zeros(n - len(x))])


def _load(path, cache):
    if cache is not None and path in cache:
        return cache[path]
    x = audio.read_wav(path)
    if cache is not None:
        cache[path] = x
    return x


def echo_rirs(m: ClipManifest, cache: dict | None = None, fs: int = audio.SAMPLE_RATE) -> list[np.ndarray]:
    key = ("rir", m.room_id, m.rt60, m.trajectory_seed, m.rir_start, m.varying_rir, m.n_samples)
    if cache is not None and key in cache:
        return cache[key]
    room = _room.make_room(m.room_id, m.rt60)
    traj = _room.make_trajectory(room, Rng(m.trajectory_seed).stream(0))
    n = sig.n_segments(m.n_samples, m.delay_schedule["segment"]) if m.varying_rir else 1
    if m.rir_start + n > len(traj.positions):
        raise sig.ScheduleError("clip needs more trajectory positions than available")
    rirs = [room.rir(traj.positions[m.rir_start + k], fs) for k in range(n)]
    if cache is not None:
        cache[key] = rirs
    return rirs


def render_clip(m: ClipManifest, cache: dict | None = None) -> dict[str, np.ndarray]:
    """All signals of a clip from its manifest: farend, echo, nearend, noise, mic, target."""
    n = m.n_samples
    far = _fit(normalize_level(_load(m.sources["farend"], cache)), n)
    near_src = normalize_level(_load(m.sources["nearend"], cache))
    near = _fit(np.concatenate([np.zeros(m.nearend_onset), near_src]), n)
    noise = None
    if m.sources.get("noise"):
        raw = _load(m.sources["noise"], cache)
        reps = -(-(m.sources["noise_offset"] + n) // len(raw))
        noise = np.tile(raw, reps)[m.sources["noise_offset"] : m.sources["noise_offset"] + n]
    loud = sig.nonlinear_distort(far) if m.nonlinear else far
    schedule = sig.DelaySchedule.from_dict(m.delay_schedule)
    echo = sig.render_echo(loud, echo_rirs(m, cache), schedule, schedule.segment)
    s, d, v = sig.scale_components(near, echo, noise, m.ser_db, m.snr_db)
    return {"farend": far, "echo": d, "nearend": s, "noise": v, "mic": s + d + v, "target": s.copy()}


# ---------------------------------------------------------------------------
# set synthesis


def _clip_id(spec: ScenarioSpec, pair: int, ser) -> str:
    if spec.ser_range is not None:
        return f"{spec.name}_{pair:04d}"
    return f"{spec.name}_{pair:04d}_ser{ser:g}"


def draw_pair(spec: ScenarioSpec, pair: int, master_seed: int, far_files, near_files, noise_files,
              lengths: dict) -> list[ClipManifest]:
    """Manifests (one per SER) for source pair ``pair``; every draw comes from ``(master_seed, pair)``."""
    rng = Rng(master_seed).stream(pair)
    far_path = str(far_files[int(rng.integers(len(far_files)))])
    near_path = str(near_files[int(rng.integers(len(near_files)))])
    n = lengths[far_path]
    if spec.clip_seconds is not None:
        n = min(n, int(round(spec.clip_seconds * audio.SAMPLE_RATE)))
    room_id = int(rng.integers(len(_room.room_grid())))
    rt60 = float(rng.uniform(*_room.RT60_RANGE))
    traj_seed = int(rng.integers(2**31 - 1))
    n_seg = sig.n_segments(n)
    if spec.varying_rir and n_seg > _room.N_POSITIONS:
        raise SourceError(f"clip of {n} samples needs more than {_room.N_POSITIONS} RIRs")
    rir_start = int(rng.integers(_room.N_POSITIONS - (n_seg if spec.varying_rir else 1) + 1))
    schedule = sig.make_delay_schedule(rng, n, spec.dynamic_delay, spec.base_delay_ms, spec.extra_delay_ms)
    nonlinear = bool(rng.random() < spec.nonlinear_fraction)
    onset = int(rng.uniform(*spec.nearend_onset) * n) // audio.FRAME * audio.FRAME
    sources = {"farend": far_path, "nearend": near_path, "noise": None, "noise_offset": 0}
    if spec.snr_db is not None or spec.snr_range is not None:
        if not noise_files:
            raise SourceError("a noise level is requested but no noise sources were given")
        sources["noise"] = str(noise_files[int(rng.integers(len(noise_files)))])
        sources["noise_offset"] = int(rng.integers(max(1, lengths[sources["noise"]])))
    if spec.ser_range is not None:
        sers = [float(rng.uniform(*spec.ser_range))]
    else:
        sers = [float(s) for s in spec.ser_db]
    if spec.snr_range is not None:
        snr = float(rng.uniform(*spec.snr_range))
    else:
        snr = None if spec.snr_db is None else float(spec.snr_db)
    return [
        ClipManifest(
            clip_id=_clip_id(spec, pair, ser), scenario=spec.name, pair=pair, room_id=room_id,
            room_dims=list(_room.room_grid()[room_id]), rt60=rt60, trajectory_seed=traj_seed,
            rir_start=rir_start, varying_rir=spec.varying_rir, delay_schedule=schedule.to_dict(),
            nonlinear=nonlinear, ser_db=ser, snr_db=snr, n_samples=n, nearend_onset=onset,
            sources=dict(sources), master_seed=master_seed,
        )
        for ser in sers
    ]


def _worker_count(workers: int | None) -> int:
    if workers is not None:
        return max(1, workers)
    env = os.environ.get("TVASE_THREADS")
    return max(1, int(env)) if env else 1


def synth_set(spec: ScenarioSpec, far_files, near_files, out_dir, master_seed: int, n_pairs: int,
              noise_files=(), workers: int | None = None) -> list[ClipManifest]:
    """Draw, render and write ``n_pairs`` source pairs (each across the SER list) plus a manifest."""
    far_files, near_files, noise_files = list(far_files), list(near_files), list(noise_files or ())
    if not far_files or not near_files:
        raise SourceError("far-end and near-end source lists must be non-empty")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    # load every source up front; worker threads then only read the cache
    lengths = {str(p): len(_load(str(p), cache)) for p in far_files + near_files + noise_files}

    def one(pair: int) -> list[ClipManifest]:
        clips = draw_pair(spec, pair, master_seed, far_files, near_files, noise_files, lengths)
        for m in clips:
            sigs = render_clip(m, cache)
            m.single_talk = audio.mask_to_segments(sig.single_talk_labels(sigs["nearend"], sigs["echo"]))
            for kind, x in sigs.items():
                if kind == "noise" and m.sources["noise"] is None:
                    m.paths[kind] = None
                    continue
                name = f"{m.clip_id}_{kind}.wav"
                audio.write_wav(out_dir / name, x)
                m.paths[kind] = name
        return clips

    with ThreadPoolExecutor(_worker_count(workers)) as pool:
        results = list(pool.map(one, range(n_pairs)))
    clips = [m for group in results for m in group]
    (out_dir / MANIFEST_NAME).write_text(dumps_set(spec, master_seed, clips))
    return clips
