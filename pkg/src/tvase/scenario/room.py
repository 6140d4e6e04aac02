"""Room grid and moving-microphone trajectories."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from tvase.scenario import rir as _rir

LENGTHS = (5.0, 7.0, 9.0, 11.0, 13.0)
WIDTHS = (4.0, 6.0, 8.0, 10.0)
HEIGHTS = (2.5, 3.5, 4.5)
RT60_RANGE = (0.3, 1.3)
N_POSITIONS = 400
MAX_STEP = 0.025
MIN_STEP_NORM = 0.01


@dataclass(frozen=True)
class Room:
    room_id: int
    dims: tuple[float, float, float]
    rt60: float

    def __post_init__(self):
        if not RT60_RANGE[0] <= self.rt60 <= RT60_RANGE[1]:
            raise ValueError(f"rt60 {self.rt60} outside {RT60_RANGE}")

    @property
    def source(self) -> tuple[float, float, float]:
        a, b, c = self.dims
        return (a / 2, b / 2, c / 2)

    def rir(self, mic, fs: int = 16000) -> np.ndarray:
        return _rir.simulate_rir(self.dims, self.source, mic, self.rt60, fs)


def room_grid() -> list[tuple[float, float, float]]:
    """The 60 room sizes, indexed by room id."""
    return list(itertools.product(LENGTHS, WIDTHS, HEIGHTS))


def make_room(room_id: int, rt60: float) -> Room:
    grid = room_grid()
    if not 0 <= room_id < len(grid):
        raise ValueError(f"room id {room_id} outside 0..{len(grid) - 1}")
    return Room(room_id, grid[room_id], float(rt60))


@dataclass(frozen=True)
class Trajectory:
    positions: np.ndarray  # (N, 3)
    step: tuple[float, float]  # initial (da, db)


def make_trajectory(room: Room, rng: np.random.Generator, n: int = N_POSITIONS) -> Trajectory:
    """Microphone path at source height, leaving the source with a fixed step.

    The step ``(da, db)`` is drawn once from ``[-0.025, 0.025]^2`` (redrawn if
    shorter than 1 cm); a component's sign flips when the next step would leave
    the open floor rectangle. The first position is one step from the source.
    """
    while True:
        step = rng.uniform(-MAX_STEP, MAX_STEP, size=2)
        if np.hypot(*step) >= MIN_STEP_NORM:
            break
    a, b, c = room.dims
    lim = np.array([a, b])
    p = np.array(room.source[:2], dtype=np.float64)
    s = step.copy()
    out = np.empty((n, 3))
    out[:, 2] = c / 2
    for i in range(n):
        nxt = p + s
        bad = (nxt <= 0.0) | (nxt >= lim)
        s[bad] = -s[bad]
        p = p + s
        out[i, :2] = p
    return Trajectory(out, (float(step[0]), float(step[1])))
