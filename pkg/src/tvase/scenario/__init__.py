"""Synthetic time-variant echo scenarios: rooms, trajectories, echo rendering, mixing, set synthesis."""
from tvase.scenario.rir import GeometryError, schroeder_rt60, simulate_rir
from tvase.scenario.room import Room, Trajectory, make_room, make_trajectory, room_grid
from tvase.scenario.signals import (
    DelaySchedule,
    LevelError,
    ScheduleError,
    make_delay_schedule,
    mix,
    nonlinear_distort,
    render_echo,
    scale_components,
    single_talk_labels,
)
from tvase.scenario.synth import (
    SCENARIOS,
    ClipManifest,
    ScenarioSpec,
    SourceError,
    load_set,
    render_clip,
    scenario_spec,
    synth_set,
)
