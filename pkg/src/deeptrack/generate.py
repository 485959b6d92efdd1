"""Simulate sequences of (ground truth, observation) frames."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .sensor import SensorConfig, observe
from .sim import WorldConfig, WorldObject, init_world, rasterize, step_world


@dataclass
class SimulatedSequence:
    y: np.ndarray  # (T, H, W) uint8
    v: np.ndarray
    r: np.ndarray
    objects: list[list[WorldObject]] = field(default_factory=list)

    def observations(self) -> np.ndarray:
        return np.stack([self.v, self.r], axis=-1)


def simulate_sequence(world: WorldConfig, sensor: SensorConfig, length: int,
                      stream: int = 0, keep_objects: bool = False) -> SimulatedSequence:
    """One trajectory of ``length`` frames from world stream ``stream``."""
    if length < 1:
        raise ValueError("length must be positive")
    h, w = world.grid_h, world.grid_w
    y = np.zeros((length, h, w), np.uint8)
    v = np.zeros_like(y)
    r = np.zeros_like(y)
    objects = []
    state = init_world(world, stream)
    for t in range(length):
        if t:
            state = step_world(state, world)
        y[t] = rasterize(state, world)
        obs = observe(y[t], world.robot_pos, sensor, frame_index=stream * length + t)
        v[t], r[t] = obs.v, obs.r
        if keep_objects:
            objects.append(list(state.objects))
    return SimulatedSequence(y, v, r, objects)


def generate_dataset(world: WorldConfig, sensor: SensorConfig, n_sequences: int, length: int,
                     first_stream: int = 0, keep_objects: bool = False):
    """Dataset of ``n_sequences`` independent trajectories.

    Returns the Dataset, plus the SimulatedSequence records (with per-frame
    object lists) when ``keep_objects``.
    """
    seqs = [simulate_sequence(world, sensor, length, first_stream + k, keep_objects)
            for k in range(n_sequences)]
    if not seqs:
        ds = Dataset.empty(world.grid_h, world.grid_w, length)
    else:
        ds = Dataset.from_arrays(np.stack([s.v for s in seqs]), np.stack([s.r for s in seqs]),
                                 np.stack([s.y for s in seqs]))
    if keep_objects:
        return ds, seqs
    return ds
