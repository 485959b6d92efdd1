"""Partial observations of an occupancy grid from a fixed planar range sensor."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class SensorConfig:
    noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1], got {self.noise_rate}")


@dataclass
class Observation:
    """Visibility channel ``v`` and observed occupancy ``r``, both uint8 (H, W)."""

    v: np.ndarray
    r: np.ndarray

    @classmethod
    def empty(cls, shape) -> "Observation":
        return cls(np.zeros(shape, np.uint8), np.zeros(shape, np.uint8))

    def stack(self, dtype=np.float32) -> np.ndarray:
        """Network input layout (H, W, 2) with channels [v, r]."""
        return np.stack([self.v, self.r], axis=-1).astype(dtype)


RAY_STEP = 0.05


def ray_cells(start, end, shape, step: float = RAY_STEP) -> np.ndarray:
    """Distinct in-grid cells hit by points sampled along start -> end.

    The segment is split into ceil(length / step) equal pieces and every piece
    boundary (both endpoints included) is assigned to its nearest cell. Rows of
    the result are (i, j) in order of first hit.
    """
    start = np.asarray(start, dtype=np.float64)
    end = np.asarray(end, dtype=np.float64)
    n = max(1, int(np.ceil(np.hypot(*(end - start)) / step)))
    s = np.arange(n + 1) / n
    pts = start + s[:, None] * (end - start)
    cells = np.floor(pts + 0.5).astype(np.int64)
    h, w = shape
    ok = (cells[:, 0] >= 0) & (cells[:, 0] < h) & (cells[:, 1] >= 0) & (cells[:, 1] < w)
    cells = cells[ok]
    _, first = np.unique(cells[:, 0] * w + cells[:, 1], return_index=True)
    return cells[np.sort(first)]


@lru_cache(maxsize=8)
def _blocking_matrix(shape: tuple[int, int], robot_pos: tuple[float, float]) -> sp.csr_matrix:
    """Row t lists the cells (other than t) crossed by the ray to cell t's centre."""
    h, w = shape
    rows, cols = [], []
    for i in range(h):
        for j in range(w):
            t = i * w + j
            flat = [a * w + b for a, b in ray_cells(robot_pos, (i, j), shape).tolist()]
            flat = [c for c in flat if c != t]
            rows.extend([t] * len(flat))
            cols.extend(flat)
    data = np.ones(len(rows), dtype=np.int32)
    return sp.csr_matrix((data, (rows, cols)), shape=(h * w, h * w))


def raycast_visibility(grid: np.ndarray, robot_pos) -> np.ndarray:
    """Binary (H, W) mask: 1 where the ray from the robot to the cell centre is unblocked.

    Occupied cells are themselves visible when nothing in front of them blocks
    the ray, so object surfaces facing the robot are observed.
    """
    shape = tuple(grid.shape)
    m = _blocking_matrix(shape, tuple(float(v) for v in robot_pos))
    blocked = m @ (np.asarray(grid).ravel() != 0).astype(np.int32)
    return (blocked == 0).astype(np.uint8).reshape(shape)


def encode_observation(grid: np.ndarray, mask: np.ndarray, config: SensorConfig,
                       frame_index: int = 0) -> Observation:
    """Build {v, r}: r = v AND y, then flip r on visible cells at ``noise_rate``.

    Noise is drawn from a generator seeded by (config.seed, frame_index).
    """
    v = (np.asarray(mask) != 0).astype(np.uint8)
    r = v & (np.asarray(grid) != 0).astype(np.uint8)
    if config.noise_rate > 0:
        rng = np.random.default_rng([config.seed, frame_index])
        flips = (rng.random(v.shape) < config.noise_rate).astype(np.uint8)
        r = r ^ (flips & v)
    return Observation(v, r)


def observe(grid: np.ndarray, robot_pos, config: SensorConfig, frame_index: int = 0) -> Observation:
    return encode_observation(grid, raycast_visibility(grid, robot_pos), config, frame_index)
