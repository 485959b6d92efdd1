"""Ground-truth scene simulator.

Objects live on a continuous plane in cell coordinates: cell (i, j) has its
centre at (i, j) and covers [i - 0.5, i + 0.5] x [j - 0.5, j + 0.5]. Row 0 is
the top of the grid; the robot sits near the bottom centre and never moves.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

SHAPES = ("circle", "square")
MAX_PLACEMENT_ATTEMPTS = 10_000
# chance per step of an extra spawn while below max_objects
SPAWN_PROB = 0.05
ROBOT_CLEARANCE = 1.0


class InfeasibleConfigError(RuntimeError):
    """Raised when objects cannot be placed without overlap."""


@dataclass(frozen=True)
class WorldConfig:
    grid_h: int = 50
    grid_w: int = 50
    robot_pos: tuple[float, float] = (47.5, 25.0)
    min_objects: int = 2
    max_objects: int = 12
    radius_range: tuple[float, float] = (1.5, 3.0)
    speed_range: tuple[float, float] = (0.2, 0.8)
    shape: str = "circle"
    spawn_margin: float = 5.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "robot_pos", tuple(float(v) for v in self.robot_pos))
        object.__setattr__(self, "radius_range", tuple(float(v) for v in self.radius_range))
        object.__setattr__(self, "speed_range", tuple(float(v) for v in self.speed_range))
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid dimensions must be positive")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ValueError(f"need 0 <= min_objects <= max_objects, got "
                             f"{self.min_objects}, {self.max_objects}")
        for name in ("radius_range", "speed_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be a positive interval, got {(lo, hi)}")
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if self.spawn_margin < 0:
            raise ValueError("spawn_margin must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "WorldConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown WorldConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class WorldObject:
    center: tuple[float, float]
    velocity: tuple[float, float]
    radius: float
    shape: str = "circle"
    id: int = 0

    @property
    def extent(self) -> float:
        """Radius of the disc enclosing the object's footprint."""
        return self.radius * math.sqrt(2.0) if self.shape == "square" else self.radius


@dataclass
class WorldState:
    objects: list[WorldObject]
    time: int
    rng: np.random.Generator = field(repr=False)
    next_id: int = 0

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return (self.objects == other.objects and self.time == other.time
                and self.next_id == other.next_id
                and self.rng.bit_generator.state == other.rng.bit_generator.state)


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _clear_of_robot(center, extent, config: WorldConfig) -> bool:
    return _dist(center, config.robot_pos) > extent + ROBOT_CLEARANCE


def _clear_of(center, extent, others) -> bool:
    return all(_dist(center, o.center) > extent + o.extent for o in others)


def _random_velocity(rng, config, heading=None):
    if heading is None:
        heading = rng.uniform(0.0, 2.0 * math.pi)
    speed = rng.uniform(*config.speed_range)
    return (speed * math.sin(heading), speed * math.cos(heading))


def world_rng(config: WorldConfig, stream: int = 0) -> np.random.Generator:
    """PCG64 generator seeded from (seed, stream); streams give independent worlds."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(stream,))))


def init_world(config: WorldConfig, stream: int = 0) -> WorldState:
    """Place a uniformly drawn number of objects inside the grid without overlap."""
    rng = world_rng(config, stream)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects: list[WorldObject] = []
    for k in range(n):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            radius = rng.uniform(*config.radius_range)
            center = (rng.uniform(-0.5, config.grid_h - 0.5), rng.uniform(-0.5, config.grid_w - 0.5))
            obj = WorldObject(center, (0.0, 0.0), radius, config.shape, k)
            if _clear_of_robot(center, obj.extent, config) and _clear_of(center, obj.extent, objects):
                objects.append(replace(obj, velocity=_random_velocity(rng, config)))
                break
        else:
            raise InfeasibleConfigError(
                f"could not place object {k + 1} of {n} after {MAX_PLACEMENT_ATTEMPTS} attempts")
    return WorldState(objects, 0, rng, n)


def _ring_bounds(config: WorldConfig):
    m = config.spawn_margin
    return (-0.5 - m, config.grid_h - 0.5 + m, -0.5 - m, config.grid_w - 0.5 + m)


def _inside_ring(center, config) -> bool:
    r0, r1, c0, c1 = _ring_bounds(config)
    return r0 <= center[0] <= r1 and c0 <= center[1] <= c1


def _spawn(state: WorldState, config: WorldConfig) -> WorldObject:
    """New object on the margin ring, heading at the grid centre +-45 degrees."""
    rng = state.rng
    r0, r1, c0, c1 = _ring_bounds(config)
    h, w = r1 - r0, c1 - c0
    mid = ((config.grid_h - 1) / 2.0, (config.grid_w - 1) / 2.0)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        s = rng.uniform(0.0, 2.0 * (h + w))
        if s < w:
            center = (r0, c0 + s)
        elif s < w + h:
            center = (r0 + s - w, c1)
        elif s < 2 * w + h:
            center = (r1, c1 - (s - w - h))
        else:
            center = (r1 - (s - 2 * w - h), c0)
        radius = rng.uniform(*config.radius_range)
        heading = math.atan2(mid[0] - center[0], mid[1] - center[1])
        heading += rng.uniform(-math.pi / 4, math.pi / 4)
        obj = WorldObject(center, _random_velocity(rng, config, heading), radius,
                          config.shape, state.next_id)
        if _clear_of_robot(center, obj.extent, config) and _clear_of(center, obj.extent, state.objects):
            state.next_id += 1
            return obj
    raise InfeasibleConfigError(f"could not spawn an object after {MAX_PLACEMENT_ATTEMPTS} attempts")


def _first_conflict(center, obj: WorldObject, others, config):
    """Centre of the first obstacle (robot or object) the footprint would hit, else None."""
    if not _clear_of_robot(center, obj.extent, config):
        return config.robot_pos
    for o in others:
        if _dist(center, o.center) <= obj.extent + o.extent:
            return o.center
    return None


def step_world(state: WorldState, config: WorldConfig) -> WorldState:
    """Advance one step: move, bounce, despawn, spawn. The input state is left untouched."""
    rng = copy.deepcopy(state.rng)
    objs = list(state.objects)
    for i, obj in enumerate(objs):
        others = objs[:i] + objs[i + 1:]
        cy, cx = obj.center
        vy, vx = obj.velocity
        hit = _first_conflict((cy + vy, cx + vx), obj, others, config)
        if hit is not None:
            ny, nx = hit[0] - cy, hit[1] - cx
            norm = math.hypot(ny, nx)
            ny, nx = ny / norm, nx / norm
            dot = vy * ny + vx * nx
            if dot > 0:
                vy, vx = vy - 2 * dot * ny, vx - 2 * dot * nx
            if _first_conflict((cy + vy, cx + vx), obj, others, config) is None:
                cy, cx = cy + vy, cx + vx
        else:
            cy, cx = cy + vy, cx + vx
        objs[i] = replace(obj, center=(cy, cx), velocity=(vy, vx))

    new = WorldState([o for o in objs if _inside_ring(o.center, config)],
                     state.time + 1, rng, state.next_id)
    while len(new.objects) < config.min_objects:
        new.objects.append(_spawn(new, config))
    if len(new.objects) < config.max_objects and rng.random() < SPAWN_PROB:
        new.objects.append(_spawn(new, config))
    return new


def rasterize_objects(objects, config: WorldConfig) -> np.ndarray:
    """One binary (H, W) footprint per object, stacked along axis 0."""
    ii = np.arange(config.grid_h, dtype=np.float64)[:, None]
    jj = np.arange(config.grid_w, dtype=np.float64)[None, :]
    out = np.zeros((len(objects), config.grid_h, config.grid_w), dtype=np.uint8)
    for k, o in enumerate(objects):
        dy, dx = ii - o.center[0], jj - o.center[1]
        if o.shape == "square":
            inside = np.maximum(np.abs(dy), np.abs(dx)) <= o.radius
        else:
            inside = dy * dy + dx * dx <= o.radius * o.radius
        out[k] = inside
    return out


def rasterize(state: WorldState, config: WorldConfig) -> np.ndarray:
    """Binary occupancy grid: a cell is set iff its centre lies inside some object."""
    if not state.objects:
        return np.zeros((config.grid_h, config.grid_w), dtype=np.uint8)
    return rasterize_objects(state.objects, config).max(axis=0)


def check_invariants(state: WorldState, config: WorldConfig) -> list[str]:
    """Brute-force scan of the world invariants; returns human-readable violations."""
    problems = []
    n = len(state.objects)
    if not config.min_objects <= n <= config.max_objects:
        problems.append(f"object count {n} outside [{config.min_objects}, {config.max_objects}]")
    for i, a in enumerate(state.objects):
        if _dist(a.center, config.robot_pos) <= a.radius + ROBOT_CLEARANCE:
            problems.append(f"object {a.id} overlaps the robot")
        for b in state.objects[i + 1:]:
            if _dist(a.center, b.center) <= a.radius + b.radius:
                problems.append(f"objects {a.id} and {b.id} overlap")
    return problems
