"""Procedural gridworld ObjectNav environment.

Houses are small rectangular grids split into rooms by recursive division.
The agent has a pose (cell + one of four headings), sees an egocentric
``view_depth x view_width`` window with wall occlusion, and must emit ``end``
while an instance of the target category is visible and within
``success_radius`` geodesic steps.

Reward per step::

    -0.01                      step penalty
    + 10   if the step ends the episode successfully
    + max(0, d_prev - d_now)   geodesic progress toward the nearest target

Coordinates are ``(x, y)`` with ``y`` growing downward (row index).
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

STEP_PENALTY = -0.01
SUCCESS_REWARD = 10.0

# Ego-view cell labels. Objects are OBJECT_BASE + category.
UNKNOWN, WALL, FREE, OBJECT_BASE = 0, 1, 2, 3

INF = math.inf


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


# (dx, dy) per heading
HEADING_VECTORS = ((0, -1), (1, 0), (0, 1), (-1, 0))


class NavAction(IntEnum):
    MOVE_AHEAD = 0
    MOVE_BACK = 1
    ROTATE_LEFT = 2
    ROTATE_RIGHT = 3
    END = 4


N_ACTIONS = len(NavAction)

# Expert tie-break order among equally short plans.
EXPERT_PREFERENCE = (
    NavAction.MOVE_AHEAD,
    NavAction.ROTATE_LEFT,
    NavAction.ROTATE_RIGHT,
    NavAction.MOVE_BACK,
)


class GenerationError(RuntimeError):
    """House generation gave up after the retry budget."""


class EpisodeDone(RuntimeError):
    """step() called on a finished episode."""


@dataclass(frozen=True)
class HouseParams:
    size: int = 16
    room_count: tuple[int, int] = (2, 5)
    min_room: int = 3
    object_density: float = 0.06
    n_categories: int = 12
    landmark_fraction: float = 0.5
    target_instances: tuple[int, int] = (1, 2)
    target_category: int | None = None
    min_start_distance: int = 4
    success_radius: int = 4
    view_depth: int = 7
    view_width: int = 5
    max_retries: int = 64

    @property
    def n_landmark_categories(self) -> int:
        return int(round(self.landmark_fraction * self.n_categories))

    def is_landmark(self, category: int) -> bool:
        return category < self.n_landmark_categories

    @classmethod
    def from_dict(cls, d: dict) -> "HouseParams":
        d = dict(d)
        for key in ("room_count", "target_instances"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class AgentPose:
    x: int
    y: int
    heading: Heading

    @property
    def cell(self) -> tuple[int, int]:
        return (self.x, self.y)

    def as_list(self) -> list[int]:
        return [self.x, self.y, int(self.heading)]


@dataclass(frozen=True)
class Observation:
    ego_view: np.ndarray  # (view_depth, view_width) int8 labels; row 0 is the cell ahead
    target_category: int

    def __eq__(self, other):
        return (
            isinstance(other, Observation)
            and self.target_category == other.target_category
            and np.array_equal(self.ego_view, other.ego_view)
        )


@dataclass(frozen=True, eq=False)
class GridHouse:
    width: int
    height: int
    walls: np.ndarray  # (height, width) bool
    objects: tuple[tuple[int, int, int, bool], ...]  # (x, y, category, is_landmark)
    target_category: int
    start_pose: AgentPose
    seed: int
    params: HouseParams = field(default_factory=HouseParams)

    # ------------------------------------------------------------------ derived
    @cached_property
    def object_grid(self) -> np.ndarray:
        """Category per cell, -1 where empty."""
        grid = np.full((self.height, self.width), -1, dtype=np.int16)
        for x, y, cat, _ in self.objects:
            grid[y, x] = cat
        return grid

    @cached_property
    def target_cells(self) -> frozenset[tuple[int, int]]:
        return frozenset((x, y) for x, y, cat, _ in self.objects if cat == self.target_category)

    @cached_property
    def target_distance(self) -> np.ndarray:
        """Geodesic distance from every cell to the nearest target (inf if unreachable)."""
        return _bfs_field(self.walls, self.target_cells)

    @cached_property
    def view_table(self) -> np.ndarray:
        """Precomputed ego views, indexed ``[heading, y, x]`` -> (depth, width) labels."""
        return _view_table(self.walls, self.object_grid, self.params)

    @cached_property
    def goal_states(self) -> np.ndarray:
        """``[heading, y, x]`` True where ``end`` would succeed."""
        tgt = OBJECT_BASE + self.target_category
        visible = (self.view_table == tgt).any(axis=(3, 4))
        close = self.target_distance <= self.params.success_radius
        return visible & close[None] & ~self.walls[None]

    @cached_property
    def cost_to_go(self) -> np.ndarray:
        """Fewest move/rotate actions from ``[heading, y, x]`` to a goal state."""
        return _cost_to_go(self.walls, self.goal_states)

    # -------------------------------------------------------------- queries
    def is_free(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and not self.walls[y, x]

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(~self.walls)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def observe(self, pose: AgentPose) -> Observation:
        view = self.view_table[pose.heading, pose.y, pose.x]
        return Observation(view.copy(), self.target_category)

    def to_record(self) -> dict:
        return {
            "seed": int(self.seed),
            "params": asdict(self.params),
            "grid": ["".join("#" if w else "." for w in row) for row in self.walls],
            "objects": [[x, y, c, bool(lm)] for x, y, c, lm in self.objects],
            "target": int(self.target_category),
            "start": self.start_pose.as_list(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GridHouse":
        walls = np.array([[ch == "#" for ch in row] for row in rec["grid"]], dtype=bool)
        x, y, h = rec["start"]
        return cls(
            width=walls.shape[1],
            height=walls.shape[0],
            walls=walls,
            objects=tuple((int(a), int(b), int(c), bool(d)) for a, b, c, d in rec["objects"]),
            target_category=int(rec["target"]),
            start_pose=AgentPose(int(x), int(y), Heading(h)),
            seed=int(rec["seed"]),
            params=HouseParams.from_dict(rec["params"]),
        )

    def __eq__(self, other):
        return isinstance(other, GridHouse) and self.to_record() == other.to_record()

    __hash__ = None


def save_houses(path, houses: Iterable[GridHouse]) -> None:
    with open(path, "w") as f:
        for h in houses:
            f.write(json.dumps(h.to_record(), sort_keys=True) + "\n")


def load_houses(path) -> list[GridHouse]:
    with open(path) as f:
        return [GridHouse.from_record(json.loads(line)) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# generation


class _Retry(Exception):
    pass


def generate_house(seed: int, params: HouseParams | None = None) -> GridHouse:
    """Build a house deterministically from ``(seed, params)``.

    Raises GenerationError when no valid house is found within
    ``params.max_retries`` attempts (e.g. zero target instances requested).
    """
    params = params or HouseParams()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    for _ in range(params.max_retries):
        try:
            return _try_generate(rng, int(seed), params)
        except _Retry:
            continue
    raise GenerationError(f"no valid house for seed={seed} after {params.max_retries} attempts")


def _try_generate(rng: np.random.Generator, seed: int, params: HouseParams) -> GridHouse:
    n = params.size
    if n < params.min_room + 2:
        raise GenerationError(f"grid size {n} too small")
    walls = np.zeros((n, n), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True

    lo, hi = params.room_count
    n_rooms = int(rng.integers(lo, hi + 1))
    rooms = [(1, 1, n - 2, n - 2)]  # inclusive (x0, y0, x1, y1)
    doors: set[tuple[int, int]] = set()
    while len(rooms) < n_rooms:
        order = sorted(range(len(rooms)), key=lambda i: -_area(rooms[i]))
        for i in order:
            split = _split_room(rng, rooms[i], walls, doors, params.min_room)
            if split is not None:
                rooms[i : i + 1] = split
                break
        else:
            break

    free = ~walls
    free_cells = [(int(x), int(y)) for y, x in zip(*np.nonzero(free))]
    if len(_component(walls, free_cells[0])) != len(free_cells):
        raise _Retry

    t_lo, t_hi = params.target_instances
    n_targets = int(rng.integers(t_lo, t_hi + 1))
    if n_targets < 1:
        raise _Retry
    target = (
        int(rng.integers(params.n_categories))
        if params.target_category is None
        else int(params.target_category)
    )
    candidates = [c for c in free_cells if c not in doors]
    n_other = int(round(params.object_density * len(free_cells)))
    n_total = min(n_targets + n_other, len(candidates))
    picks = rng.permutation(len(candidates))[:n_total]
    objects = []
    others = [c for c in range(params.n_categories) if c != target]
    for j, idx in enumerate(picks):
        x, y = candidates[idx]
        if j < n_targets:
            cat = target
        elif others:
            cat = int(others[rng.integers(len(others))])
        else:
            continue
        objects.append((x, y, cat, params.is_landmark(cat)))
    objects.sort(key=lambda o: (o[1], o[0]))

    house_wo_start = dict(
        width=n, height=n, walls=walls, objects=tuple(objects), target_category=target,
        seed=seed, params=params,
    )
    probe = GridHouse(start_pose=AgentPose(1, 1, Heading.N), **house_wo_start)
    dist = probe.target_distance
    ctg = probe.cost_to_go
    starts = [
        (x, y, h)
        for (x, y) in free_cells
        for h in range(4)
        if dist[y, x] >= params.min_start_distance and np.isfinite(ctg[h, y, x]) and ctg[h, y, x] > 0
    ]
    if not starts:
        raise _Retry
    x, y, h = starts[int(rng.integers(len(starts)))]
    house = GridHouse(start_pose=AgentPose(x, y, Heading(h)), **house_wo_start)
    # share caches computed on the probe; they do not depend on the start pose
    for key in ("object_grid", "target_cells", "target_distance", "view_table", "goal_states", "cost_to_go"):
        house.__dict__[key] = probe.__dict__[key]
    return house


def _area(r):
    return (r[2] - r[0] + 1) * (r[3] - r[1] + 1)


def _split_room(rng, room, walls, doors, min_room):
    x0, y0, x1, y1 = room
    w, h = x1 - x0 + 1, y1 - y0 + 1
    vertical = w > h or (w == h and rng.random() < 0.5)
    if vertical:
        options = [
            x for x in range(x0 + min_room, x1 - min_room + 1)
            if (x, y0 - 1) not in doors and (x, y1 + 1) not in doors
        ]
        if not options:
            return None
        x = int(options[rng.integers(len(options))])
        walls[y0 : y1 + 1, x] = True
        dy = int(rng.integers(y0, y1 + 1))
        walls[dy, x] = False
        doors.add((x, dy))
        return [(x0, y0, x - 1, y1), (x + 1, y0, x1, y1)]
    options = [
        y for y in range(y0 + min_room, y1 - min_room + 1)
        if (x0 - 1, y) not in doors and (x1 + 1, y) not in doors
    ]
    if not options:
        return None
    y = int(options[rng.integers(len(options))])
    walls[y, x0 : x1 + 1] = True
    dx = int(rng.integers(x0, x1 + 1))
    walls[y, dx] = False
    doors.add((dx, y))
    return [(x0, y0, x1, y - 1), (x0, y + 1, x1, y1)]


def _neighbors(x, y):
    return ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1))


def _component(walls: np.ndarray, start: tuple[int, int]) -> set[tuple[int, int]]:
    h, w = walls.shape
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for nx, ny in _neighbors(x, y):
            if 0 <= nx < w and 0 <= ny < h and not walls[ny, nx] and (nx, ny) not in seen:
                seen.add((nx, ny))
                queue.append((nx, ny))
    return seen


def _bfs_field(walls: np.ndarray, sources: Iterable[tuple[int, int]]) -> np.ndarray:
    h, w = walls.shape
    dist = np.full((h, w), INF)
    queue = deque()
    for x, y in sources:
        if not walls[y, x]:
            dist[y, x] = 0
            queue.append((x, y))
    while queue:
        x, y = queue.popleft()
        d = dist[y, x] + 1
        for nx, ny in _neighbors(x, y):
            if 0 <= nx < w and 0 <= ny < h and not walls[ny, nx] and dist[ny, nx] > d:
                dist[ny, nx] = d
                queue.append((nx, ny))
    return dist


# ---------------------------------------------------------------------------
# view geometry


def _round_half_away(v: float) -> int:
    return int(math.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


def view_rays(depth: int, width: int) -> list[tuple[tuple[int, int], list[tuple[int, int]]]]:
    """Ego offsets ``(d, l)`` in row-major view order with the cells strictly between
    the agent and that offset. ``d`` is depth ahead (1-based), ``l`` is lateral
    (negative = left). The construction is mirror-symmetric in ``l``."""
    half = width // 2
    rays = []
    for d in range(1, depth + 1):
        for l in range(-half, width - half):
            n = max(d, abs(l))
            between = []
            for i in range(1, n):
                c = (_round_half_away(i * d / n), _round_half_away(i * l / n))
                if c != (0, 0) and c != (d, l) and c not in between:
                    between.append(c)
            rays.append(((d, l), between))
    return rays


def ego_to_world(d: int, l: int, heading: int) -> tuple[int, int]:
    fx, fy = HEADING_VECTORS[heading]
    rx, ry = -fy, fx
    return d * fx + l * rx, d * fy + l * ry


def _view_table(walls: np.ndarray, object_grid: np.ndarray, params: HouseParams) -> np.ndarray:
    h, w = walls.shape
    depth, width = params.view_depth, params.view_width
    pad = depth + width
    pw = np.pad(walls, pad, constant_values=True)
    inside = np.pad(np.ones_like(walls), pad, constant_values=False)
    labels = np.where(walls, WALL, FREE).astype(np.int8)
    labels = np.where(object_grid >= 0, OBJECT_BASE + object_grid, labels).astype(np.int8)
    pl = np.pad(labels, pad, constant_values=UNKNOWN)

    def shifted(arr, dx, dy):
        return arr[pad + dy : pad + dy + h, pad + dx : pad + dx + w]

    rays = view_rays(depth, width)
    table = np.zeros((4, h, w, depth, width), dtype=np.int8)
    for heading in range(4):
        for k, ((d, l), between) in enumerate(rays):
            dx, dy = ego_to_world(d, l, heading)
            clear = shifted(inside, dx, dy).copy()
            for bd, bl in between:
                bx, by = ego_to_world(bd, bl, heading)
                clear &= ~shifted(pw, bx, by)
            table[heading, :, :, k // width, k % width] = np.where(clear, shifted(pl, dx, dy), UNKNOWN)
    return table


# ---------------------------------------------------------------------------
# transitions and oracles


def apply_action(walls: np.ndarray, x: int, y: int, heading: int, action: int) -> tuple[int, int, int]:
    """Pose after a non-``end`` action; collisions leave the pose unchanged."""
    if action == NavAction.ROTATE_LEFT:
        return x, y, (heading - 1) % 4
    if action == NavAction.ROTATE_RIGHT:
        return x, y, (heading + 1) % 4
    fx, fy = HEADING_VECTORS[heading]
    if action == NavAction.MOVE_BACK:
        fx, fy = -fx, -fy
    elif action != NavAction.MOVE_AHEAD:
        return x, y, heading
    nx, ny = x + fx, y + fy
    if walls[ny, nx]:
        return x, y, heading
    return nx, ny, heading


def _cost_to_go(walls: np.ndarray, goal: np.ndarray) -> np.ndarray:
    # reverse BFS over (heading, y, x)
    h, w = walls.shape
    cost = np.full((4, h, w), INF)
    queue = deque()
    for hd, y, x in zip(*np.nonzero(goal)):
        cost[hd, y, x] = 0
        queue.append((int(hd), int(y), int(x)))
    while queue:
        hd, y, x = queue.popleft()
        c = cost[hd, y, x] + 1
        preds = [((hd + 1) % 4, y, x), ((hd - 1) % 4, y, x)]  # undo rotate_left / rotate_right
        fx, fy = HEADING_VECTORS[hd]
        for sx, sy in ((x - fx, y - fy), (x + fx, y + fy)):  # reached by move_ahead / move_back
            if not walls[sy, sx]:
                preds.append((hd, sy, sx))
        for p in preds:
            if cost[p] > c:
                cost[p] = c
                queue.append(p)
    cost[:, walls] = INF
    return cost


def geodesic_distance(house: GridHouse, start: tuple[int, int], to_set: Iterable[tuple[int, int]]) -> float:
    """BFS step count from ``start`` to the nearest cell of ``to_set`` (inf if unreachable)."""
    targets = set(to_set)
    if not targets:
        raise ValueError("to_set is empty")
    if not house.is_free(*start):
        raise ValueError(f"start cell {start} is not free")
    if start in targets:
        return 0
    h, w = house.walls.shape
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        (x, y), d = queue.popleft()
        for nb in _neighbors(x, y):
            nx, ny = nb
            if 0 <= nx < w and 0 <= ny < h and not house.walls[ny, nx] and nb not in seen:
                if nb in targets:
                    return d + 1
                seen.add(nb)
                queue.append((nb, d + 1))
    return INF


def shortest_episode_length(house: GridHouse) -> float:
    """Fewest actions (rotations, moves and the final ``end``) to succeed from the start."""
    p = house.start_pose
    c = house.cost_to_go[p.heading, p.y, p.x]
    return c + 1 if np.isfinite(c) else INF


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeState:
    house: GridHouse
    pose: AgentPose
    max_steps: int
    clock: int = 0
    done: bool = False
    success: bool = False

    @property
    def geodesic(self) -> float:
        return float(self.house.target_distance[self.pose.y, self.pose.x])


@dataclass(frozen=True)
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    success: bool
    geodesic_to_target: float
    clock: int
    action: int = -1
    progress: float = 0.0

    def trace_record(self, pose: AgentPose) -> dict:
        return {
            "clock": self.clock,
            "pose": pose.as_list(),
            "action": self.action,
            "reward": self.reward,
            "done": self.done,
            "success": self.success,
            "geodesic": self.geodesic_to_target,
        }


def reset(house: GridHouse, max_steps: int = 300) -> tuple[EpisodeState, Observation]:
    state = EpisodeState(house=house, pose=house.start_pose, max_steps=max_steps)
    return state, house.observe(state.pose)


def success_possible(state: EpisodeState) -> bool:
    p = state.pose
    return bool(state.house.goal_states[p.heading, p.y, p.x])


def step(state: EpisodeState, action: int) -> StepOutcome:
    """Advance ``state`` in place by one action."""
    if state.done:
        raise EpisodeDone("episode already finished")
    if state.clock >= state.max_steps:
        raise EpisodeDone("step budget exhausted")
    action = NavAction(int(action))
    house = state.house
    d_prev = state.geodesic
    success = False
    if action == NavAction.END:
        success = success_possible(state)
        state.done = True
    else:
        x, y, h = apply_action(house.walls, state.pose.x, state.pose.y, state.pose.heading, action)
        state.pose = AgentPose(x, y, Heading(h))
    state.clock += 1
    d_now = state.geodesic
    progress = max(0.0, d_prev - d_now)
    reward = STEP_PENALTY + (SUCCESS_REWARD if success else 0.0) + progress
    state.success = success
    if state.clock >= state.max_steps:
        state.done = True
    return StepOutcome(
        observation=house.observe(state.pose),
        reward=reward,
        done=state.done,
        success=success,
        geodesic_to_target=d_now,
        clock=state.clock,
        action=int(action),
        progress=progress,
    )


def expert_action(state: EpisodeState) -> NavAction:
    """Privileged shortest-plan expert.

    Returns ``end`` when it would succeed now, otherwise the first action of
    a minimal action sequence, breaking ties by EXPERT_PREFERENCE.
    """
    if state.done:
        raise EpisodeDone("episode already finished")
    house = state.house
    p = state.pose
    ctg = house.cost_to_go
    here = ctg[p.heading, p.y, p.x]
    if not np.isfinite(here):
        raise ValueError("target unreachable from current pose")
    if here == 0:
        return NavAction.END
    for a in EXPERT_PREFERENCE:
        x, y, h = apply_action(house.walls, p.x, p.y, p.heading, a)
        if ctg[h, y, x] == here - 1:
            return a
    raise AssertionError("cost-to-go table inconsistent")  # pragma: no cover


def expert_plan(state: EpisodeState) -> list[NavAction]:
    """Full expert action sequence from ``state`` (ending with ``end``)."""
    house = state.house
    x, y, h = state.pose.x, state.pose.y, int(state.pose.heading)
    plan = []
    while True:
        s = EpisodeState(house, AgentPose(x, y, Heading(h)), max_steps=state.max_steps)
        a = expert_action(s)
        plan.append(a)
        if a == NavAction.END:
            return plan
        x, y, h = apply_action(house.walls, x, y, h, a)


def house_from_ascii(
    rows: Sequence[str],
    target_category: int = 0,
    start: tuple[int, int, int] | None = None,
    params: HouseParams | None = None,
    seed: int = 0,
) -> GridHouse:
    """Handcrafted house for tests and fixtures.

    ``#`` wall, ``.`` free, ``T`` target instance, ``a``-``k`` other object
    categories (landmark flag from params), ``^>v<`` start pose.
    """
    params = params or HouseParams(size=max(len(rows), len(rows[0])))
    walls = np.zeros((len(rows), len(rows[0])), dtype=bool)
    objects = []
    pose = None
    others = [c for c in range(params.n_categories) if c != target_category]
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                walls[y, x] = True
            elif ch == "T":
                objects.append((x, y, target_category, params.is_landmark(target_category)))
            elif "a" <= ch <= "k":
                cat = others[ord(ch) - ord("a")]
                objects.append((x, y, cat, params.is_landmark(cat)))
            elif ch in "^>v<":
                pose = AgentPose(x, y, Heading("^>v<".index(ch)))
    if start is not None:
        pose = AgentPose(start[0], start[1], Heading(start[2]))
    if pose is None:
        raise ValueError("no start pose given")
    return GridHouse(
        width=walls.shape[1], height=walls.shape[0], walls=walls, objects=tuple(objects),
        target_category=target_category, start_pose=pose, seed=seed, params=params,
    )
