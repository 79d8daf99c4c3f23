"""Annotated semantic map used as the agent's long-term memory.

The map accumulates explored cells with their occupancy class, the pose
trajectory, and landmark annotations (landmark-category objects plus any
instance of the target category). ``map_features`` pools it into a fixed
length vector in the agent frame; ``render_map`` draws it as a binary PPM.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .navsim import (
    FREE,
    HEADING_VECTORS,
    OBJECT_BASE,
    UNKNOWN,
    WALL,
    AgentPose,
    Heading,
    Observation,
    ego_to_world,
)

POOL = 8
N_LANDMARK_SLOTS = 4
N_POOL_CHANNELS = 4  # explored, wall, visited, agent
LANDMARK_SLOT_SIZE = 5  # present, is_target, cos, sin, 1/(1+d)
FEATURE_DIM = N_POOL_CHANNELS * POOL * POOL + N_LANDMARK_SLOTS * LANDMARK_SLOT_SIZE + 1


class MapGeometryError(ValueError):
    pass


@dataclass
class AnnotatedMap:
    height: int
    width: int
    target_category: int
    n_landmark_categories: int
    explored: np.ndarray = None  # (H, W) bool
    occupancy: np.ndarray = None  # (H, W) int8 in {UNKNOWN, WALL, FREE}
    trajectory: list[AgentPose] = field(default_factory=list)
    landmarks: list[tuple[tuple[int, int], int]] = field(default_factory=list)
    current_pose: AgentPose | None = None

    def __post_init__(self):
        if self.explored is None:
            self.explored = np.zeros((self.height, self.width), dtype=bool)
        if self.occupancy is None:
            self.occupancy = np.full((self.height, self.width), UNKNOWN, dtype=np.int8)

    @classmethod
    def empty_for(cls, house) -> "AnnotatedMap":
        return cls(
            height=house.height,
            width=house.width,
            target_category=house.target_category,
            n_landmark_categories=house.params.n_landmark_categories,
        )

    def copy(self) -> "AnnotatedMap":
        return AnnotatedMap(
            height=self.height,
            width=self.width,
            target_category=self.target_category,
            n_landmark_categories=self.n_landmark_categories,
            explored=self.explored.copy(),
            occupancy=self.occupancy.copy(),
            trajectory=list(self.trajectory),
            landmarks=list(self.landmarks),
            current_pose=self.current_pose,
        )

    def __eq__(self, other):
        return (
            isinstance(other, AnnotatedMap)
            and self.target_category == other.target_category
            and np.array_equal(self.explored, other.explored)
            and np.array_equal(self.occupancy, other.occupancy)
            and self.trajectory == other.trajectory
            and self.landmarks == other.landmarks
            and self.current_pose == other.current_pose
        )

    def is_annotated(self, category: int) -> bool:
        return category < self.n_landmark_categories or category == self.target_category

    def target_seen(self) -> bool:
        return any(cat == self.target_category for _, cat in self.landmarks)

    def to_record(self) -> dict:
        return {
            "shape": [self.height, self.width],
            "target": self.target_category,
            "n_landmark_categories": self.n_landmark_categories,
            "occupancy": ["".join("?#."[v] for v in row) for row in self.occupancy],
            "explored": ["".join("1" if v else "0" for v in row) for row in self.explored],
            "trajectory": [p.as_list() for p in self.trajectory],
            "landmarks": [[x, y, c] for (x, y), c in self.landmarks],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AnnotatedMap":
        h, w = rec["shape"]
        occ = np.array([["?#.".index(ch) for ch in row] for row in rec["occupancy"]], dtype=np.int8)
        exp = np.array([[ch == "1" for ch in row] for row in rec["explored"]], dtype=bool)
        traj = [AgentPose(x, y, Heading(hd)) for x, y, hd in rec["trajectory"]]
        return cls(
            height=h, width=w, target_category=rec["target"],
            n_landmark_categories=rec["n_landmark_categories"],
            explored=exp.reshape(h, w), occupancy=occ.reshape(h, w), trajectory=traj,
            landmarks=[((x, y), c) for x, y, c in rec["landmarks"]],
            current_pose=traj[-1] if traj else None,
        )


def save_map_snapshots(path, maps) -> None:
    with open(path, "w") as f:
        for m in maps:
            f.write(json.dumps(m.to_record(), sort_keys=True) + "\n")


def update_map(
    m: AnnotatedMap, pose: AgentPose, obs: Observation, clock: int | None = None, in_place: bool = False
) -> AnnotatedMap:
    """Fold one observation taken at ``pose`` into the map.

    With ``clock`` given, the trajectory is indexed by episode step, so a
    collision (same pose twice) still extends it while re-applying the same
    step is a no-op. Without ``clock`` a pose equal to the last one is not
    appended again.
    """
    if obs.target_category != m.target_category:
        raise MapGeometryError("observation target does not match map target")
    if not (0 <= pose.x < m.width and 0 <= pose.y < m.height):
        raise MapGeometryError(f"pose {pose} outside map")
    depth, width = obs.ego_view.shape
    half = width // 2
    out = m if in_place else m.copy()
    if clock is None:
        repeat = bool(out.trajectory) and out.trajectory[-1] == pose
    elif clock < len(out.trajectory):
        if out.trajectory[clock] != pose:
            raise MapGeometryError(f"step {clock} already recorded at a different pose")
        repeat = True
    elif clock == len(out.trajectory):
        repeat = False
    else:
        raise MapGeometryError(f"step {clock} skips trajectory entries")
    for d in range(1, depth + 1):
        for l in range(-half, width - half):
            label = int(obs.ego_view[d - 1, l + half])
            if label == UNKNOWN:
                continue
            dx, dy = ego_to_world(d, l, pose.heading)
            x, y = pose.x + dx, pose.y + dy
            if not (0 <= x < m.width and 0 <= y < m.height):
                raise MapGeometryError(f"visible cell {(x, y)} outside map")
            out.explored[y, x] = True
            out.occupancy[y, x] = WALL if label == WALL else FREE
            if label >= OBJECT_BASE:
                cat = label - OBJECT_BASE
                if out.is_annotated(cat) and ((x, y), cat) not in out.landmarks:
                    out.landmarks.append(((x, y), cat))
    if not repeat:
        out.trajectory.append(pose)
    out.current_pose = pose
    return out


def _pool(arr: np.ndarray, bins: int = POOL) -> np.ndarray:
    """Mean-pool the last two axes into ``bins x bins`` (uneven splits allowed)."""
    h, w = arr.shape[-2:]
    if h % bins == 0 and w % bins == 0:
        lead = arr.shape[:-2]
        return arr.reshape(*lead, bins, h // bins, bins, w // bins).mean(axis=(-3, -1))
    if arr.ndim == 3:
        return np.stack([_pool(a, bins) for a in arr])
    rows = np.array_split(np.arange(arr.shape[0]), bins)
    cols = np.array_split(np.arange(arr.shape[1]), bins)
    out = np.zeros((bins, bins))
    for i, r in enumerate(rows):
        if len(r) == 0:
            continue
        block = arr[r[0] : r[-1] + 1]
        for j, c in enumerate(cols):
            if len(c):
                out[i, j] = block[:, c[0] : c[-1] + 1].mean()
    return out


def pooled_channels(m: AnnotatedMap) -> np.ndarray:
    """(4, 8, 8) explored / wall / visited / agent channels in the agent frame.

    The map is rotated counter-clockwise by ``heading`` quarter turns so that
    the agent's forward direction points to row 0.
    """
    visited = np.zeros((m.height, m.width))
    for p in m.trajectory:
        visited[p.y, p.x] = 1.0
    agent = np.zeros((m.height, m.width))
    heading = 0
    if m.current_pose is not None:
        agent[m.current_pose.y, m.current_pose.x] = 1.0
        heading = int(m.current_pose.heading)
    chans = np.stack([m.explored.astype(float), (m.occupancy == WALL).astype(float), visited, agent])
    return _pool(np.rot90(chans, k=heading, axes=(1, 2)))


def landmark_summary(m: AnnotatedMap, slots: int = N_LANDMARK_SLOTS) -> np.ndarray:
    """Per-slot (present, is_target, cos, sin, 1/(1+d)) for the nearest landmarks.

    Target-category landmarks sort ahead of the rest so a sighted target is
    never pushed out of the summary. Angles are relative to the heading
    (0 = ahead, positive = to the right).
    """
    out = np.zeros((slots, LANDMARK_SLOT_SIZE))
    if m.current_pose is None or not m.landmarks:
        return out
    p = m.current_pose
    entries = []
    for (x, y), cat in m.landmarks:
        dx, dy = x - p.x, y - p.y
        dist = math.hypot(dx, dy)
        entries.append((cat != m.target_category, dist, y, x, cat, dx, dy))
    entries.sort()
    fx, fy = HEADING_VECTORS[p.heading]
    rx, ry = -fy, fx
    for i, (not_target, dist, _, _, _, dx, dy) in enumerate(entries[:slots]):
        ahead = dx * fx + dy * fy
        right = dx * rx + dy * ry
        ang = math.atan2(right, ahead)
        out[i] = (1.0, 0.0 if not_target else 1.0, math.cos(ang), math.sin(ang), 1.0 / (1.0 + dist))
    return out


def map_features(m: AnnotatedMap) -> np.ndarray:
    """Fixed-length float32 vector of length FEATURE_DIM."""
    pooled = pooled_channels(m).ravel()
    lms = landmark_summary(m).ravel()
    flag = np.array([1.0 if m.target_seen() else 0.0])
    return np.concatenate([pooled, lms, flag]).astype(np.float32)


# ---------------------------------------------------------------------------
# rendering

CELL_PX = 8
COLOR_UNKNOWN = (0, 0, 0)
COLOR_WALL = (96, 96, 96)
COLOR_FREE = (255, 255, 255)
COLOR_LANDMARK = (40, 120, 220)
COLOR_TARGET = (30, 170, 60)
COLOR_PATH = (200, 160, 0)


def heat_color(v: float) -> tuple[int, int, int]:
    """Linear blend from blue (0, 0, 255) at 0 to red (255, 0, 0) at 1, clipped."""
    v = min(1.0, max(0.0, float(v)))
    return (int(round(255 * v)), 0, int(round(255 * (1 - v))))


def _line(x0, y0, x1, y1):
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def render_map(m: AnnotatedMap, overlay=None) -> np.ndarray:
    """RGB uint8 raster, ``CELL_PX`` pixels per cell.

    ``overlay`` holds one scalar per executed step (trajectory length - 1);
    waypoint ``i`` is drawn in ``heat_color(overlay[i])``.
    """
    n_way = len(m.trajectory) - 1
    if overlay is not None and len(overlay) != n_way:
        raise ValueError(f"overlay has {len(overlay)} values for {n_way} waypoints")
    img = np.zeros((m.height * CELL_PX, m.width * CELL_PX, 3), dtype=np.uint8)
    for y in range(m.height):
        for x in range(m.width):
            if not m.explored[y, x]:
                color = COLOR_UNKNOWN
            elif m.occupancy[y, x] == WALL:
                color = COLOR_WALL
            else:
                color = COLOR_FREE
            img[y * CELL_PX : (y + 1) * CELL_PX, x * CELL_PX : (x + 1) * CELL_PX] = color
    for (x, y), cat in m.landmarks:
        color = COLOR_TARGET if cat == m.target_category else COLOR_LANDMARK
        img[y * CELL_PX + 1 : (y + 1) * CELL_PX - 1, x * CELL_PX + 1 : (x + 1) * CELL_PX - 1] = color
    c = CELL_PX // 2
    pts = [(p.x * CELL_PX + c, p.y * CELL_PX + c) for p in m.trajectory]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        for px, py in _line(x0, y0, x1, y1):
            img[py, px] = COLOR_PATH
    if overlay is not None:
        for (px, py), v in zip(pts, overlay):
            img[py - 1 : py + 2, px - 1 : px + 2] = heat_color(v)
    return img


def ppm_bytes(img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def write_ppm(path, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(ppm_bytes(img))


# ---------------------------------------------------------------------------
# corruption


def corrupt_map(m: AnnotatedMap, p_drop: float, p_mislabel: float, seed: int, n_categories: int = 12) -> AnnotatedMap:
    """Synthetic map noise: drop / mislabel landmarks, flip explored occupancy.

    Random draws are keyed by cell, so the same seed corrupts a growing map
    consistently from step to step.
    """
    for name, p in (("p_drop", p_drop), ("p_mislabel", p_mislabel)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name}={p} outside [0, 1]")
    out = m.copy()
    if p_drop == 0.0 and p_mislabel == 0.0:
        return out
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    u = rng.random((4, m.height, m.width))
    landmarks = []
    for (x, y), cat in m.landmarks:
        if u[0, y, x] < p_drop:
            continue
        if u[1, y, x] < p_mislabel and n_categories > 1:
            k = int(u[2, y, x] * (n_categories - 1))
            cat = k if k < cat else k + 1
        landmarks.append(((x, y), cat))
    out.landmarks = landmarks
    flip = m.explored & (m.occupancy != UNKNOWN) & (u[3] < p_mislabel / 2)
    out.occupancy = np.where(flip, np.where(m.occupancy == WALL, FREE, WALL), m.occupancy).astype(np.int8)
    return out
