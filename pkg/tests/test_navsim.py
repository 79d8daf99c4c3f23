import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enav import navsim
from enav.navsim import (
    FREE,
    OBJECT_BASE,
    UNKNOWN,
    WALL,
    AgentPose,
    EpisodeDone,
    GenerationError,
    Heading,
    HouseParams,
    NavAction,
    apply_action,
    generate_house,
    house_from_ascii,
)

CORRIDOR = [
    "##########",
    "#>...#..T#",
    "#....#...#",
    "#........#",
    "##########",
]


def _visible_cells(house, pose):
    """Independent per-cell ray cast: cells in the 7x5 cone whose rounded ray is wall-free."""
    fx, fy = navsim.HEADING_VECTORS[pose.heading]
    rx, ry = -fy, fx
    out = {}
    for d in range(1, 8):
        for l in range(-2, 3):
            x, y = pose.x + d * fx + l * rx, pose.y + d * fy + l * ry
            if not (0 <= x < house.width and 0 <= y < house.height):
                continue
            n = max(d, abs(l))
            blocked = False
            for i in range(1, n):
                bd = math.floor(abs(i * d / n) + 0.5) * (1 if d >= 0 else -1)
                bl = math.floor(abs(i * l / n) + 0.5) * (1 if l >= 0 else -1)
                if (bd, bl) in ((0, 0), (d, l)):
                    continue
                bx, by = pose.x + bd * fx + bl * rx, pose.y + bd * fy + bl * ry
                if house.walls[by, bx]:
                    blocked = True
            if not blocked:
                out[(d, l)] = (x, y)
    return out


def _forward_bfs_length(house):
    """Actions to success from the start by forward search (oracle for the expert)."""
    tgt = house.target_cells
    dist = house.target_distance

    def goal(x, y, h):
        if dist[y, x] > house.params.success_radius:
            return False
        cells = _visible_cells(house, AgentPose(x, y, Heading(h))).values()
        return any(c in tgt for c in cells)

    p = house.start_pose
    start = (p.x, p.y, int(p.heading))
    seen = {start}
    q = deque([(start, 0)])
    while q:
        (x, y, h), n = q.popleft()
        if goal(x, y, h):
            return n + 1
        for a in (0, 1, 2, 3):
            nxt = apply_action(house.walls, x, y, h, a)
            if nxt not in seen:
                seen.add(nxt)
                q.append((nxt, n + 1))
    return math.inf


def test_generation_is_deterministic():
    a, b = generate_house(11), generate_house(11)
    assert a == b
    assert a != generate_house(12)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_generated_house_invariants(seed):
    h = generate_house(seed)
    assert h.walls[0].all() and h.walls[-1].all() and h.walls[:, 0].all() and h.walls[:, -1].all()
    p = h.start_pose
    assert not h.walls[p.y, p.x]
    assert h.target_cells and all(not h.walls[y, x] for x, y in h.target_cells)
    assert h.target_distance[p.y, p.x] >= h.params.min_start_distance
    assert math.isfinite(navsim.shortest_episode_length(h))


def test_zero_target_instances_fails():
    with pytest.raises(GenerationError):
        generate_house(0, HouseParams(target_instances=(0, 0)))


def test_house_roundtrip(tmp_path):
    houses = [generate_house(s) for s in range(3)]
    navsim.save_houses(tmp_path / "h.jsonl", houses)
    assert navsim.load_houses(tmp_path / "h.jsonl") == houses


def test_ego_view_fixture():
    h = house_from_ascii(CORRIDOR)
    view = h.observe(h.start_pose).ego_view
    assert view.shape == (7, 5)
    # row 0 is the cell directly ahead, centre column is straight on
    assert view[0, 2] == FREE and view[3, 2] == WALL
    # the wall at x=5 hides what is straight behind it
    assert view[4, 2] == UNKNOWN and view[5, 2] == UNKNOWN
    # left of an east-facing agent is north: row y=0 is the outer wall
    assert view[0, 1] == WALL
    assert view[0, 0] == UNKNOWN  # two cells left is outside the grid


@pytest.mark.parametrize("seed", range(6))
def test_view_table_matches_independent_ray_cast(seed):
    h = generate_house(seed)
    rng = np.random.default_rng(seed)
    free = h.free_cells()
    for k in rng.choice(len(free), size=10, replace=False):
        x, y = free[k]
        for heading in range(4):
            pose = AgentPose(x, y, Heading(heading))
            view = h.observe(pose).ego_view
            vis = _visible_cells(h, pose)
            for d in range(1, 8):
                for l in range(-2, 3):
                    label = view[d - 1, l + 2]
                    if (d, l) not in vis:
                        assert label == UNKNOWN
                        continue
                    cx, cy = vis[(d, l)]
                    if h.walls[cy, cx]:
                        assert label == WALL
                    elif h.object_grid[cy, cx] >= 0:
                        assert label == OBJECT_BASE + h.object_grid[cy, cx]
                    else:
                        assert label == FREE


def test_collision_leaves_pose():
    h = house_from_ascii(["###", "#^#", "###"])
    assert apply_action(h.walls, 1, 1, 0, NavAction.MOVE_AHEAD) == (1, 1, 0)
    assert apply_action(h.walls, 1, 1, 0, NavAction.ROTATE_LEFT) == (1, 1, 3)
    assert apply_action(h.walls, 1, 1, 0, NavAction.ROTATE_RIGHT) == (1, 1, 1)


@pytest.mark.parametrize("seed", range(10))
def test_reward_decomposition_random_walk(seed):
    h = generate_house(seed)
    rng = np.random.default_rng(seed)
    state, _ = navsim.reset(h, max_steps=80)
    while not state.done:
        d_prev = state.geodesic
        a = int(rng.choice([0, 1, 2, 3, 4], p=[0.4, 0.15, 0.2, 0.2, 0.05]))
        out = navsim.step(state, a)
        expected = -0.01 + (10.0 if out.success else 0.0) + max(0.0, d_prev - out.geodesic_to_target)
        assert abs(out.reward - expected) <= 1e-12
        assert not out.success or a == NavAction.END


@pytest.mark.parametrize("seed", range(12))
def test_expert_matches_forward_search(seed):
    h = generate_house(seed)
    assert navsim.shortest_episode_length(h) == _forward_bfs_length(h)
    state, _ = navsim.reset(h, max_steps=300)
    steps = 0
    while not state.done:
        out = navsim.step(state, navsim.expert_action(state))
        steps += 1
    assert out.success and steps == navsim.shortest_episode_length(h)


def test_expert_plan_ends_with_end():
    h = generate_house(3)
    state, _ = navsim.reset(h)
    plan = navsim.expert_plan(state)
    assert plan[-1] == NavAction.END and len(plan) == navsim.shortest_episode_length(h)


def test_end_succeeds_only_at_goal():
    h = house_from_ascii(CORRIDOR)
    state, _ = navsim.reset(h)
    out = navsim.step(state, NavAction.END)
    assert out.done and not out.success and out.reward == pytest.approx(-0.01)


def test_budget_boundary():
    h = house_from_ascii(CORRIDOR)
    state, _ = navsim.reset(h, max_steps=1)
    out = navsim.step(state, NavAction.ROTATE_LEFT)
    assert out.done and not out.success and out.clock == 1
    with pytest.raises(EpisodeDone):
        navsim.step(state, NavAction.MOVE_AHEAD)


def test_geodesic_distance_errors_and_unreachable():
    h = house_from_ascii(["#####", "#^#T#", "#####"])
    with pytest.raises(ValueError):
        navsim.geodesic_distance(h, (1, 1), [])
    with pytest.raises(ValueError):
        navsim.geodesic_distance(h, (0, 0), [(3, 1)])
    assert navsim.geodesic_distance(h, (1, 1), [(3, 1)]) == math.inf
    assert navsim.shortest_episode_length(h) == math.inf


def test_geodesic_distance_matches_field():
    h = generate_house(5)
    p = h.start_pose
    assert navsim.geodesic_distance(h, p.cell, h.target_cells) == h.target_distance[p.y, p.x]
