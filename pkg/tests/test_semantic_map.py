import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enav import navsim
from enav.navsim import FREE, UNKNOWN, WALL, AgentPose, Heading, house_from_ascii
from enav.semantic_map import (
    CELL_PX,
    COLOR_FREE,
    COLOR_LANDMARK,
    COLOR_PATH,
    COLOR_TARGET,
    COLOR_UNKNOWN,
    COLOR_WALL,
    FEATURE_DIM,
    AnnotatedMap,
    MapGeometryError,
    corrupt_map,
    heat_color,
    landmark_summary,
    map_features,
    ppm_bytes,
    render_map,
    update_map,
)

GOLDEN_RENDER_SHA = "56f57496fb84ca13f3c47d1c73f3d6d21dd109b7fca2ef02c96ee1e693fc49fc"

ROOM = [
    "########",
    "#......#",
    "#.a....#",
    "#......#",
    "#...^..#",
    "#....T.#",
    "#......#",
    "########",
]


def _rotate_cw(rows):
    """Rotate an ascii house a quarter turn clockwise; headings turn with it."""
    n = len(rows)
    turn = {"^": ">", ">": "v", "v": "<", "<": "^"}
    out = [[" "] * n for _ in range(n)]
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            out[x][n - 1 - y] = turn.get(ch, ch)
    return ["".join(r) for r in out]


def _walk(house, actions):
    state, obs = navsim.reset(house, max_steps=len(actions) + 1)
    m = update_map(AnnotatedMap.empty_for(house), state.pose, obs, clock=0)
    for t, a in enumerate(actions, start=1):
        out = navsim.step(state, a)
        m = update_map(m, state.pose, out.observation, clock=t)
        if out.done:
            break
    return m


def test_first_update_records_view():
    h = house_from_ascii(ROOM)
    state, obs = navsim.reset(h)
    m = update_map(AnnotatedMap.empty_for(h), state.pose, obs, clock=0)
    assert m.trajectory == [h.start_pose]
    # facing north from (4, 4): the cell ahead and the outer wall 4 ahead
    assert m.explored[3, 4] and m.occupancy[3, 4] == FREE
    assert m.occupancy[0, 4] == WALL
    assert ((2, 2), 1) in m.landmarks
    assert not m.explored[5, 4]  # behind the agent


def test_update_is_idempotent_with_clock():
    h = house_from_ascii(ROOM)
    state, obs = navsim.reset(h)
    m = update_map(AnnotatedMap.empty_for(h), state.pose, obs, clock=0)
    assert update_map(m, state.pose, obs, clock=0) == m
    with pytest.raises(MapGeometryError):
        update_map(m, state.pose, obs, clock=2)
    with pytest.raises(MapGeometryError):
        update_map(m, AgentPose(1, 1, Heading.N), obs, clock=0)


def test_collision_extends_trajectory_with_clock():
    h = house_from_ascii(["####", "#^.#", "####"])
    m = _walk(h, [navsim.NavAction.MOVE_AHEAD])
    assert len(m.trajectory) == 2 and m.trajectory[0] == m.trajectory[1]


def test_mismatched_target_rejected():
    h = house_from_ascii(ROOM)
    state, obs = navsim.reset(h)
    m = AnnotatedMap(h.height, h.width, target_category=3, n_landmark_categories=6)
    with pytest.raises(MapGeometryError):
        update_map(m, state.pose, obs)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**20), st.lists(st.integers(0, 3), min_size=1, max_size=40))
def test_map_grows_monotonically_and_matches_truth(seed, actions):
    h = navsim.generate_house(seed)
    state, obs = navsim.reset(h, max_steps=100)
    m = update_map(AnnotatedMap.empty_for(h), state.pose, obs, clock=0)
    for t, a in enumerate(actions, start=1):
        out = navsim.step(state, a)
        nxt = update_map(m, state.pose, out.observation, clock=t)
        assert (nxt.explored | ~m.explored).all()
        assert set(m.landmarks) <= set(nxt.landmarks)
        m = nxt
    ys, xs = np.nonzero(m.explored)
    assert np.array_equal(m.occupancy[ys, xs] == WALL, h.walls[ys, xs])
    assert (m.occupancy[~m.explored] == UNKNOWN).all()
    for (x, y), cat in m.landmarks:
        assert h.object_grid[y, x] == cat and m.is_annotated(cat)


def test_features_shape_and_range():
    h = navsim.generate_house(4)
    m = _walk(h, [0, 0, 2, 0, 3, 3, 0])
    f = map_features(m)
    assert f.shape == (FEATURE_DIM,) == (277,)
    assert f.dtype == np.float32 and np.isfinite(f).all()
    assert f.min() >= -1.0 and f.max() <= 1.0


def test_features_are_rotation_invariant():
    actions = [0, 2, 0, 3, 3, 0]
    a = map_features(_walk(house_from_ascii(ROOM), actions))
    b = map_features(_walk(house_from_ascii(_rotate_cw(ROOM)), actions))
    np.testing.assert_array_equal(a, b)


def test_landmark_summary_angles():
    h = house_from_ascii(ROOM)
    state, obs = navsim.reset(h)
    m = update_map(AnnotatedMap.empty_for(h), state.pose, obs, clock=0)
    # only landmark 'a' at (2, 2) is visible: 2 ahead, 2 to the left
    s = landmark_summary(m)
    np.testing.assert_allclose(s[0], [1, 0, np.sqrt(0.5), -np.sqrt(0.5), 1 / (1 + np.sqrt(8))])
    assert (s[1:] == 0).all()


def test_heat_color_endpoints():
    assert heat_color(0.0) == (0, 0, 255)
    assert heat_color(1.0) == (255, 0, 0)
    assert heat_color(0.5) == (128, 0, 128)
    assert heat_color(-3) == (0, 0, 255) and heat_color(7) == (255, 0, 0)


def test_render_golden_tiny_map():
    m = AnnotatedMap(2, 3, target_category=0, n_landmark_categories=2)
    m.explored[0, :] = True
    m.occupancy[0] = [WALL, FREE, FREE]
    m.landmarks = [((2, 0), 0)]
    m.trajectory = [AgentPose(1, 0, Heading.N), AgentPose(1, 1, Heading.S)]
    m.current_pose = m.trajectory[-1]
    img = render_map(m, overlay=[1.0])

    p = CELL_PX
    expected = np.zeros((2 * p, 3 * p, 3), dtype=np.uint8)
    expected[:p, :p] = COLOR_WALL
    expected[:p, p:] = COLOR_FREE
    expected[p:, :] = COLOR_UNKNOWN
    expected[1 : p - 1, 2 * p + 1 : 3 * p - 1] = COLOR_TARGET
    c = p // 2
    expected[c : p + c + 1, p + c] = COLOR_PATH  # vertical segment between centres
    expected[c - 1 : c + 2, p + c - 1 : p + c + 2] = (255, 0, 0)
    np.testing.assert_array_equal(img, expected)
    data = ppm_bytes(img)
    assert data.startswith(b"P6\n24 16\n255\n") and len(data) == len(b"P6\n24 16\n255\n") + 24 * 16 * 3


def test_render_landmark_colour_and_overlay_length():
    h = house_from_ascii(ROOM)
    m = _walk(h, [0])
    img = render_map(m)
    assert tuple(img[2 * CELL_PX + 2, 2 * CELL_PX + 2]) == COLOR_LANDMARK
    with pytest.raises(ValueError):
        render_map(m, overlay=[0.1, 0.2])


def test_render_regression_digest():
    h = navsim.generate_house(7)
    m = _walk(h, [0, 0, 2, 0, 0, 3, 0, 0])
    digest = hashlib.sha256(ppm_bytes(render_map(m, overlay=np.linspace(0, 1, len(m.trajectory) - 1)))).hexdigest()
    assert digest == GOLDEN_RENDER_SHA


def test_corrupt_identity_and_extremes():
    h = navsim.generate_house(2)
    m = _walk(h, [0, 2, 0, 0, 3, 3, 0, 0, 0])
    assert corrupt_map(m, 0.0, 0.0, seed=1) == m
    assert corrupt_map(m, 1.0, 0.0, seed=1).landmarks == []
    flipped = corrupt_map(m, 0.0, 1.0, seed=1)
    assert len(flipped.landmarks) == len(m.landmarks)
    assert all(a[1] != b[1] and a[0] == b[0] for a, b in zip(m.landmarks, flipped.landmarks))
    assert corrupt_map(m, 0.3, 0.2, seed=5) == corrupt_map(m, 0.3, 0.2, seed=5)
    with pytest.raises(ValueError):
        corrupt_map(m, 1.5, 0.0, seed=0)


def test_record_roundtrip():
    h = navsim.generate_house(3)
    m = _walk(h, [0, 2, 0, 3, 0])
    assert AnnotatedMap.from_record(m.to_record()) == m
