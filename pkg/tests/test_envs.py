import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankher.envs import (ENVIRONMENTS, DoorPush, Episode, make_env, read_episode_log, read_pgm,
                          write_episode_log, write_pgm)
from rankher.nn import UsageError

ALL = ["bitflip8", "planar_reach", "planar_push", "planar_slide", "planar_pick_place", "door_push_1d"]


def run_actions(env, seed, actions):
    state, goal = env.reset(np.random.default_rng(seed))
    states = [state]
    for a in actions:
        states.append(env.step(a).next_state)
    return np.array(states), goal


def steer(e, target, step):
    return np.clip((target - e) / step, -1, 1)


def scripted_door(env, rng, push=3):
    """Park the effector just short of contact in front of the handle, then push forward."""
    state, goal = env.reset(rng)
    angles = [state[9]]
    for _ in range(env.spec.horizon - push):
        e, h = state[:3], state[3:6]
        state = env.step(steer(e, h - [0.08, 0, 0], env.STEP)).next_state
        angles.append(state[9])
    for _ in range(push):
        state = env.step([1.0, 0.0, 0.0]).next_state
        angles.append(state[9])
    return state, np.array(angles)


@pytest.mark.parametrize("name", ALL)
def test_reset_deterministic(name):
    a = make_env(name).reset(np.random.default_rng(7))
    b = make_env(name).reset(np.random.default_rng(7))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@pytest.mark.parametrize("name", ALL)
def test_trajectory_and_image_deterministic(name):
    env = make_env(name)
    actions = np.random.default_rng(1).uniform(-1.2, 1.2, (env.spec.horizon, env.spec.action_dim))
    s1, _ = run_actions(env, 3, actions)
    img1, sum1 = env.render_terminal(), env.terminal_summary()
    env2 = make_env(name)
    s2, _ = run_actions(env2, 3, actions)
    assert np.array_equal(s1, s2)
    assert np.array_equal(img1, env2.render_terminal())
    assert sum1.hinge_angle == env2.terminal_summary().hinge_angle


@pytest.mark.parametrize("name", ALL)
def test_self_reward_is_zero(name):
    env = make_env(name)
    state, _ = env.reset(np.random.default_rng(0))
    ag = env.achieved_goal(state)
    assert env.compute_reward(ag, ag) == 0.0


def test_door_handle_inside_cube():
    env = DoorPush()
    rng = np.random.default_rng(0)
    for _ in range(200):
        state, goal = env.reset(rng)
        assert np.all(np.abs(state[3:6] - env.CUBE_CENTER) <= 0.15)
        assert env.GOAL_RANGE[0] <= goal[0] <= env.GOAL_RANGE[1]


def test_door_handle_placement_uniform_mean():
    env = DoorPush()
    rng = np.random.default_rng(1)
    handles = np.array([env.reset(rng)[0][3:6] for _ in range(10_000)])
    assert np.all(np.abs(handles.mean(axis=0) - env.CUBE_CENTER) < 0.02)


@pytest.mark.parametrize("name", ["planar_reach", "planar_push"])
def test_goal_sampling_uniform_mean(name):
    env = make_env(name)
    rng = np.random.default_rng(2)
    goals = np.array([env.reset(rng)[1] for _ in range(10_000)])
    assert np.all(np.abs(goals.mean(axis=0)) < 0.02)


@pytest.mark.parametrize("name", ["planar_reach", "planar_push", "planar_pick_place"])
def test_zero_action_keeps_objects(name):
    env = make_env(name)
    state, _ = env.reset(np.random.default_rng(4))
    nxt = env.step(np.zeros(2)).next_state
    assert np.array_equal(state, nxt)


@given(st.integers(0, 2**31), st.integers(0, 11))
@settings(max_examples=50)
def test_bitflip_toggles_exactly_one_bit(seed, i):
    env = make_env("bitflip12")
    state, _ = env.reset(np.random.default_rng(seed))
    action = 2.0 * state - 1.0          # request the current values: a no-op
    action[i] = 1.0 - 2.0 * state[i]    # except bit i
    nxt = env.step(action).next_state
    diff = np.flatnonzero(nxt != state)
    assert diff.tolist() == [i]


def test_bitflip_no_disagreement_is_noop():
    env = make_env("bitflip8")
    state, _ = env.reset(np.random.default_rng(0))
    assert np.array_equal(env.step(2 * state - 1).next_state, state)


def test_door_scripted_push_increases_angle():
    env = DoorPush()
    state, angles = scripted_door(env, np.random.default_rng(3))
    assert np.all(angles[:-3] == 0.0)
    assert np.all(np.diff(angles[-4:]) > 0)
    assert env.terminal_summary().hinge_angle > 0.05


def test_door_untouched_angle_zero():
    env = DoorPush()
    env.reset(np.random.default_rng(0))
    for _ in range(env.spec.horizon):
        env.step([-1.0, 0.0, 0.0])
    assert env.terminal_summary().hinge_angle == 0.0


def test_door_angle_clamped():
    env = DoorPush(horizon=200)
    rng = np.random.default_rng(5)
    state, angles = scripted_door(env, rng, push=150)
    assert 0.0 <= angles.min() and angles.max() <= np.pi / 2 + 1e-12


def test_terminal_summary_distance_recomputed():
    env = DoorPush()
    actions = np.random.default_rng(0).uniform(-1, 1, (env.spec.horizon, 3))
    states, _ = run_actions(env, 9, actions)
    s = env.terminal_summary()
    assert s.ee_handle_distance == pytest.approx(np.linalg.norm(states[-1][:3] - states[-1][3:6]), abs=1e-15)


def test_summary_before_done():
    env = make_env("planar_reach")
    env.reset(np.random.default_rng(0))
    with pytest.raises(UsageError):
        env.terminal_summary()


def test_step_after_done():
    env = make_env("bitflip4")
    env.reset(np.random.default_rng(0))
    for _ in range(env.spec.horizon):
        env.step(np.zeros(4))
    with pytest.raises(UsageError):
        env.step(np.zeros(4))


def test_clamp_flag():
    env = make_env("planar_reach")
    env.reset(np.random.default_rng(0))
    assert env.step([2.0, 0.0]).clamped
    assert not env.step([0.5, 0.0]).clamped


def test_reward_boundary_is_strict():
    env = make_env("planar_reach")
    assert env.compute_reward([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert env.compute_reward([0.05, 0.0], [0.0, 0.0]) == -1.0
    with pytest.raises(ValueError):
        env.compute_reward([0.0], [0.0, 0.0])


def test_reward_matches_distance_oracle():
    env = make_env("planar_push")
    rng = np.random.default_rng(6)
    a, b = rng.uniform(-0.1, 0.1, (1000, 2)), rng.uniform(-0.1, 0.1, (1000, 2))
    r = env.compute_reward(a, b)
    expected = [0.0 if np.sqrt(((x - y) ** 2).sum()) < 0.05 else -1.0 for x, y in zip(a, b)]
    assert r.tolist() == expected
    # pure: order of evaluation does not matter
    assert env.compute_reward(a[::-1], b[::-1]).tolist() == expected[::-1]


def test_slide_decay_and_midline():
    env = make_env("planar_slide")
    state, _ = env.reset(np.random.default_rng(0))
    for _ in range(env.spec.horizon):
        state = env.step([0.0, 1.0]).next_state
        assert state[1] <= env.MIDLINE - env.EFFECTOR_R + 1e-12
    # velocity decays geometrically once contact ends
    env2 = make_env("planar_slide")
    env2.reset(np.random.default_rng(0))
    env2.state = env2._pack(np.array([0.0, -0.25]), np.array([0.0, 0.0]), (0.01, 0.02))
    v0 = env2.state[6:8].copy()
    nxt = env2.step([0.0, 0.0]).next_state
    np.testing.assert_allclose(nxt[6:8], v0 * 0.95)


def test_door_images_differ_by_angle():
    env = DoorPush()
    state, _ = env.reset(np.random.default_rng(0))
    opened = state.copy()
    hinge = env.hinge(state[3:6], 0.0)
    opened[3:6] = env.handle_at(hinge, 0.4)
    opened[9] = 0.4
    assert np.any(env.render_terminal(state) != env.render_terminal(opened))


def test_effector_blob_overlaps_handle_blob():
    env = DoorPush()
    state, _ = env.reset(np.random.default_rng(2))
    state[:3] = state[3:6]
    img = env.render_terminal(state)
    r, c = env._px(state[3:6], 32, 1)
    assert img[int(round(r)), int(round(c))] == pytest.approx(1.0, abs=0.05)


def test_render_background_zero_and_range():
    env = make_env("planar_push")
    state, _ = env.reset(np.random.default_rng(0))
    img = env.render_terminal(state)
    assert img.min() == 0.0 and img.max() <= 1.0
    assert img[0, 0] == 0.0 and img[-1, -1] == 0.0


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).random((32, 32))
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n32 32\n255\n")
    back = read_pgm(tmp_path / "a.pgm")
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_episode_log_schema(tmp_path):
    env = DoorPush()
    rng = np.random.default_rng(0)
    state, goal = env.reset(rng)
    states, actions, achieved, rewards = [state], [], [env.achieved_goal(state)], []
    for _ in range(env.spec.horizon):
        a = rng.uniform(-1, 1, 3)
        res = env.step(a)
        states.append(res.next_state)
        actions.append(a)
        achieved.append(res.achieved_goal)
        rewards.append(res.reward)
    ep = Episode(3, 11, np.array(states), np.array(actions), np.array(achieved), goal,
                 np.array(rewards), env.terminal_summary())
    path = tmp_path / "log.jsonl"
    write_episode_log(path, [ep])
    rec = read_episode_log(path)[0]
    assert rec["episode_id"] == 3 and rec["seed"] == 11
    assert set(rec["transitions"][0]) == {"s", "a", "r", "s_next"}
    assert set(rec["summary"]) == {"hinge_angle", "distance", "achieved"}
    assert len(rec["transitions"]) == env.spec.horizon
    json.dumps(rec)


def test_registry_and_make_env():
    assert set(ALL[1:]) <= set(ENVIRONMENTS)
    assert make_env("bitflip12").spec.state_dim == 12
    assert make_env("bitflip(5)").spec.horizon == 5
    with pytest.raises(ValueError):
        make_env("cartpole")
