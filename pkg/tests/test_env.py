import numpy as np
import pytest

from pevdn.env import (CLIMBING_PAYOFF, ClimbingGame, EnvOptions, EnvSpec, GridLayout, GridWorld,
                       HistoryWindow, brute_force_optimal, make_env, parse_payoff, run_episode)
from pevdn.errors import ActionOutOfRange, StepAfterDone, UnsupportedEnv

STAY, NORTH, SOUTH, EAST, WEST = range(5)


def test_climbing_reset_observation():
    obs = ClimbingGame().reset()
    assert len(obs) == 2 and all(o.tolist() == [1.0] for o in obs)


def test_climbing_step_payoffs():
    env = ClimbingGame()
    env.reset()
    _, r, done, success = env.step([0, 0])
    assert (r, done, success) == (11.0, True, True)
    env.reset()
    _, r, done, success = env.step([0, 1])
    assert (r, done, success) == (-30.0, True, False)


def test_climbing_step_after_done():
    env = ClimbingGame()
    env.reset()
    env.step([2, 2])
    with pytest.raises(StepAfterDone):
        env.step([2, 2])


def test_action_out_of_range():
    env = ClimbingGame()
    env.reset()
    with pytest.raises(ActionOutOfRange):
        env.step([0, 3])
    with pytest.raises(ActionOutOfRange):
        env.step([0])


def test_brute_force_climbing():
    assert brute_force_optimal(ClimbingGame()) == ((0, 0), 11.0)


def test_brute_force_zero_table_tie_break():
    assert brute_force_optimal(ClimbingGame(np.zeros((3, 3)))) == ((0, 0), 0.0)


def test_brute_force_xor():
    assert brute_force_optimal(ClimbingGame([[0, 1], [1, 0]]))[1] == 1.0


def test_brute_force_rejects_gridworld():
    with pytest.raises(UnsupportedEnv):
        brute_force_optimal(GridWorld())


def test_brute_force_matches_table_max():
    env = ClimbingGame()
    joint, value = brute_force_optimal(env)
    assert value == np.max(CLIMBING_PAYOFF) == env.payoff[joint]


def test_gridworld_golden_reset():
    env = GridWorld()
    obs = env.reset(np.random.default_rng(2024))
    cells = [tuple(int(round(v * 4)) for v in o) for o in obs]
    assert cells == [(3, 0), (0, 2), (1, 0)]


def test_gridworld_reset_deterministic():
    a = GridWorld().reset(np.random.default_rng(9))
    b = GridWorld().reset(np.random.default_rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_gridworld_random_starts_distinct_and_off_goal():
    env = GridWorld()
    for seed in range(50):
        env.reset(np.random.default_rng(seed))
        cells = {tuple(p) for p in env.positions}
        assert len(cells) == 3 and (4, 4) not in cells


def test_gridworld_walls_clip():
    env = GridWorld(layout=GridLayout(starts=((0, 0), (0, 4), (4, 0))))
    env.reset()
    _, r, done, success = env.step([WEST, WEST, SOUTH])
    assert env.positions.tolist() == [[0, 0], [0, 4], [4, 0]]
    assert r == pytest.approx(-0.05) and not done and not success


def test_gridworld_moves():
    env = GridWorld(layout=GridLayout(starts=((2, 2), (2, 2), (2, 2))))
    env.reset()
    env.step([NORTH, EAST, STAY])
    assert env.positions.tolist() == [[2, 3], [3, 2], [2, 2]]


def test_gridworld_goal_terminates():
    env = GridWorld(layout=GridLayout(starts=((3, 4), (4, 3), (4, 4))))
    env.reset()
    _, r, done, success = env.step([EAST, NORTH, STAY])
    assert (r, done, success) == (1.0, True, True)


def test_gridworld_time_limit():
    env = GridWorld(layout=GridLayout(starts=((0, 0), (0, 0), (0, 0))), max_steps=3)
    env.reset()
    for t in range(3):
        _, _, done, success = env.step([STAY] * 3)
    assert done and not success
    with pytest.raises(StepAfterDone):
        env.step([STAY] * 3)


def test_gridworld_observations_normalized():
    env = GridWorld(layout=GridLayout(starts=((4, 0), (1, 2), (0, 4))))
    obs = env.reset()
    assert [o.tolist() for o in obs] == [[1.0, 0.0], [0.25, 0.5], [0.0, 1.0]]


def test_env_spec_validation():
    with pytest.raises(ValueError):
        EnvSpec(1, 1, 3, 0.9, 1)
    with pytest.raises(ValueError):
        EnvSpec(2, 1, 1, 0.9, 1)
    with pytest.raises(ValueError):
        EnvSpec(2, 1, 3, 1.0, 1)


def test_history_window_padding_and_shift():
    w = HistoryWindow(3, 2, 3)
    first = w.reset([0.5, 0.25])
    assert first.shape == (15,)
    assert np.all(first[:10] == 0)
    assert first[10:].tolist() == [0.5, 0.25, 0, 0, 0]
    second = w.push([1.0, 0.0], 2)
    assert np.array_equal(second[:10], first[5:])
    assert second[10:].tolist() == [1.0, 0.0, 0, 0, 1.0]


def test_history_window_shift_property(rng):
    w = HistoryWindow(4, 2, 5)
    prev = w.reset(rng.random(2))
    for _ in range(10):
        obs, a = rng.random(2), int(rng.integers(5))
        cur = w.push(obs, a)
        slot = np.concatenate([obs, np.eye(5)[a]])
        assert np.array_equal(cur, np.concatenate([prev[7:], slot]))
        prev = cur


def _goal_seeker(goal=(4, 4)):
    def policy(tau):
        x, y = (round(v * 4) for v in tau[-7:-5])
        if x < goal[0]:
            return EAST
        if y < goal[1]:
            return NORTH
        return STAY
    return policy


def test_run_episode_scripted_success(rng):
    env = GridWorld(layout=GridLayout(starts=((3, 4), (4, 3), (2, 4))))
    ep = run_episode(env, [_goal_seeker()] * 3, 4, rng)
    assert ep.success and len(ep) == 2
    assert ep.rewards.tolist() == [-0.05, 1.0]
    assert ep.dones.tolist() == [False, True]


def test_run_episode_shapes_and_shared_reward(rng):
    env = GridWorld()
    pol = [lambda tau: int(rng.integers(5))] * 3
    ep = run_episode(env, pol, 4, rng)
    assert 1 <= len(ep) <= 25
    assert ep.taus.shape == (3, len(ep), 4 * 7)
    assert ep.actions.shape == (3, len(ep))
    local = ep.local(1)
    assert np.array_equal(local.rewards, ep.rewards)
    # next window of step t is the window of step t + 1
    assert np.array_equal(ep.next_taus[:, :-1], ep.taus[:, 1:])
    assert ep.success == bool(ep.dones[-1] and ep.rewards[-1] == 1.0)


def test_run_episode_agents_see_only_their_own_window(rng):
    env = GridWorld(layout=GridLayout(starts=((0, 0), (4, 0), (0, 4))))
    seen = {0: [], 1: [], 2: []}

    def make(i):
        def policy(tau):
            seen[i].append(tau.copy())
            return STAY
        return policy

    run_episode(env, [make(i) for i in range(3)], 2, rng)
    assert seen[1][0][-7:-5].tolist() == [1.0, 0.0]
    assert seen[2][0][-7:-5].tolist() == [0.0, 1.0]


def test_make_env_overrides():
    env = make_env(EnvOptions(name="climbing", payoff="1,0;0,2"))
    assert brute_force_optimal(env) == ((1, 1), 2.0)
    grid = make_env(EnvOptions(name="gridworld", grid_size=4, goal="3,3", starts="0,0;1,1", n_agents=2))
    assert grid.spec.n_agents == 2 and grid.layout.size == 4
    with pytest.raises(UnsupportedEnv):
        make_env(EnvOptions(name="smac"))


def test_parse_payoff():
    assert parse_payoff("11,-30,0; -30,7,6; 0,0,5").tolist() == [list(r) for r in CLIMBING_PAYOFF]
