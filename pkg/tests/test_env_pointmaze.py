"""
Testes do labirinto de ponto-massa e dos coletores roteirizados
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

# Adiciona o diretório app ao path
sys.path.insert(0, str(Path(__file__).parent.parent / 'app'))

from components.env_pointmaze import (EnvState, MazeStateError, RandomPolicy, collect_dataset, parse_layout,
                                      reached_goal, reference_returns, rollout, sample_start, scripted_policy,
                                      step, stitch_maze_routes, stitch_maze_spec)


@pytest.fixture(scope="module")
def maze():
    return stitch_maze_spec()


def test_layout_is_parsed(maze):
    assert maze.walls.shape == (8, 8)
    assert maze.goal == (3.5, 6.5)
    assert maze.is_free(np.array([1.5, 1.5]))
    assert not maze.is_free(np.array([0.5, 0.5]))
    assert not maze.is_free(np.array([-0.1, 1.5]))


def test_layout_validation():
    with pytest.raises(ValueError):
        parse_layout("#S#\n#G")
    with pytest.raises(ValueError):
        parse_layout("####\n#SS#\n#G.#\n####")
    with pytest.raises(ValueError):
        parse_layout("###\n#S#\n###")


def test_collision_zeroes_blocked_axis(maze):
    state = EnvState(np.array([1.05, 1.5]), np.array([-1.0, 0.0]))
    nxt, reward, done = step(maze, state, [-1.0, 0.0])
    assert nxt.pos[0] == pytest.approx(1.05)
    assert nxt.vel[0] == 0.0
    assert nxt.t == 1
    assert reward == 0.0
    assert not done


def test_free_motion_integrates_velocity(maze):
    state = EnvState(np.array([2.0, 1.5]), np.zeros(2))
    nxt, _, _ = step(maze, state, [1.0, 0.0])
    assert np.allclose(nxt.vel, [0.1, 0.0])
    assert np.allclose(nxt.pos, [2.01, 1.5])


def test_actions_and_velocity_are_clipped(maze):
    state = EnvState(np.array([2.0, 1.5]), np.array([1.0, 0.0]))
    nxt, _, _ = step(maze, state, [5.0, 0.0])
    assert nxt.vel[0] == pytest.approx(maze.vmax)


def test_reaching_goal_gives_sparse_reward(maze):
    state = EnvState(np.array([3.5, 6.2]), np.zeros(2))
    _, reward, done = step(maze, state, [0.0, 0.0])
    assert reward == 1.0
    assert done
    assert reached_goal(maze, np.array([3.5, 6.2]))


def test_dense_reward_is_negative_distance():
    maze = stitch_maze_spec(reward_mode="dense")
    state = EnvState(np.array([3.5, 6.2]), np.zeros(2))
    _, reward, done = step(maze, state, [0.0, 0.0])
    assert reward == pytest.approx(-0.3 * maze.dt)
    assert not done


def test_invalid_state_is_rejected(maze):
    with pytest.raises(MazeStateError):
        step(maze, EnvState(np.array([0.5, 0.5]), np.zeros(2)), [0.0, 0.0])
    with pytest.raises(MazeStateError):
        step(maze, EnvState(np.array([1.5, 1.5]), np.array([2.0, 0.0])), [0.0, 0.0])


def test_episode_truncates_at_max_steps():
    maze = stitch_maze_spec(max_steps=20)
    rng = np.random.default_rng(0)
    ep = rollout(maze, RandomPolicy(), sample_start(maze, rng), rng)
    assert len(ep.states) == 20
    assert not ep.terminal
    assert ep.states.shape == (20, 4)


def test_scripted_policy_rests_at_waypoint():
    state = EnvState(np.array([2.5, 1.5]), np.zeros(2))
    action = scripted_policy(state, [(2.5, 1.5)], 0.0, np.random.default_rng(0))
    assert np.allclose(action, 0.0)


def test_scripted_policy_points_towards_waypoint():
    state = EnvState(np.array([1.5, 1.5]), np.zeros(2))
    action = scripted_policy(state, [(3.5, 1.5)], 0.0, np.random.default_rng(0))
    assert action[0] > 0
    assert action[1] == pytest.approx(0.0)


def test_start_positions_are_uniform(maze):
    rng = np.random.default_rng(0)
    xs = np.array([sample_start(maze, rng).pos[0] for _ in range(2000)])
    (x0, _), (x1, _) = maze.start_box
    counts, _ = np.histogram(xs, bins=5, range=(x0, x1))
    assert stats.chisquare(counts).pvalue > 0.001


def test_stitch_dataset_never_links_start_to_goal(maze):
    routes, _ = stitch_maze_routes(maze, count_a=3, count_b=3)
    dataset = collect_dataset(maze, routes, seed=0)
    (x0, y0), (x1, y1) = maze.start_box
    from_start = [
        traj for traj in dataset
        if x0 <= traj.states[0, 0] <= x1 and y0 <= traj.states[0, 1] <= y1
    ]
    assert len(from_start) == 3
    assert not any(traj.terminal for traj in from_start)
    assert not any(traj.rewards.max() > 0 for traj in from_start)
    starts = {traj.index for traj in from_start}
    family_b = [traj for traj in dataset if traj.index not in starts]
    assert len(family_b) == 3
    for traj in family_b:
        assert traj.terminal and traj.rewards[-1] == 1.0
    assert [traj.index for traj in dataset] == list(range(6))


def test_random_actions_never_enter_walls(maze):
    rng = np.random.default_rng(0)
    state = sample_start(maze, rng)
    for _ in range(100_000):
        state, _, done = step(maze, state, rng.uniform(-1.5, 1.5, size=2))
        assert maze.is_free(state.pos)
        if done:
            state = sample_start(maze, rng)


def test_collection_is_deterministic(maze):
    routes, _ = stitch_maze_routes(maze, count_a=2, count_b=2)
    a = collect_dataset(maze, routes, seed=4)
    b = collect_dataset(maze, routes, seed=4)
    assert a.equals(b)


def test_reference_returns_order_random_below_expert(maze):
    _, expert = stitch_maze_routes(maze)
    random_ret, expert_ret = reference_returns(maze, expert, episodes=5, seed=0, expert_episodes=3)
    assert expert_ret == 1.0
    assert random_ret < expert_ret
