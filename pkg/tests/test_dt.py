"""
Testes do Decision Transformer: causalidade, janelas, treino e avaliação
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Adiciona o diretório app ao path
sys.path.insert(0, str(Path(__file__).parent.parent / 'app'))

from components.dataset import Dataset, Trajectory
from components.dt import (DTBatch, DTConfig, DTPolicy, History, dt_train_step, evaluate, normalized_score,
                           predict_action, sample_windows, target_rtg, train_dt, window_at)
from components.env_pointmaze import stitch_maze_routes, stitch_maze_spec

TINY = DTConfig(context=4, width=8, depth=1, heads=2, max_timestep=64, batch=8)


def random_dataset(count=3, T=12, seed=0, zero_actions=False):
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(count):
        actions = np.zeros((T, 2)) if zero_actions else rng.uniform(-1, 1, (T, 2))
        trajs.append(Trajectory(rng.standard_normal((T, 4)), actions, np.abs(rng.standard_normal(T)), False, i))
    return Dataset.from_trajectories(trajs)


def random_batch(rng, B=2, K=6):
    return DTBatch(
        rtg=rng.standard_normal((B, K, 1)), states=rng.standard_normal((B, K, 4)),
        actions=rng.uniform(-1, 1, (B, K, 2)), timesteps=np.tile(np.arange(K), (B, 1)),
        mask=np.ones((B, K), dtype=bool),
    )


class ZeroPolicy:
    def reset(self):
        pass

    def act(self, state, rtg, rng):
        return np.zeros(2)


def test_outputs_ignore_future_tokens():
    policy = DTPolicy(4, 2, DTConfig(context=6, width=8, depth=2, heads=2, max_timestep=16), seed=0)
    for seed in range(20):
        check_causal_window(policy, random_batch(np.random.default_rng(seed), B=5))


def check_causal_window(policy, batch):
    base = policy.forward(batch)[0].data
    changed = DTBatch(batch.rtg.copy(), batch.states.copy(), batch.actions.copy(), batch.timesteps, batch.mask)
    changed.rtg[:, 3:] += 5.0
    changed.states[:, 3:] -= 5.0
    changed.actions[:, 2:] = -changed.actions[:, 2:]
    other = policy.forward(changed)[0].data
    assert np.allclose(base[:, :3], other[:, :3], atol=1e-12)
    assert not np.allclose(base[:, 3:], other[:, 3:])


def test_prediction_uses_only_last_context_steps():
    policy = DTPolicy(4, 2, TINY, seed=1)
    rng = np.random.default_rng(1)
    history = History()
    for t in range(6):
        history.append(1.0 - 0.1 * t, rng.standard_normal(4), rng.uniform(-1, 1, 2), t)
    s_t = rng.standard_normal(4)
    base = predict_action(policy, history, 0.3, s_t, 6)
    history.states[0] = history.states[0] + 100.0
    history.actions[2] = -history.actions[2]
    history.rtgs[1] = 42.0
    assert np.array_equal(base, predict_action(policy, history, 0.3, s_t, 6))
    history.states[4] = history.states[4] + 1.0
    assert not np.array_equal(base, predict_action(policy, history, 0.3, s_t, 6))


def test_malformed_history_is_rejected():
    policy = DTPolicy(4, 2, TINY)
    history = History()
    history.append(1.0, np.zeros(4), np.zeros(2), 3)
    with pytest.raises(ValueError, match="cronológica"):
        predict_action(policy, history, 1.0, np.zeros(4), 2)
    with pytest.raises(ValueError):
        predict_action(policy, history, 1.0, np.zeros(3), 4)
    history.actions.append(np.zeros(2))
    with pytest.raises(ValueError):
        predict_action(policy, history, 1.0, np.zeros(4), 4)


def test_first_step_prediction_has_no_history():
    policy = DTPolicy(4, 2, TINY, seed=2)
    action = predict_action(policy, History(), 1.0, np.ones(4), 0)
    assert action.shape == (2,)
    assert np.isfinite(action).all()


def test_windows_are_left_padded():
    data = random_dataset()
    policy = DTPolicy.for_dataset(data, TINY)
    rtg, states, actions, timesteps, mask = window_at(policy, data, 1, 1)
    assert mask.tolist() == [False, False, True, True]
    assert timesteps.tolist() == [0, 0, 0, 1]
    traj = data.get(1)
    labels = np.cumsum(traj.rewards[::-1])[::-1]
    assert np.allclose(rtg[2:, 0], labels[:2] * policy.rtg_scale)
    assert np.allclose(actions[2:], traj.actions[:2])
    assert np.all(states[:2] == 0)


def test_rtg_scale_uses_best_collected_return():
    data = random_dataset()
    policy = DTPolicy.for_dataset(data, TINY)
    best = max(t.rewards.sum() for t in data)
    assert policy.rtg_scale == pytest.approx(1.0 / best)
    assert target_rtg(data) == pytest.approx(best)
    assert target_rtg(data, 2.0) == pytest.approx(2.0 * best)


def test_target_rtg_sees_expanded_labels():
    data = random_dataset()
    extra = Trajectory(np.zeros((2, 4)), np.zeros((2, 2)), [0.0, 0.0], False, 9, "expanded",
                       rtg_labels=[100.0, 50.0])
    assert target_rtg(data.with_trajectories([extra], "expanded")) == 100.0


def test_window_sampling_ignores_storage_order():
    data = random_dataset(count=4)
    shuffled = Dataset(tuple(reversed(data.trajectories)), data.norm)
    policy = DTPolicy.for_dataset(data, TINY)
    a = sample_windows(policy, data, 8, np.random.default_rng(0))
    b = sample_windows(policy, shuffled, 8, np.random.default_rng(0))
    for name in ("rtg", "states", "actions", "timesteps", "mask"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_zero_head_on_zero_actions_has_zero_loss():
    data = random_dataset(zero_actions=True)
    policy = DTPolicy.for_dataset(data, DTConfig(context=4, width=8, depth=1, heads=2, max_timestep=64,
                                                 zero_head=True))
    batch = sample_windows(policy, data, 8, np.random.default_rng(0))
    assert dt_train_step(policy, batch) == 0.0


def test_training_is_deterministic():
    data = random_dataset()
    runs = [train_dt(DTPolicy.for_dataset(data, TINY, seed=4), data, 4, np.random.default_rng(7))
            for _ in range(2)]
    assert runs[0] == runs[1]


def test_checkpoint_round_trip(tmp_path):
    data = random_dataset()
    policy = DTPolicy.for_dataset(data, TINY, seed=5)
    policy.save(tmp_path / "dt.ckpt")
    loaded = DTPolicy.load(tmp_path / "dt.ckpt")
    assert loaded.rtg_scale == policy.rtg_scale
    assert loaded.config == TINY
    state = np.ones(4)
    assert np.array_equal(predict_action(policy, History(), 1.0, state, 0),
                          predict_action(loaded, History(), 1.0, state, 0))


def test_normalized_score():
    assert normalized_score(1.0, 0.0, 1.0) == 100.0
    assert normalized_score(0.5, 0.0, 2.0) == 25.0
    with pytest.raises(ValueError):
        normalized_score(1.0, 1.0, 1.0)


def test_zero_action_policy_never_succeeds():
    maze = stitch_maze_spec(max_steps=30)
    report = evaluate(ZeroPolicy(), maze, 1.0, 3, seed=0, references=(0.0, 1.0))
    assert report.success_rate == 0.0
    assert report.normalized_score == 0.0
    assert report.records()[-1]["summary"]


def test_expert_route_scores_one_hundred():
    maze = stitch_maze_spec()
    _, expert = stitch_maze_routes(maze)
    report = evaluate(expert.policy(), maze, 1.0, 2, seed=0, references=(0.0, 1.0))
    assert report.success_rate == 1.0
    assert report.normalized_score == pytest.approx(100.0)


def test_evaluation_tracks_return_to_go():
    maze = stitch_maze_spec(reward_mode="dense", max_steps=15)
    policy = DTPolicy(4, 2, TINY, rtg_scale=0.1, seed=6)
    first = evaluate(policy, maze, -3.0, 2, seed=1, references=(-10.0, 0.0))
    second = evaluate(policy, maze, -3.0, 2, seed=1, references=(-10.0, 0.0))
    assert first.traces == second.traces
    for trace in first.traces:
        rtg, rewards = np.array(trace["rtg"]), np.array(trace["rewards"])
        assert rtg[0] == -3.0
        assert np.allclose(rtg[1:], rtg[:-1] - rewards[:-1])
        assert trace["steps"] == 15
        assert len(trace["positions"]) == 15


@pytest.mark.slow
def test_memorizes_a_single_window():
    rng = np.random.default_rng(0)
    T = 4
    traj = Trajectory(np.cumsum(rng.standard_normal((T, 4)), axis=0), rng.uniform(-0.8, 0.8, (T, 2)),
                      np.ones(T), False, 0)
    data = Dataset.from_trajectories([traj])
    config = DTConfig(context=T, width=32, depth=2, heads=2, max_timestep=16, lr=3e-3, batch=16)
    policy = DTPolicy.for_dataset(data, config, seed=0)
    train_dt(policy, data, 3000, np.random.default_rng(1))
    batch = DTBatch(*(column[None] for column in window_at(policy, data, 0, T - 1)))
    out = policy.forward(batch)[0].data[0]
    assert ((out - traj.actions) ** 2).mean() < 1e-3
