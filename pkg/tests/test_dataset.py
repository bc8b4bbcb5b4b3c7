"""
Testes do armazenamento de trajetórias, retornos, normalização e formato binário
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

# Adiciona o diretório app ao path
sys.path.insert(0, str(Path(__file__).parent.parent / 'app'))

from components.dataset import (Dataset, DatasetFormatError, EmptySupportError, Trajectory, discounted_return,
                                discounted_returns, load, rtg, sample_segment_batch, sample_segment_pair, save,
                                segment_pair_at, transition_batch)


def make_trajectory(index, T, terminal=False, seed=None, provenance="collected", labels=None):
    rng = np.random.default_rng(index if seed is None else seed)
    return Trajectory(
        states=rng.standard_normal((T, 4)),
        actions=rng.uniform(-1, 1, (T, 2)),
        rewards=rng.standard_normal(T),
        terminal=terminal,
        index=index,
        provenance=provenance,
        rtg_labels=labels,
    )


@pytest.fixture
def dataset():
    return Dataset.from_trajectories([make_trajectory(0, 12, terminal=True), make_trajectory(1, 9),
                                      make_trajectory(2, 3)])


def test_rtg_and_discounted_returns():
    traj = Trajectory(np.zeros((3, 4)), np.zeros((3, 2)), [1.0, 2.0, 3.0], False, 0)
    assert np.allclose(rtg(traj), [6.0, 5.0, 3.0])
    assert np.allclose(discounted_returns(traj.rewards, 0.5), [2.75, 3.5, 3.0])
    assert discounted_return(traj, 1, 0.5) == pytest.approx(3.5)


def test_discounted_return_argument_errors():
    traj = Trajectory(np.zeros((3, 4)), np.zeros((3, 2)), [1.0, 2.0, 3.0], False, 0)
    with pytest.raises(IndexError):
        discounted_return(traj, 3, 0.9)
    with pytest.raises(ValueError):
        discounted_return(traj, 0, 0.0)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 4)), np.zeros((2, 2)), np.zeros(3), False, 0)
    with pytest.raises(ValueError):
        Trajectory(np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0), False, 0)
    with pytest.raises(ValueError):
        make_trajectory(0, 4, labels=np.zeros(3))
    with pytest.raises(ValueError):
        Dataset.from_trajectories([make_trajectory(0, 4), make_trajectory(0, 5, seed=1)])


def test_trajectory_arrays_are_read_only():
    traj = make_trajectory(0, 4)
    with pytest.raises(ValueError):
        traj.states[0, 0] = 1.0


def test_norm_stats_use_collected_only(dataset):
    norm = dataset.norm
    states = np.concatenate([t.states for t in dataset])
    assert np.allclose(norm.state_mean, states.mean(axis=0))
    expanded = dataset.with_trajectories([make_trajectory(9, 5, provenance="expanded")], "expanded")
    assert expanded.norm.equals(norm)
    assert len(expanded) == 4


def test_std_floor_for_constant_feature():
    traj = Trajectory(np.ones((5, 4)), np.zeros((5, 2)), np.zeros(5), False, 0)
    norm = Dataset.from_trajectories([traj]).norm
    assert np.all(norm.state_std == 1e-6)
    assert np.all(np.isfinite(norm.normalize(traj.states, "states")))


def test_tokens_invert_to_raw_values(dataset):
    traj = dataset.get(0)
    tokens = dataset.norm.tokens(traj.states, traj.actions, traj.rewards)
    assert tokens.shape == (12, 4 + 2 + 1)
    s, a, r = dataset.norm.split_tokens(tokens, 4, 2)
    assert np.allclose(s, traj.states)
    assert np.allclose(a, traj.actions)
    assert np.allclose(r, traj.rewards)


def test_unknown_role_is_rejected(dataset):
    with pytest.raises(ValueError):
        dataset.norm.normalize([1.0], "values")


def test_windows_cover_valid_range(dataset):
    windows = dataset.windows(2, 3)
    assert {tuple(w) for w in windows if w[0] == 0} == {(0, t) for t in range(1, 9)}
    assert {tuple(w) for w in windows if w[0] == 1} == {(1, t) for t in range(1, 6)}
    assert not any(w[0] == 2 for w in windows)


def test_segment_pairs_are_uniform_over_valid_windows(dataset):
    K, H = 2, 3
    rng = np.random.default_rng(0)
    draws = [sample_segment_pair(dataset, K, H, rng) for _ in range(100_000)]
    for pair in draws:
        T = dataset.get(pair.n).T
        assert K - 1 <= pair.t <= T - 1 - H
    windows = [tuple(w) for w in dataset.windows(K, H)]
    position = {w: i for i, w in enumerate(windows)}
    counts = np.bincount([position[(pair.n, pair.t)] for pair in draws], minlength=len(windows))
    assert stats.chisquare(counts).pvalue > 0.001


def test_segment_pair_slices(dataset):
    pair = segment_pair_at(dataset, 0, 4, 3, 2)
    traj = dataset.get(0)
    assert np.array_equal(pair.cond_states, traj.states[2:5])
    assert np.array_equal(pair.next_actions, traj.actions[5:7])
    assert pair.ret == pytest.approx(dataset.returns_of(0)[4])
    with pytest.raises(IndexError):
        segment_pair_at(dataset, 0, 1, 3, 2)
    with pytest.raises(IndexError):
        segment_pair_at(dataset, 0, 10, 3, 2)


def test_empty_support_is_reported():
    short = Dataset.from_trajectories([make_trajectory(0, 3)])
    with pytest.raises(EmptySupportError):
        sample_segment_pair(short, 2, 2, np.random.default_rng(0))


def test_segment_batch_shapes(dataset):
    batch = sample_segment_batch(dataset, 2, 3, 5, np.random.default_rng(0))
    assert batch.cond.shape == (5, 2, 7)
    assert batch.successor.shape == (5, 3, 7)
    assert batch.ret.shape == (5,)
    assert batch.sources.shape == (5, 2)


def test_transitions_respect_terminal_flag(dataset):
    flat = dataset._transitions
    # terminal: 12 transições; não terminal: T−1
    assert len(flat.s) == 12 + 8 + 2
    assert flat.done.sum() == 1
    end = np.flatnonzero(flat.done)[0]
    assert np.array_equal(flat.s2[end], dataset.get(0).states[-1])
    batch = transition_batch(dataset, 16, np.random.default_rng(0))
    assert batch.s.shape == (16, 4)


def test_enumeration_ignores_storage_order():
    trajs = [make_trajectory(i, 6 + i, terminal=i % 2 == 0) for i in range(4)]
    a = Dataset.from_trajectories(trajs)
    b = Dataset(tuple(reversed(trajs)), a.norm)
    assert np.array_equal(a.windows(2, 2), b.windows(2, 2))
    assert np.array_equal(a._transitions.s, b._transitions.s)
    assert np.array_equal(a._transitions.ret, b._transitions.ret)


def test_save_and_load_is_bit_exact(dataset, tmp_path):
    expanded = dataset.with_trajectories([make_trajectory(7, 4, provenance="expanded",
                                                          labels=np.arange(4.0))], "expanded")
    path = save(expanded, tmp_path / "data.bgd")
    loaded = load(path)
    assert loaded.equals(expanded)
    assert loaded.get(7).rtg_labels.tolist() == [0.0, 1.0, 2.0, 3.0]


def test_corrupt_files_report_offsets(dataset, tmp_path):
    path = save(dataset, tmp_path / "data.bgd")
    raw = path.read_bytes()
    path.write_bytes(raw[:40])
    with pytest.raises(DatasetFormatError, match="offset"):
        load(path)
    path.write_bytes(b"BADDATA" + raw[7:])
    with pytest.raises(DatasetFormatError, match="offset 0"):
        load(path)
    path.write_bytes(raw + b"\x00")
    with pytest.raises(DatasetFormatError, match=f"offset {len(raw)}"):
        load(path)
