"""
Testes do modelo de difusão: cronograma, pré-condicionamento, treino e amostragem
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Adiciona o diretório app ao path
sys.path.insert(0, str(Path(__file__).parent.parent / 'app'))

from components.dataset import Dataset, Trajectory, sample_segment_batch
from components.diffusion import (Condition, DenoiserModel, DiffusionConfig, NoiseSchedule, c_in, c_noise,
                                  c_out, c_skip, denoising_loss, diffusion_train_step, loss_weight,
                                  noise_features, perturb, sample, sample_batch, train_diffusion)
from components.env_pointmaze import EnvState, collect_dataset, step, stitch_maze_routes, stitch_maze_spec
from components.neural_core import NonFiniteError

TINY = DiffusionConfig(K=2, H=3, width=8, depth=1, heads=2, n_freq=2, n_sigma=3, batch=4)


def random_dataset(count=3, T=10):
    rng = np.random.default_rng(0)
    trajs = [
        Trajectory(rng.standard_normal((T, 4)), rng.uniform(-1, 1, (T, 2)), rng.standard_normal(T), False, i)
        for i in range(count)
    ]
    return Dataset.from_trajectories(trajs)


@pytest.fixture
def data():
    return random_dataset()


def conditions(data, count):
    out = []
    for n in range(count):
        traj = data.get(n % len(data))
        tokens = data.norm.tokens(traj.states[:TINY.K], traj.actions[:TINY.K], traj.rewards[:TINY.K])
        out.append(Condition(tokens, 0.1 * n))
    return out


def test_ladder_endpoints_and_order():
    ladder = NoiseSchedule(0.002, 80.0, 7.0, 10).ladder()
    assert len(ladder) == 11
    assert ladder[0] == 80.0
    assert ladder[-2] == 0.002
    assert ladder[-1] == 0.0
    assert np.all(np.diff(ladder) < 0)


def test_single_step_ladder():
    assert NoiseSchedule(steps=1).ladder().tolist() == [80.0, 0.0]


def test_ladder_interpolates_in_rho_space():
    ladder = NoiseSchedule(1.0, 16.0, 2.0, 3).ladder()
    assert ladder[1] == pytest.approx(((4.0 + 1.0) / 2) ** 2)


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(sigma_min=1.0, sigma_max=0.5)
    with pytest.raises(ValueError):
        NoiseSchedule(steps=0)
    with pytest.raises(ValueError):
        DiffusionConfig(width=10, heads=4)


def test_preconditioning_coefficients():
    sigma = np.array([0.01, 0.5, 1.0, 10.0])
    assert np.allclose(loss_weight(sigma) * c_out(sigma) ** 2, 1.0)
    assert np.allclose(c_in(sigma) * np.sqrt(sigma ** 2 + 1.0), 1.0)
    assert np.allclose(c_skip(sigma) + sigma ** 2 * c_in(sigma) ** 2, 1.0)
    assert c_skip(0.0) == 1.0
    assert c_out(0.0) == 0.0
    assert c_noise(np.exp(4.0)) == pytest.approx(1.0)


def test_perturb_statistics():
    rng = np.random.default_rng(0)
    x0 = np.ones((4000, 3))
    assert np.array_equal(perturb(x0, 0.0, rng), x0)
    noisy = perturb(x0, 2.0, rng)
    assert (noisy - x0).std() == pytest.approx(2.0, rel=0.05)
    per_row = perturb(np.zeros((2, 3, 5)), np.array([0.0, 1.0]), rng)
    assert np.all(per_row[0] == 0)
    with pytest.raises(ValueError):
        perturb(x0, -1.0, rng)


def test_noise_features_shape():
    feats = noise_features(np.array([0.5, 2.0, 3.0]), 4)
    assert feats.shape == (3, 8)
    assert np.allclose(feats[:, :4] ** 2 + feats[:, 4:] ** 2, 1.0)


def test_denoiser_is_identity_at_tiny_noise(data):
    model = DenoiserModel(7, TINY, seed=0)
    x = np.random.default_rng(0).standard_normal((2, TINY.H, 7))
    cond = np.stack([c.flat() for c in conditions(data, 2)])
    assert np.allclose(model.denoise(x, 1e-9, cond), x, atol=1e-6)


def test_denoiser_argument_errors(data):
    model = DenoiserModel(7, TINY, seed=0)
    x = np.zeros((1, TINY.H, 7))
    cond = conditions(data, 1)[0].flat()[None, :]
    with pytest.raises(ValueError):
        model.denoise(x, 0.0, cond)
    with pytest.raises(ValueError, match="K=2"):
        model.denoise(x, 1.0, cond[:, :-3])


def test_condition_validation():
    with pytest.raises(ValueError):
        Condition(np.zeros(7), 0.0)
    with pytest.raises(ValueError):
        Condition(np.zeros((2, 7)), np.nan)


def test_loss_matches_preconditioned_denoiser(data):
    model = DenoiserModel(7, TINY, seed=1)
    rng = np.random.default_rng(0)
    batch = sample_segment_batch(data, TINY.K, TINY.H, 4, rng)
    sigma = np.array([0.1, 0.5, 1.0, 5.0])
    eps = rng.standard_normal(batch.successor.shape)
    loss, d_out, _ = denoising_loss(model, batch, sigma, eps)
    cond = np.concatenate([batch.cond.reshape(4, -1), batch.ret[:, None]], axis=-1)
    denoised = model.denoise(batch.successor + sigma[:, None, None] * eps, sigma, cond)
    weight = loss_weight(sigma)[:, None, None]
    expected = (weight * (denoised - batch.successor) ** 2).mean()
    assert loss == pytest.approx(expected, rel=1e-10)
    assert d_out.shape == batch.successor.shape


def test_training_is_deterministic(data):
    histories, params = [], []
    for _ in range(2):
        model = DenoiserModel(7, TINY, seed=2)
        histories.append(train_diffusion(model, data, 4, np.random.default_rng(5)))
        params.append(model.params)
    assert histories[0] == histories[1]
    for path in params[0]:
        assert np.array_equal(params[0][path].data, params[1][path].data)


def test_train_step_reduces_loss_on_fixed_batch(data):
    model = DenoiserModel(7, DiffusionConfig(K=2, H=3, width=8, depth=1, heads=2, n_freq=2, lr=1e-2), seed=0)
    batch = sample_segment_batch(data, 2, 3, 8, np.random.default_rng(0))
    sigma = np.full(8, 0.5)
    eps = np.random.default_rng(1).standard_normal(batch.successor.shape)
    first, _, _ = denoising_loss(model, batch, sigma, eps)
    for i in range(30):
        diffusion_train_step(model, batch, np.random.default_rng(i))
    last, _, _ = denoising_loss(model, batch, sigma, eps)
    assert last < first


def test_batched_sampling_matches_single_sampling(data):
    model = DenoiserModel(7, TINY, seed=3)
    conds = conditions(data, 3)
    schedule = TINY.schedule()
    batched = sample_batch(model, conds, schedule, [np.random.default_rng(k) for k in range(3)])
    for k, cond in enumerate(conds):
        single = sample(model, cond, schedule, np.random.default_rng(k))
        assert single.shape == (TINY.H, 7)
        assert np.array_equal(single, batched[k])


def test_sampled_segment_independent_of_batch_companions(data):
    """O ramo de uma condição não depende de quem divide o lote com ela"""
    model = DenoiserModel(7, DiffusionConfig(K=2, H=3, width=16, depth=2, heads=2, n_freq=4), seed=5)
    conds = conditions(data, 3)
    schedule = model.config.schedule()
    full = sample_batch(model, conds, schedule, [np.random.default_rng(k) for k in range(3)])
    reordered = sample_batch(model, conds[::-1], schedule, [np.random.default_rng(k) for k in (2, 1, 0)])
    alone = sample_batch(model, conds[1:2], schedule, [np.random.default_rng(1)])
    assert np.array_equal(full, reordered[::-1])
    assert np.array_equal(full[1], alone[0])


def test_sampling_argument_and_finiteness_errors(data):
    model = DenoiserModel(7, TINY, seed=3)
    conds = conditions(data, 2)
    with pytest.raises(ValueError):
        sample_batch(model, conds, TINY.schedule(), [np.random.default_rng(0)])
    model.params["diffusion/out/b"].data[:] = np.nan
    with pytest.raises(NonFiniteError):
        sample(model, conds[0], TINY.schedule(), np.random.default_rng(0))


def test_checkpoint_round_trip(data, tmp_path):
    model = DenoiserModel(7, TINY, seed=4)
    model.save(tmp_path / "diff.ckpt")
    loaded = DenoiserModel.load(tmp_path / "diff.ckpt")
    assert loaded.config == TINY
    cond = conditions(data, 1)[0]
    a = sample(model, cond, TINY.schedule(), np.random.default_rng(0))
    b = sample(loaded, cond, TINY.schedule(), np.random.default_rng(0))
    assert np.array_equal(a, b)


@pytest.mark.slow
def test_overfits_single_segment():
    rng = np.random.default_rng(0)
    T = 5
    states = np.cumsum(rng.standard_normal((T, 4)), axis=0)
    traj = Trajectory(states, rng.uniform(-1, 1, (T, 2)), rng.standard_normal(T), False, 0)
    data = Dataset.from_trajectories([traj])
    config = DiffusionConfig(K=2, H=3, width=32, depth=2, heads=2, n_freq=4, n_sigma=10, lr=2e-3, batch=16)
    model = DenoiserModel(7, config, seed=0)
    train_diffusion(model, data, 4000, np.random.default_rng(1))
    batch = sample_segment_batch(data, 2, 3, 1, rng)
    cond = Condition(batch.cond[0], batch.ret[0])
    x0 = batch.successor[:1]
    noisy = x0 + config.sigma_min * np.random.default_rng(3).standard_normal(x0.shape)
    denoised = model.denoise(noisy, config.sigma_min, cond.flat()[None, :])
    assert np.sqrt(((denoised - x0) ** 2).mean()) < 0.05
    out = sample(model, cond, config.schedule(), np.random.default_rng(2))
    assert np.sqrt(((out - batch.successor[0]) ** 2).mean()) < 0.1


@pytest.mark.slow
def test_generated_branches_follow_maze_dynamics():
    maze = stitch_maze_spec()
    routes, _ = stitch_maze_routes(maze)
    data = collect_dataset(maze, routes, seed=0)
    config = DiffusionConfig(K=10, H=10, width=64, depth=3, heads=4, n_freq=8, n_sigma=10, lr=1e-3, batch=32)
    model = DenoiserModel(data.ds + data.da + 1, config, seed=0)
    rng = np.random.default_rng(0)
    train_diffusion(model, data, 6000, rng)

    batch = sample_segment_batch(data, config.K, config.H, 32, rng)
    conds = [Condition(c, r) for c, r in zip(batch.cond, batch.ret)]
    out = sample_batch(model, conds, config.schedule(), [np.random.default_rng(k) for k in range(len(conds))])
    states, actions, _ = data.norm.split_tokens(out, data.ds, data.da)
    errors = []
    for (n, t), gen_states, gen_actions in zip(batch.sources, states, np.clip(actions, -1, 1)):
        traj = data.get(int(n))
        sim, _, _ = step(maze, EnvState.from_vector(traj.states[t], int(t)), traj.actions[t])
        for j in range(config.H):
            errors.append(np.linalg.norm(sim.pos - gen_states[j, :2]))
            if j + 1 < config.H:
                sim, _, _ = step(maze, sim, gen_actions[j])
    assert np.mean(errors) < 0.1
