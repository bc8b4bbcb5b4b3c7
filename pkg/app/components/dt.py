"""
Decision Transformer: predição causal de ações condicionada ao RTG,
treino por janelas de contexto e avaliação autorregressiva no labirinto.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from tqdm import tqdm

from components.dataset import Dataset, dt_rtg_labels
from components.env_pointmaze import EpisodePolicy, MazeSpec, rollout, sample_start
from components.neural_core import (AdamState, NonFiniteError, Tape, Tensor, adam_step, add, affine,
                                    backprop, block_shapes, concat, embedding, init_params, layer_norm,
                                    load_checkpoint, mse_loss, net_forward, reshape, save_checkpoint,
                                    take, transformer_block)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DTConfig:
    context: int = 20
    width: int = 128
    depth: int = 3
    heads: int = 1
    max_timestep: int = 512
    zero_head: bool = False
    lr: float = 1e-4
    batch: int = 64
    steps: int = 50000
    target_rtg_factor: float = 1.0

    def __post_init__(self):
        if self.context < 1:
            raise ValueError("Contexto do DT deve ser ≥ 1")
        if self.width % self.heads:
            raise ValueError(f"Largura {self.width} não divisível por {self.heads} cabeças")


@dataclass(frozen=True)
class DTSpec:
    """Tokens intercalados (g, s, a) por passo; ação lida da posição do estado"""

    ds: int
    da: int
    context: int
    width: int = 128
    depth: int = 3
    heads: int = 1
    max_timestep: int = 512
    zero_head: bool = False
    prefix: str = "dt"

    @property
    def input_dims(self) -> dict:
        return {"rtg": 1, "states": self.ds, "actions": self.da, "timesteps": None, "mask": None}

    def param_shapes(self) -> dict:
        p, w = self.prefix, self.width
        shapes = {
            f"{p}/embed_rtg/w": ((1, w), "uniform"),
            f"{p}/embed_rtg/b": ((w,), "zeros"),
            f"{p}/embed_state/w": ((self.ds, w), "uniform"),
            f"{p}/embed_state/b": ((w,), "zeros"),
            f"{p}/embed_action/w": ((self.da, w), "uniform"),
            f"{p}/embed_action/b": ((w,), "zeros"),
            f"{p}/embed_t": ((self.max_timestep, w), "uniform"),
            f"{p}/ln_in/g": ((w,), "ones"),
            f"{p}/ln_in/b": ((w,), "zeros"),
            f"{p}/ln_f/g": ((w,), "ones"),
            f"{p}/ln_f/b": ((w,), "zeros"),
            f"{p}/head/w": ((w, self.da), "zeros" if self.zero_head else "uniform"),
            f"{p}/head/b": ((self.da,), "zeros"),
        }
        for i in range(self.depth):
            shapes.update(block_shapes(f"{p}/block{i}", w))
        return shapes

    def _embed(self, tape: Tape, x: Tensor, name: str, t_emb: Tensor) -> Tensor:
        p = self.prefix
        e = affine(tape, x, tape.param(f"{p}/{name}/w"), tape.param(f"{p}/{name}/b"), name=f"{p}/{name}")
        return add(tape, e, t_emb, name=f"{p}/{name}/t")

    def build(self, tape: Tape, inputs: Mapping[str, object]) -> Tensor:
        p = self.prefix
        bsz, T = inputs["states"].shape[:2]
        timesteps = np.minimum(inputs["timesteps"], self.max_timestep - 1)
        t_emb = embedding(tape, timesteps, tape.param(f"{p}/embed_t"), name=f"{p}/embed_t")
        g = self._embed(tape, inputs["rtg"], "embed_rtg", t_emb)
        s = self._embed(tape, inputs["states"], "embed_state", t_emb)
        a = self._embed(tape, inputs["actions"], "embed_action", t_emb)
        h = reshape(tape, concat(tape, [g, s, a], axis=-1, name=f"{p}/tokens"), (bsz, 3 * T, self.width),
                    name=f"{p}/interleave")
        h = layer_norm(tape, h, tape.param(f"{p}/ln_in/g"), tape.param(f"{p}/ln_in/b"), name=f"{p}/ln_in")
        key_mask = np.repeat(np.asarray(inputs["mask"], dtype=bool), 3, axis=1)
        for i in range(self.depth):
            h = transformer_block(tape, f"{p}/block{i}", h, self.heads, causal=True, key_mask=key_mask)
        h = layer_norm(tape, h, tape.param(f"{p}/ln_f/g"), tape.param(f"{p}/ln_f/b"), name=f"{p}/ln_f")
        h = take(tape, h, np.arange(T) * 3 + 1, name=f"{p}/state_tokens")
        return affine(tape, h, tape.param(f"{p}/head/w"), tape.param(f"{p}/head/b"), name=f"{p}/head")

    def example_inputs(self, rng: np.random.Generator) -> dict:
        T = self.context
        mask = np.ones((2, T), dtype=bool)
        mask[1, :T // 2] = False
        return {
            "rtg": rng.standard_normal((2, T, 1)),
            "states": rng.standard_normal((2, T, self.ds)),
            "actions": rng.standard_normal((2, T, self.da)),
            "timesteps": rng.integers(self.max_timestep, size=(2, T)),
            "mask": mask,
        }


@dataclass(frozen=True)
class DTBatch:
    rtg: np.ndarray        # (B, K, 1) já escalado
    states: np.ndarray     # (B, K, ds) normalizados
    actions: np.ndarray    # (B, K, da)
    timesteps: np.ndarray  # (B, K)
    mask: np.ndarray       # (B, K) False no padding à esquerda

    def inputs(self) -> dict:
        return {"rtg": self.rtg, "states": self.states, "actions": self.actions,
                "timesteps": self.timesteps, "mask": self.mask}


class DTPolicy:
    def __init__(self, ds: int, da: int, config: DTConfig, rtg_scale: float = 1.0,
                 state_mean=None, state_std=None, seed: int = 0):
        self.config = config
        self.spec = DTSpec(ds, da, config.context, config.width, config.depth, config.heads,
                           config.max_timestep, config.zero_head)
        self.rtg_scale = float(rtg_scale)
        self.state_mean = np.zeros(ds) if state_mean is None else np.asarray(state_mean, dtype=np.float64)
        self.state_std = np.ones(ds) if state_std is None else np.asarray(state_std, dtype=np.float64)
        self.params = init_params(self.spec, seed)
        self.opt = AdamState.for_params(self.params, lr=config.lr)

    @classmethod
    def for_dataset(cls, dataset: Dataset, config: DTConfig, seed: int = 0) -> "DTPolicy":
        """RTG escalado por 1/(maior retorno coletado); estados pela normalização do dataset"""
        collected = [t.rewards.sum() for t in dataset if t.provenance == "collected"]
        top = max(collected, default=0.0)
        scale = 1.0 / top if top > 0 else 1.0
        return cls(dataset.ds, dataset.da, config, scale, dataset.norm.state_mean, dataset.norm.state_std, seed)

    @property
    def K(self) -> int:
        return self.config.context

    def normalize_states(self, states) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) - self.state_mean) / self.state_std

    def forward(self, batch: DTBatch) -> tuple[Tensor, Tape]:
        return net_forward(self.params, batch.inputs(), self.spec)

    def save(self, path: Path) -> None:
        header = {
            "kind": "dt", "ds": self.spec.ds, "da": self.spec.da, "rtg_scale": self.rtg_scale,
            "state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist(),
            **asdict(self.config),
        }
        save_checkpoint(path, self.params, header)

    @classmethod
    def load(cls, path: Path) -> "DTPolicy":
        params, header = load_checkpoint(path)
        if header.get("kind") != "dt":
            raise ValueError(f"{path} não é um checkpoint de DT")
        fields = {k: header[k] for k in DTConfig.__dataclass_fields__}
        policy = cls(header["ds"], header["da"], DTConfig(**fields), header["rtg_scale"],
                     header["state_mean"], header["state_std"])
        policy.params = params
        return policy


# ========== JANELAS ==========

def window_at(policy: DTPolicy, dataset: Dataset, n: int, t: int) -> tuple[np.ndarray, ...]:
    """Janela de K passos terminando em t, com padding à esquerda"""
    K = policy.K
    traj = dataset.get(n)
    start = max(0, t - K + 1)
    length = t + 1 - start
    pad = K - length
    rtg = np.zeros((K, 1))
    states = np.zeros((K, traj.ds))
    actions = np.zeros((K, traj.da))
    timesteps = np.zeros(K, dtype=np.int64)
    mask = np.zeros(K, dtype=bool)
    rtg[pad:, 0] = dt_rtg_labels(traj)[start:t + 1] * policy.rtg_scale
    states[pad:] = policy.normalize_states(traj.states[start:t + 1])
    actions[pad:] = traj.actions[start:t + 1]
    timesteps[pad:] = np.arange(start, t + 1)
    mask[pad:] = True
    return rtg, states, actions, timesteps, mask


def sample_windows(policy: DTPolicy, dataset: Dataset, size: int, rng: np.random.Generator,
                   positions: np.ndarray | None = None) -> DTBatch:
    """Posições (n, t) uniformes sobre todos os passos, em ordem de índice"""
    if positions is None:
        positions = dataset.condition_windows(1)
    picks = positions[rng.integers(len(positions), size=size)]
    parts = [window_at(policy, dataset, int(n), int(t)) for n, t in picks]
    return DTBatch(*(np.stack(column) for column in zip(*parts)))


def dt_train_step(policy: DTPolicy, batch: DTBatch) -> float:
    """MSE das ações nas posições não mascaradas e um passo Adam"""
    out, tape = policy.forward(batch)
    weights = np.broadcast_to(batch.mask[..., None], out.shape).astype(np.float64)
    loss, grad = mse_loss(out.data, batch.actions, weights)
    if not np.isfinite(loss):
        raise NonFiniteError(f"Perda do DT não finita (lote={len(batch.mask)})")
    adam_step(policy.params, backprop(tape, grad), policy.opt)
    return loss


def train_dt(policy: DTPolicy, dataset: Dataset, steps: int, rng: np.random.Generator,
             progress: bool = False) -> list[dict]:
    history = []
    positions = dataset.condition_windows(1)
    for i in tqdm(range(steps), desc="DT", disable=not progress):
        batch = sample_windows(policy, dataset, policy.config.batch, rng, positions)
        history.append({"step": i, "loss": dt_train_step(policy, batch)})
    if history:
        logger.info("DT treinado: perda final %.4g", history[-1]["loss"])
    return history


def target_rtg(dataset: Dataset, factor: float = 1.0) -> float:
    """Maior rótulo RTG presente no dataset de treino"""
    return factor * max(float(dt_rtg_labels(traj).max()) for traj in dataset)


# ========== INFERÊNCIA ==========

@dataclass
class History:
    """Passos anteriores (g, s, a, t) em ordem cronológica"""

    rtgs: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    timesteps: list[int] = field(default_factory=list)

    def append(self, g: float, s, a, t: int) -> None:
        self.rtgs.append(float(g))
        self.states.append(np.asarray(s, dtype=np.float64))
        self.actions.append(np.asarray(a, dtype=np.float64))
        self.timesteps.append(int(t))

    def __len__(self) -> int:
        return len(self.rtgs)


def predict_action(policy: DTPolicy, history: History, g_t: float, s_t, t: int) -> np.ndarray:
    """Saída da cabeça na última posição de estado; usa só os K passos mais recentes"""
    n = len(history)
    if not (len(history.states) == len(history.actions) == len(history.timesteps) == n):
        raise ValueError("Histórico com listas de tamanhos diferentes")
    if any(b <= a for a, b in zip(history.timesteps, history.timesteps[1:] + [t])):
        raise ValueError("Histórico fora de ordem cronológica")
    s_t = np.asarray(s_t, dtype=np.float64)
    if s_t.shape != (policy.spec.ds,):
        raise ValueError(f"Estado com formato {s_t.shape}, esperado ({policy.spec.ds},)")

    K, keep = policy.K, policy.K - 1
    first = max(0, n - keep)
    rtgs = history.rtgs[first:] + [g_t]
    states = history.states[first:] + [s_t]
    actions = history.actions[first:] + [np.zeros(policy.spec.da)]
    times = history.timesteps[first:] + [t]
    length = len(rtgs)
    pad = K - length

    batch = DTBatch(
        rtg=np.zeros((1, K, 1)), states=np.zeros((1, K, policy.spec.ds)),
        actions=np.zeros((1, K, policy.spec.da)), timesteps=np.zeros((1, K), dtype=np.int64),
        mask=np.zeros((1, K), dtype=bool),
    )
    batch.rtg[0, pad:, 0] = np.array(rtgs) * policy.rtg_scale
    batch.states[0, pad:] = policy.normalize_states(np.stack(states))
    batch.actions[0, pad:] = np.stack(actions)
    batch.timesteps[0, pad:] = times
    batch.mask[0, pad:] = True
    out, _ = policy.forward(batch)
    return out.data[0, -1].copy()


class DTAgent:
    """Adapta o DT ao protocolo de política de episódio do ambiente"""

    def __init__(self, policy: DTPolicy):
        self.policy = policy
        self.history = History()

    def reset(self) -> None:
        self.history = History()

    def act(self, state: np.ndarray, rtg: float, rng: np.random.Generator | None = None) -> np.ndarray:
        t = len(self.history)
        action = np.clip(predict_action(self.policy, self.history, rtg, state, t), -1.0, 1.0)
        self.history.append(rtg, state, action, t)
        return action


# ========== AVALIAÇÃO ==========

@dataclass
class EvalReport:
    episodes: int
    mean_return: float
    success_rate: float
    normalized_score: float
    references: tuple[float, float]
    traces: list[dict]

    def records(self) -> list[dict]:
        summary = {
            "summary": True, "episodes": self.episodes, "mean_return": self.mean_return,
            "success_rate": self.success_rate, "normalized_score": self.normalized_score,
            "random_reference": self.references[0], "expert_reference": self.references[1],
        }
        return [*self.traces, summary]


def normalized_score(mean_return: float, random_ref: float, expert_ref: float) -> float:
    """100·(retorno − aleatório)/(especialista − aleatório)"""
    if expert_ref == random_ref:
        raise ValueError("Referências aleatória e especialista coincidem")
    return 100.0 * (mean_return - random_ref) / (expert_ref - random_ref)


def evaluate(policy: EpisodePolicy | DTPolicy, spec: MazeSpec, target: float, episodes: int, seed: int,
             references: tuple[float, float]) -> EvalReport:
    """Episódios autorregressivos com g_{t+1} = g_t − r_t"""
    if episodes < 1:
        raise ValueError("episodes deve ser ≥ 1")
    agent = DTAgent(policy) if isinstance(policy, DTPolicy) else policy
    traces = []
    for k in range(episodes):
        rng = np.random.default_rng([seed, k])
        ep = rollout(spec, agent, sample_start(spec, rng), rng, target_rtg=target)
        traces.append({
            "episode": k, "return": ep.ret, "success": ep.success, "steps": len(ep.rewards),
            "rtg": ep.rtgs.tolist(), "rewards": ep.rewards.tolist(),
            "positions": ep.states[:, :2].tolist(),
        })
    returns = np.array([tr["return"] for tr in traces])
    mean_return = float(returns.mean())
    report = EvalReport(
        episodes=episodes,
        mean_return=mean_return,
        success_rate=float(np.mean([tr["success"] for tr in traces])),
        normalized_score=normalized_score(mean_return, *references),
        references=tuple(references),
        traces=traces,
    )
    logger.info("Avaliação: retorno médio %.3f, sucesso %.0f%%, score %.1f",
                report.mean_return, 100 * report.success_rate, report.normalized_score)
    return report
