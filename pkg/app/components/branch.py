"""
Ramos de trajetória: geração guiada pelo retorno do TVF, filtro de
continuidade do retorno por alvos TD(n) e expansão do dataset.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numpy as np
from tqdm import tqdm

from components.dataset import Dataset, Trajectory, segment_pair_at
from components.diffusion import Condition, DenoiserModel, NoiseSchedule, sample_batch
from components.tvf import ValueHeads, predict_future_return

logger = logging.getLogger(__name__)

SAMPLE_CHUNK = 64
MIN_CALIBRATION_PAIRS = 1000


class QFunction(Protocol):
    def q_values(self, s, a) -> np.ndarray: ...


@dataclass(frozen=True)
class FilterConfig:
    delta: float = 1.0
    gamma: float = 0.99
    percentile: float = 90.0
    enabled: bool = True
    calibrate: bool = True
    budget_fraction: float = 0.2
    calibration_pairs: int = 2000

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"δ deve ser positivo, recebido {self.delta}")
        if not 0.0 < self.percentile <= 100.0:
            raise ValueError(f"Percentil deve estar em (0,100], recebido {self.percentile}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"γ fora de [0,1]: {self.gamma}")
        if self.calibration_pairs < MIN_CALIBRATION_PAIRS:
            raise ValueError(f"calibration_pairs deve ser ≥ {MIN_CALIBRATION_PAIRS}, recebido {self.calibration_pairs}")


@dataclass(frozen=True, eq=False)
class BranchCandidate:
    """Segmento real de condição (terminando em t) e o ramo gerado de H passos"""

    n: int
    t: int
    cond_states: np.ndarray
    cond_actions: np.ndarray
    cond_rewards: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    guidance: float
    statistic: float = float("nan")
    accepted: bool = False

    @property
    def H(self) -> int:
        return len(self.states)

    @property
    def K(self) -> int:
        return len(self.cond_states)

    def with_verdict(self, statistic: float, accepted: bool) -> "BranchCandidate":
        return replace(self, statistic=float(statistic), accepted=bool(accepted))

    def to_record(self) -> dict:
        return {
            "n": self.n, "t": self.t, "K": self.K,
            "guidance": self.guidance, "statistic": self.statistic, "accepted": self.accepted,
            "states": self.states.tolist(), "actions": self.actions.tolist(), "rewards": self.rewards.tolist(),
        }

    @classmethod
    def from_record(cls, record: dict, dataset: Dataset) -> "BranchCandidate":
        traj = dataset.get(record["n"])
        t, K = record["t"], record["K"]
        c = slice(t - K + 1, t + 1)
        return cls(
            n=record["n"], t=t,
            cond_states=traj.states[c], cond_actions=traj.actions[c], cond_rewards=traj.rewards[c],
            states=np.array(record["states"], dtype=np.float64),
            actions=np.array(record["actions"], dtype=np.float64),
            rewards=np.array(record["rewards"], dtype=np.float64),
            guidance=record["guidance"], statistic=record["statistic"], accepted=record["accepted"],
        )


def candidate_from_successor(dataset: Dataset, n: int, t: int, K: int, H: int) -> BranchCandidate:
    """O sucessor real tratado como ramo (calibração e testes)"""
    pair = segment_pair_at(dataset, n, t, K, H)
    return BranchCandidate(n, t, pair.cond_states, pair.cond_actions, pair.cond_rewards,
                           pair.next_states, pair.next_actions, pair.next_rewards,
                           guidance=pair.ret)


# ========== GERAÇÃO ==========

def generate_branches(dataset: Dataset, tvf: ValueHeads, model: DenoiserModel, count: int,
                      rng: np.random.Generator, schedule: NoiseSchedule | None = None,
                      progress: bool = False) -> list[BranchCandidate]:
    """Amostra condições (t ≥ K−1), troca o retorno por Q_φ(s_t, a_t) e gera os ramos"""
    K = model.config.K
    schedule = schedule or model.config.schedule()
    windows = dataset.condition_windows(K)
    if len(windows) == 0:
        raise ValueError(f"Nenhuma trajetória com ao menos K={K} passos")
    picks = windows[rng.integers(len(windows), size=count)]
    seeds = rng.integers(2 ** 63, size=count)

    pending = []
    for (n, t), seed in zip(picks, seeds):
        traj = dataset.get(int(n))
        c = slice(int(t) - K + 1, int(t) + 1)
        guidance = predict_future_return(tvf, traj.states[t], traj.actions[t])
        tokens = dataset.norm.tokens(traj.states[c], traj.actions[c], traj.rewards[c])
        cond = Condition(tokens, float(dataset.norm.normalize(guidance, "returns")))
        pending.append((traj, int(t), c, guidance, cond, np.random.default_rng(int(seed))))

    candidates = []
    for start in tqdm(range(0, len(pending), SAMPLE_CHUNK), desc="Ramos", disable=not progress):
        chunk = pending[start:start + SAMPLE_CHUNK]
        out = sample_batch(model, [p[4] for p in chunk], schedule, [p[5] for p in chunk])
        states, actions, rewards = dataset.norm.split_tokens(out, dataset.ds, dataset.da)
        for i, (traj, t, c, guidance, _, _) in enumerate(chunk):
            candidates.append(BranchCandidate(
                traj.index, t, traj.states[c], traj.actions[c], traj.rewards[c],
                states[i], np.clip(actions[i], -1.0, 1.0), rewards[i], guidance,
            ))
    return candidates


def generate_branch(dataset: Dataset, tvf: ValueHeads, model: DenoiserModel,
                    rng: np.random.Generator) -> BranchCandidate:
    return generate_branches(dataset, tvf, model, 1, rng)[0]


# ========== FILTRO ==========

def td_n_targets(candidate: BranchCandidate, q: QFunction, gamma: float) -> np.ndarray:
    """Alvos TD(n) para n = 1…H; r_t vem do último passo real da condição"""
    H = candidate.H
    rewards = np.concatenate([[candidate.cond_rewards[-1]], candidate.rewards[:H - 1]])
    discounts = np.power(gamma, np.arange(H + 1, dtype=np.float64))
    partial = np.cumsum(discounts[:H] * rewards)
    bootstrap = np.asarray(q.q_values(candidate.states, candidate.actions), dtype=np.float64)
    return partial + discounts[1:] * bootstrap


def td_n_target(candidate: BranchCandidate, q: QFunction, n: int, gamma: float) -> float:
    if not 1 <= n <= candidate.H:
        raise ValueError(f"n deve estar em [1, {candidate.H}], recebido {n}")
    return float(td_n_targets(candidate, q, gamma)[n - 1])


def filter_statistic(candidate: BranchCandidate, q: QFunction, gamma: float) -> float:
    """|Q(s_t, a_t) − média dos alvos TD(n)|"""
    q_t = q.q_values(candidate.cond_states[-1:], candidate.cond_actions[-1:])[0]
    return float(abs(q_t - td_n_targets(candidate, q, gamma).mean()))


def filter_candidate(candidate: BranchCandidate, q: QFunction, config: FilterConfig) -> tuple[bool, float]:
    statistic = filter_statistic(candidate, q, config.gamma)
    accepted = statistic < config.delta if config.enabled else True
    return accepted, statistic


def filter_candidates(candidates: Sequence[BranchCandidate], q: QFunction,
                      config: FilterConfig) -> list[BranchCandidate]:
    judged = []
    for cand in candidates:
        accepted, statistic = filter_candidate(cand, q, config)
        judged.append(cand.with_verdict(statistic, accepted))
    accepted = sum(c.accepted for c in judged)
    logger.info("Filtro: %d/%d ramos aceitos (δ=%.4g)", accepted, len(judged), config.delta)
    return judged


def calibrate_delta(dataset: Dataset, q: QFunction, config: FilterConfig, K: int, H: int,
                    rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """δ = percentil p da estatística do filtro sobre sucessores reais (t ≥ K−1, como na geração)"""
    windows = dataset.windows(K, H)
    if len(windows) < 100:
        raise ValueError(f"Calibração requer ≥ 100 pares de segmentos, disponível {len(windows)}")
    if len(windows) >= config.calibration_pairs:
        picks = np.sort(rng.choice(len(windows), config.calibration_pairs, replace=False))
    else:
        # poucas janelas distintas: reamostragem com reposição até completar o mínimo
        picks = np.sort(rng.integers(len(windows), size=config.calibration_pairs))
    statistics = np.array([
        filter_statistic(candidate_from_successor(dataset, int(n), int(t), K, H), q, config.gamma)
        for n, t in windows[picks]
    ])
    delta = float(np.nextafter(np.percentile(statistics, config.percentile), np.inf))
    logger.info("δ calibrado em %.4g (p=%.1f, %d estatísticas, %d janelas distintas)",
                delta, config.percentile, len(statistics), len(np.unique(picks)))
    return delta, statistics


# ========== EXPANSÃO ==========

def branch_rtg_labels(rewards: np.ndarray, bootstrap: float) -> np.ndarray:
    """g_último = Q(s̃, ã) no fim do ramo; g_j = r_j + g_{j+1}"""
    labels = np.empty(len(rewards))
    labels[-1] = bootstrap
    for j in range(len(rewards) - 2, -1, -1):
        labels[j] = rewards[j] + labels[j + 1]
    return labels


def expand_dataset(dataset: Dataset, candidates: Sequence[BranchCandidate], q: QFunction) -> Dataset:
    """Prefixo original 0…t seguido do ramo; originais intactos, normalização mantida"""
    next_index = max(t.index for t in dataset.trajectories) + 1
    extra = []
    for cand in candidates:
        try:
            source = dataset.get(cand.n)
        except KeyError:
            raise ValueError(f"Índice de origem inválido: trajetória {cand.n}") from None
        if not 0 <= cand.t < source.T:
            raise ValueError(f"Passo de origem {cand.t} fora da trajetória {cand.n} (T={source.T})")
        states = np.concatenate([source.states[:cand.t + 1], cand.states])
        actions = np.concatenate([source.actions[:cand.t + 1], cand.actions])
        rewards = np.concatenate([source.rewards[:cand.t + 1], cand.rewards])
        bootstrap = float(q.q_values(cand.states[-1:], cand.actions[-1:])[0])
        extra.append(Trajectory(states, actions, rewards, False, next_index + len(extra),
                                provenance="expanded", rtg_labels=branch_rtg_labels(rewards, bootstrap)))
    logger.info("Dataset expandido com %d trajetórias", len(extra))
    return dataset.with_trajectories(extra, "expanded")
