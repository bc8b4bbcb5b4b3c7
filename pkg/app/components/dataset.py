"""
Armazenamento de trajetórias, retornos (RTG e descontado), normalização,
amostragem de pares de segmentos e serialização binária (BGDATA1).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from components.artifact_store import atomic_write_bytes

logger = logging.getLogger(__name__)

GAMMA = 0.99
STD_FLOOR = 1e-6
DATA_MAGIC = b"BGDATA1"
DATA_VERSION = 1
PROVENANCES = ("collected", "expanded")
ROLES = ("states", "actions", "rewards", "returns")


class DatasetFormatError(ValueError):
    """Arquivo de dataset inválido (inclui o offset do erro)"""


class EmptySupportError(ValueError):
    """Nenhuma janela válida para amostragem"""


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"Esperado array {ndim}-D, recebido formato {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminal: bool
    index: int
    provenance: str = "collected"
    rtg_labels: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", _frozen(self.states, 2))
        object.__setattr__(self, "actions", _frozen(self.actions, 2))
        object.__setattr__(self, "rewards", _frozen(self.rewards, 1))
        T = self.states.shape[0]
        if T < 1 or self.actions.shape[0] != T or self.rewards.shape[0] != T:
            raise ValueError(
                f"Trajetória {self.index}: comprimentos inconsistentes "
                f"{self.states.shape[0]}/{self.actions.shape[0]}/{self.rewards.shape[0]}"
            )
        if self.provenance not in PROVENANCES:
            raise ValueError(f"Proveniência desconhecida: {self.provenance}")
        if self.rtg_labels is not None:
            labels = _frozen(self.rtg_labels, 1)
            if labels.shape[0] != T:
                raise ValueError(f"Trajetória {self.index}: rótulos RTG com tamanho {labels.shape[0]}")
            object.__setattr__(self, "rtg_labels", labels)
        object.__setattr__(self, "terminal", bool(self.terminal))

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def ds(self) -> int:
        return self.states.shape[1]

    @property
    def da(self) -> int:
        return self.actions.shape[1]

    def equals(self, other: "Trajectory") -> bool:
        same_labels = (
            (self.rtg_labels is None and other.rtg_labels is None)
            or (self.rtg_labels is not None and other.rtg_labels is not None
                and np.array_equal(self.rtg_labels, other.rtg_labels))
        )
        return (
            np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and self.terminal == other.terminal
            and self.index == other.index
            and self.provenance == other.provenance
            and same_labels
        )


# ========== RETORNOS ==========

def rtg(trajectory: Trajectory) -> np.ndarray:
    """Return-to-go não descontado: g[t] = Σ_{t'≥t} r[t']"""
    return discounted_returns(trajectory.rewards, 1.0)


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """R[t] = r[t] + γ·R[t+1], calculado de trás para frente"""
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def discounted_return(trajectory: Trajectory, t: int, gamma: float) -> float:
    if not 0 <= t < trajectory.T:
        raise IndexError(f"t={t} fora de [0, {trajectory.T})")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"γ deve estar em (0, 1], recebido {gamma}")
    return float(discounted_returns(trajectory.rewards, gamma)[t])


def dt_rtg_labels(trajectory: Trajectory) -> np.ndarray:
    """Rótulos RTG usados pelo DT (recalculados nas trajetórias expandidas)"""
    return trajectory.rtg_labels if trajectory.rtg_labels is not None else rtg(trajectory)


# ========== NORMALIZAÇÃO ==========

@dataclass(frozen=True, eq=False)
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    reward_mean: float
    reward_std: float
    return_mean: float
    return_std: float
    gamma: float = GAMMA

    @classmethod
    def fit(cls, trajectories: Sequence[Trajectory], gamma: float = GAMMA) -> "NormStats":
        """Estatísticas apenas sobre trajetórias coletadas"""
        collected = [t for t in trajectories if t.provenance == "collected"]
        if not collected:
            raise ValueError("Nenhuma trajetória coletada para ajustar a normalização")
        states = np.concatenate([t.states for t in collected])
        actions = np.concatenate([t.actions for t in collected])
        rewards = np.concatenate([t.rewards for t in collected])
        returns = np.concatenate([discounted_returns(t.rewards, gamma) for t in collected])
        return cls(
            state_mean=states.mean(axis=0),
            state_std=np.maximum(states.std(axis=0), STD_FLOOR),
            action_mean=actions.mean(axis=0),
            action_std=np.maximum(actions.std(axis=0), STD_FLOOR),
            reward_mean=float(rewards.mean()),
            reward_std=float(max(rewards.std(), STD_FLOOR)),
            return_mean=float(returns.mean()),
            return_std=float(max(returns.std(), STD_FLOOR)),
            gamma=gamma,
        )

    def _moments(self, role: str):
        if role == "states":
            return self.state_mean, self.state_std
        if role == "actions":
            return self.action_mean, self.action_std
        if role == "rewards":
            return self.reward_mean, self.reward_std
        if role == "returns":
            return self.return_mean, self.return_std
        raise ValueError(f"Papel desconhecido: {role}")

    def normalize(self, values, role: str) -> np.ndarray:
        mean, std = self._moments(role)
        return (np.asarray(values, dtype=np.float64) - mean) / std

    def denormalize(self, values, role: str) -> np.ndarray:
        mean, std = self._moments(role)
        return np.asarray(values, dtype=np.float64) * std + mean

    def tokens(self, states, actions, rewards) -> np.ndarray:
        """Concatena (s, a, r) normalizados no último eixo"""
        return np.concatenate([
            self.normalize(states, "states"),
            self.normalize(actions, "actions"),
            self.normalize(rewards, "rewards")[..., None],
        ], axis=-1)

    def split_tokens(self, tokens: np.ndarray, ds: int, da: int):
        """Inverso de `tokens`: devolve (s, a, r) desnormalizados"""
        states = self.denormalize(tokens[..., :ds], "states")
        actions = self.denormalize(tokens[..., ds:ds + da], "actions")
        rewards = self.denormalize(tokens[..., ds + da], "rewards")
        return states, actions, rewards

    def equals(self, other: "NormStats") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("state_mean", "state_std", "action_mean", "action_std",
                      "reward_mean", "reward_std", "return_mean", "return_std", "gamma")
        )


# ========== DATASET ==========

@dataclass(frozen=True)
class SegmentPair:
    cond_states: np.ndarray
    cond_actions: np.ndarray
    cond_rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    next_rewards: np.ndarray
    ret: float
    n: int
    t: int


@dataclass(frozen=True)
class SegmentBatch:
    """Lote normalizado para o treino da difusão"""

    cond: np.ndarray      # (B, K, ds+da+1)
    ret: np.ndarray       # (B,)
    successor: np.ndarray  # (B, H, ds+da+1)
    sources: np.ndarray   # (B, 2) pares (n, t)


@dataclass(frozen=True)
class TransitionBatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    ret: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    norm: NormStats
    provenance: str = "collected"
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise ValueError("Dataset vazio")
        indices = [t.index for t in self.trajectories]
        if len(set(indices)) != len(indices):
            raise ValueError("Índices de trajetória duplicados")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"Proveniência desconhecida: {self.provenance}")

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], gamma: float = GAMMA,
                          provenance: str = "collected") -> "Dataset":
        return cls(tuple(trajectories), NormStats.fit(trajectories, gamma), provenance)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @cached_property
    def _ordered(self) -> tuple[Trajectory, ...]:
        return tuple(sorted(self.trajectories, key=lambda traj: traj.index))

    @cached_property
    def _by_index(self) -> dict[int, Trajectory]:
        return {t.index: t for t in self.trajectories}

    def get(self, n: int) -> Trajectory:
        try:
            return self._by_index[n]
        except KeyError:
            raise KeyError(f"Trajetória {n} inexistente") from None

    @property
    def ds(self) -> int:
        return self.trajectories[0].ds

    @property
    def da(self) -> int:
        return self.trajectories[0].da

    @property
    def gamma(self) -> float:
        return self.norm.gamma

    @cached_property
    def _returns(self) -> dict[int, np.ndarray]:
        return {t.index: discounted_returns(t.rewards, self.gamma) for t in self.trajectories}

    def returns_of(self, n: int) -> np.ndarray:
        return self._returns[n]

    def windows(self, K: int, H: int) -> np.ndarray:
        """Pares (n, t) com K−1 ≤ t ≤ T−1−H"""
        key = ("windows", K, H)
        if key not in self._cache:
            rows = [
                (traj.index, t)
                for traj in self._ordered
                if traj.T >= K + H
                for t in range(K - 1, traj.T - H)
            ]
            self._cache[key] = np.array(rows, dtype=np.int64).reshape(-1, 2)
        return self._cache[key]

    def condition_windows(self, K: int) -> np.ndarray:
        """Pares (n, t) com t ≥ K−1 (sem exigir sucessor)"""
        key = ("condition", K)
        if key not in self._cache:
            rows = [(traj.index, t) for traj in self._ordered for t in range(K - 1, traj.T)]
            self._cache[key] = np.array(rows, dtype=np.int64).reshape(-1, 2)
        return self._cache[key]

    def with_trajectories(self, extra: Sequence[Trajectory], provenance: str) -> "Dataset":
        """Novo dataset com trajetórias extras; estatísticas não reajustadas"""
        return Dataset(self.trajectories + tuple(extra), self.norm, provenance)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.provenance == other.provenance
            and len(self) == len(other)
            and self.norm.equals(other.norm)
            and all(a.equals(b) for a, b in zip(self.trajectories, other.trajectories))
        )

    @cached_property
    def _transitions(self) -> TransitionBatch:
        s, a, r, s2, done, ret = [], [], [], [], [], []
        for traj in self._ordered:
            R = self.returns_of(traj.index)
            last = traj.T - 1 if traj.terminal else traj.T - 2
            for t in range(last + 1):
                s.append(traj.states[t])
                a.append(traj.actions[t])
                r.append(traj.rewards[t])
                is_end = t == traj.T - 1
                s2.append(traj.states[t] if is_end else traj.states[t + 1])
                done.append(is_end)
                ret.append(R[t])
        if not s:
            raise EmptySupportError("Nenhuma transição com sucessor ou terminal")
        return TransitionBatch(np.array(s), np.array(a), np.array(r), np.array(s2),
                               np.array(done, dtype=bool), np.array(ret))


def segment_pair_at(dataset: Dataset, n: int, t: int, K: int, H: int) -> SegmentPair:
    traj = dataset.get(n)
    if not (t >= K - 1 and t + H <= traj.T - 1):
        raise IndexError(f"Janela inválida (n={n}, t={t}) para K={K}, H={H}, T={traj.T}")
    c = slice(t - K + 1, t + 1)
    s = slice(t + 1, t + H + 1)
    return SegmentPair(
        cond_states=traj.states[c], cond_actions=traj.actions[c], cond_rewards=traj.rewards[c],
        next_states=traj.states[s], next_actions=traj.actions[s], next_rewards=traj.rewards[s],
        ret=float(dataset.returns_of(n)[t]), n=n, t=t,
    )


def sample_segment_pair(dataset: Dataset, K: int, H: int, rng: np.random.Generator) -> SegmentPair:
    """Amostra uniforme sobre todas as janelas (n, t) válidas"""
    windows = dataset.windows(K, H)
    if len(windows) == 0:
        raise EmptySupportError(f"Nenhuma trajetória com T ≥ K+H = {K + H}")
    n, t = windows[rng.integers(len(windows))]
    return segment_pair_at(dataset, int(n), int(t), K, H)


def sample_segment_batch(dataset: Dataset, K: int, H: int, size: int, rng: np.random.Generator,
                         windows: np.ndarray | None = None) -> SegmentBatch:
    if windows is None:
        windows = dataset.windows(K, H)
    if len(windows) == 0:
        raise EmptySupportError(f"Nenhuma trajetória com T ≥ K+H = {K + H}")
    picks = windows[rng.integers(len(windows), size=size)]
    cond, succ, ret = [], [], []
    for n, t in picks:
        pair = segment_pair_at(dataset, int(n), int(t), K, H)
        cond.append(dataset.norm.tokens(pair.cond_states, pair.cond_actions, pair.cond_rewards))
        succ.append(dataset.norm.tokens(pair.next_states, pair.next_actions, pair.next_rewards))
        ret.append(pair.ret)
    return SegmentBatch(
        cond=np.stack(cond),
        ret=dataset.norm.normalize(np.array(ret), "returns"),
        successor=np.stack(succ),
        sources=picks.copy(),
    )


def transition_batch(dataset: Dataset, size: int, rng: np.random.Generator) -> TransitionBatch:
    """Transições uniformes com retorno descontado da própria trajetória"""
    flat = dataset._transitions
    idx = rng.integers(len(flat.s), size=size)
    return TransitionBatch(flat.s[idx], flat.a[idx], flat.r[idx], flat.s2[idx], flat.done[idx], flat.ret[idx])


# ========== SERIALIZAÇÃO ==========

def _pack_array(buf: bytearray, a: np.ndarray) -> None:
    buf += np.ascontiguousarray(a, dtype="<f8").tobytes()


def dataset_bytes(dataset: Dataset) -> bytes:
    buf = bytearray(DATA_MAGIC)
    buf += struct.pack("<BI", DATA_VERSION, len(dataset))
    for traj in dataset.trajectories:
        buf += struct.pack("<IIII", traj.index, traj.T, traj.ds, traj.da)
        _pack_array(buf, traj.states)
        _pack_array(buf, traj.actions)
        _pack_array(buf, traj.rewards)
        has_labels = traj.rtg_labels is not None
        buf += struct.pack("<BBB", int(traj.terminal), PROVENANCES.index(traj.provenance), int(has_labels))
        if has_labels:
            _pack_array(buf, traj.rtg_labels)
    norm = dataset.norm
    buf += struct.pack("<BII", PROVENANCES.index(dataset.provenance), len(norm.state_mean), len(norm.action_mean))
    for a in (norm.state_mean, norm.state_std, norm.action_mean, norm.action_std):
        _pack_array(buf, a)
    buf += struct.pack("<5d", norm.reward_mean, norm.reward_std, norm.return_mean, norm.return_std, norm.gamma)
    return bytes(buf)


def save(dataset: Dataset, path: Path) -> Path:
    return atomic_write_bytes(Path(path), dataset_bytes(dataset))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.raw):
            raise DatasetFormatError(f"Arquivo truncado no offset {self.offset}")
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int, shape) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def load(path: Path) -> Dataset:
    """Carrega um dataset; nenhum dataset parcial é devolvido em caso de erro"""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(DATA_MAGIC)) != DATA_MAGIC:
        raise DatasetFormatError("Magic inválido no offset 0")
    version_offset = reader.offset
    version, count = reader.unpack("<BI")
    if version != DATA_VERSION:
        raise DatasetFormatError(f"Versão {version} não suportada no offset {version_offset}")
    trajectories = []
    for _ in range(count):
        index, T, ds, da = reader.unpack("<IIII")
        states = reader.floats(T * ds, (T, ds))
        actions = reader.floats(T * da, (T, da))
        rewards = reader.floats(T, (T,))
        flag_offset = reader.offset
        terminal, prov, has_labels = reader.unpack("<BBB")
        if prov >= len(PROVENANCES) or terminal > 1 or has_labels > 1:
            raise DatasetFormatError(f"Byte de controle inválido no offset {flag_offset}")
        labels = reader.floats(T, (T,)) if has_labels else None
        trajectories.append(Trajectory(states, actions, rewards, bool(terminal), index,
                                       PROVENANCES[prov], labels))
    footer_offset = reader.offset
    prov, ds, da = reader.unpack("<BII")
    if prov >= len(PROVENANCES):
        raise DatasetFormatError(f"Proveniência inválida no offset {footer_offset}")
    state_mean, state_std = reader.floats(ds, (ds,)), reader.floats(ds, (ds,))
    action_mean, action_std = reader.floats(da, (da,)), reader.floats(da, (da,))
    reward_mean, reward_std, return_mean, return_std, gamma = reader.unpack("<5d")
    if reader.offset != len(reader.raw):
        raise DatasetFormatError(f"Bytes excedentes a partir do offset {reader.offset}")
    norm = NormStats(state_mean, state_std, action_mean, action_std,
                     reward_mean, reward_std, return_mean, return_std, gamma)
    return Dataset(tuple(trajectories), norm, PROVENANCES[prov])
