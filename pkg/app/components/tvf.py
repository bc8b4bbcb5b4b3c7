"""
Trajectory Value Function: Q_φ e V_ψ treinados com o objetivo de expectil
combinado. Q_φ(s_t, a_t) fornece o retorno futuro que guia a geração.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from tqdm import tqdm

from components.dataset import Dataset, NormStats, TransitionBatch, transition_batch
from components.neural_core import (AdamState, MLPSpec, NonFiniteError, ParamSet, adam_step,
                                    backprop, init_params, load_checkpoint, net_forward,
                                    save_checkpoint)

logger = logging.getLogger(__name__)

TAU_BY_REWARD_MODE = {"sparse": 0.9, "dense": 0.7}


def default_tau(reward_mode: str) -> float:
    """τ padrão conforme o regime de recompensa do labirinto"""
    try:
        return TAU_BY_REWARD_MODE[reward_mode]
    except KeyError:
        raise ValueError(f"Modo de recompensa desconhecido: {reward_mode}") from None


@dataclass(frozen=True)
class TVFConfig:
    tau: float = 0.9
    w: float = 0.5
    gamma: float = 0.99
    polyak: float = 0.005
    hidden: tuple[int, ...] = (256, 256, 256)
    lr: float = 3e-4
    batch: int = 256
    steps: int = 20000

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"τ deve estar em (0,1), recebido {self.tau}")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"w deve estar em [0,1], recebido {self.w}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"γ deve estar em (0,1], recebido {self.gamma}")
        object.__setattr__(self, "hidden", tuple(self.hidden))


# ========== EXPECTIL ==========

def expectile_loss(u, tau: float):
    """L₂^τ(u) = |τ − 1(u<0)|·u²; em u=0 o peso é τ"""
    u = np.asarray(u, dtype=np.float64)
    weight = np.where(u < 0, 1.0 - tau, tau)
    out = weight * u * u
    return float(out) if out.ndim == 0 else out


def expectile_grad(u, tau: float) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return 2.0 * np.where(u < 0, 1.0 - tau, tau) * u


def expectile_by_bisection(samples, tau: float) -> float:
    """τ-expectil pela equação de estimação Σ|τ − 1(x<v)|(x − v) = 0"""
    x = np.asarray(samples, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return lo

    def estimating(v: float) -> float:
        return float((np.where(x < v, 1.0 - tau, tau) * (x - v)).sum())

    return float(brentq(estimating, lo, hi, xtol=1e-14, rtol=1e-15))


def fit_expectile(samples, tau: float, steps: int = 20000, lr: float = 0.05) -> float:
    """Minimiza Σ L₂^τ(x − v) por Adam com decaimento linear da taxa"""
    x = np.asarray(samples, dtype=np.float64)
    params = ParamSet()
    params.add("v", np.zeros(1))
    state = AdamState.for_params(params, lr=lr)
    for i in range(steps):
        v = params["v"].data[0]
        grad = -expectile_grad(x - v, tau).mean()
        state.lr = lr * (1.0 - i / steps)
        adam_step(params, {"v": np.array([grad])}, state)
    return float(params["v"].data[0])


# ========== CABEÇAS ==========

class ValueHeads:
    """Q_φ(s,a), V_ψ(s) e a cópia lenta de Q usada em L_V"""

    def __init__(self, ds: int, da: int, norm: NormStats, config: TVFConfig, seed: int = 0):
        self.ds, self.da = ds, da
        self.norm = norm
        self.config = config
        self.q_spec = MLPSpec("tvf/q", ds + da, config.hidden, 1)
        self.v_spec = MLPSpec("tvf/v", ds, config.hidden, 1)
        self.q_target_spec = MLPSpec("tvf/q_target", ds + da, config.hidden, 1)
        self.q = init_params(self.q_spec, seed)
        self.v = init_params(self.v_spec, seed)
        self.q_target = self.q.renamed("tvf/q/", "tvf/q_target/")
        self.q_opt = AdamState.for_params(self.q, lr=config.lr)
        self.v_opt = AdamState.for_params(self.v, lr=config.lr)

    def _sa(self, s, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return np.concatenate([self.norm.normalize(s, "states"), self.norm.normalize(a, "actions")], axis=-1)

    def q_values(self, s, a) -> np.ndarray:
        out, _ = net_forward(self.q, self._sa(s, a), self.q_spec)
        return out.data[:, 0]

    def target_q_values(self, s, a) -> np.ndarray:
        out, _ = net_forward(self.q_target, self._sa(s, a), self.q_target_spec)
        return out.data[:, 0]

    def v_values(self, s) -> np.ndarray:
        z = self.norm.normalize(np.atleast_2d(np.asarray(s, dtype=np.float64)), "states")
        out, _ = net_forward(self.v, z, self.v_spec)
        return out.data[:, 0]

    def save(self, path: Path) -> None:
        header = {"kind": "tvf", "ds": self.ds, "da": self.da, **asdict(self.config)}
        save_checkpoint(path, ParamSet.merged(self.q, self.v, self.q_target), header)

    @classmethod
    def load(cls, path: Path, norm: NormStats) -> "ValueHeads":
        params, header = load_checkpoint(path)
        if header.get("kind") != "tvf":
            raise ValueError(f"{path} não é um checkpoint de TVF")
        fields = {k: header[k] for k in TVFConfig.__dataclass_fields__}
        heads = cls(header["ds"], header["da"], norm, TVFConfig(**fields))
        heads.q = params.subset("tvf/q/")
        heads.v = params.subset("tvf/v/")
        heads.q_target = params.subset("tvf/q_target/")
        return heads


def predict_future_return(heads: ValueHeads, s, a) -> float:
    """Q_φ(s,a) nas unidades de R_t (descontado)"""
    return float(heads.q_values(s, a)[0])


def value_objective(heads: ValueHeads, batch: TransitionBatch, w: float | None = None) -> tuple[float, np.ndarray]:
    """(1−w)·E[L₂^τ(Q_alvo − V)] + w·E[L₂^τ(R_own − V)] e gradiente em V"""
    cfg = heads.config
    w = cfg.w if w is None else w
    qt = heads.target_q_values(batch.s, batch.a)
    v = heads.v_values(batch.s)
    u_q, u_r = qt - v, batch.ret - v
    loss = (1.0 - w) * expectile_loss(u_q, cfg.tau).mean() + w * expectile_loss(u_r, cfg.tau).mean()
    dv = -((1.0 - w) * expectile_grad(u_q, cfg.tau) + w * expectile_grad(u_r, cfg.tau)) / len(v)
    return float(loss), dv


def iql_value_loss(heads: ValueHeads, batch: TransitionBatch) -> float:
    """Objetivo de expectil in-sample original: E[L₂^τ(Q_alvo(s,a) − V(s))]"""
    u = heads.target_q_values(batch.s, batch.a) - heads.v_values(batch.s)
    return float(expectile_loss(u, heads.config.tau).mean())


def bellman_targets(heads: ValueHeads, batch: TransitionBatch) -> np.ndarray:
    """r + γ·(1−done)·V_ψ(s'); transições terminais não fazem bootstrap"""
    mask = 1.0 - batch.done.astype(np.float64)
    return batch.r + heads.config.gamma * mask * heads.v_values(batch.s2)


def tvf_train_step(heads: ValueHeads, batch: TransitionBatch) -> tuple[float, float]:
    """Um passo Adam em ψ, um em φ e atualização Polyak do alvo"""
    loss_v, dv = value_objective(heads, batch)
    z = heads.norm.normalize(batch.s, "states")
    _, tape = net_forward(heads.v, z, heads.v_spec)
    adam_step(heads.v, backprop(tape, dv[:, None]), heads.v_opt)

    y = bellman_targets(heads, batch)
    out, tape = net_forward(heads.q, heads._sa(batch.s, batch.a), heads.q_spec)
    diff = out.data[:, 0] - y
    loss_q = float((diff * diff).mean())
    if not (np.isfinite(loss_v) and np.isfinite(loss_q)):
        raise NonFiniteError(
            f"Perda não finita no TVF (L_V={loss_v}, L_Q={loss_q}, lote={len(y)}, "
            f"|r|max={np.abs(batch.r).max():.3g}, |R|max={np.abs(batch.ret).max():.3g})"
        )
    adam_step(heads.q, backprop(tape, (2.0 * diff / len(y))[:, None]), heads.q_opt)
    heads.q_target.polyak_from(heads.q.renamed("tvf/q/", "tvf/q_target/"), heads.config.polyak)
    return loss_v, loss_q


def train_tvf(heads: ValueHeads, dataset: Dataset, steps: int, rng: np.random.Generator,
              progress: bool = False) -> list[dict]:
    """Treina o TVF por `steps` lotes uniformes de transições"""
    history = []
    for i in tqdm(range(steps), desc="TVF", disable=not progress):
        batch = transition_batch(dataset, heads.config.batch, rng)
        loss_v, loss_q = tvf_train_step(heads, batch)
        history.append({"step": i, "loss_v": loss_v, "loss_q": loss_q})
    if history:
        logger.info("TVF treinado: L_V=%.4g L_Q=%.4g", history[-1]["loss_v"], history[-1]["loss_q"])
    return history
