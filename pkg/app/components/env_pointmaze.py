"""
Labirinto de ponto-massa determinístico e coletores roteirizados.

O dataset canônico "stitch-maze" contém rotas que nunca ligam a largada ao
objetivo: a política ótima exige costurar pedaços de trajetórias distintas.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from components.dataset import GAMMA, Dataset, Trajectory

logger = logging.getLogger(__name__)

STITCH_MAZE_LAYOUT = """
########
#S.....#
###.#..#
###.#..#
###.####
###.####
###G####
########
"""

REWARD_MODES = ("sparse", "dense")


class MazeStateError(ValueError):
    """Estado fora das invariantes do labirinto"""


@dataclass(frozen=True, eq=False)
class MazeSpec:
    walls: np.ndarray
    start_box: tuple[tuple[float, float], tuple[float, float]]
    goal: tuple[float, float]
    goal_radius: float
    cell_size: float = 1.0
    reward_mode: str = "sparse"
    max_steps: int = 300
    dt: float = 0.1
    vmax: float = 1.0
    layout: str = ""

    def __post_init__(self):
        walls = np.array(self.walls, dtype=bool)
        walls.setflags(write=False)
        object.__setattr__(self, "walls", walls)
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"Modo de recompensa desconhecido: {self.reward_mode}")
        if self.max_steps < 10:
            raise ValueError("max_steps deve ser ≥ 10")
        (x0, y0), (x1, y1) = self.start_box
        for corner in ((x0, y0), (x1, y0), (x0, y1), (x1, y1)):
            if not self.is_free(np.array(corner)):
                raise ValueError(f"Região de largada toca parede em {corner}")
        if not self.is_free(np.array(self.goal)):
            raise ValueError(f"Objetivo {self.goal} dentro de parede")

    def cell_of(self, pos: np.ndarray) -> tuple[int, int]:
        return int(np.floor(pos[1] / self.cell_size)), int(np.floor(pos[0] / self.cell_size))

    def is_free(self, pos: np.ndarray) -> bool:
        row, col = self.cell_of(pos)
        rows, cols = self.walls.shape
        if not (0 <= row < rows and 0 <= col < cols):
            return False
        return not self.walls[row, col]

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return ((col + 0.5) * self.cell_size, (row + 0.5) * self.cell_size)


@dataclass(frozen=True)
class EnvState:
    pos: np.ndarray
    vel: np.ndarray
    t: int = 0

    def vector(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    @classmethod
    def from_vector(cls, v: np.ndarray, t: int = 0) -> "EnvState":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:2].copy(), v[2:4].copy(), t)


def parse_layout(layout: str, cell_size: float = 1.0, reward_mode: str = "sparse",
                 max_steps: int = 300, dt: float = 0.1, vmax: float = 1.0,
                 goal_radius_cells: float = 0.5, start_margin: float = 0.3) -> MazeSpec:
    """Converte arte ASCII ('#' parede, '.' livre, 'S' largada, 'G' objetivo)"""
    lines = [line.strip() for line in layout.strip().splitlines() if line.strip()]
    if not lines or len({len(line) for line in lines}) != 1:
        raise ValueError("Layout deve ser retangular e não vazio")
    walls = np.array([[ch == "#" for ch in line] for line in lines])
    starts = [(r, c) for r, line in enumerate(lines) for c, ch in enumerate(line) if ch == "S"]
    goals = [(r, c) for r, line in enumerate(lines) for c, ch in enumerate(line) if ch == "G"]
    if len(starts) != 1 or len(goals) != 1:
        raise ValueError("Layout precisa de exatamente um 'S' e um 'G'")
    (sr, sc), (gr, gc) = starts[0], goals[0]
    start_box = (
        ((sc + start_margin) * cell_size, (sr + start_margin) * cell_size),
        ((sc + 1 - start_margin) * cell_size, (sr + 1 - start_margin) * cell_size),
    )
    return MazeSpec(
        walls=walls,
        start_box=start_box,
        goal=((gc + 0.5) * cell_size, (gr + 0.5) * cell_size),
        goal_radius=goal_radius_cells * cell_size,
        cell_size=cell_size,
        reward_mode=reward_mode,
        max_steps=max_steps,
        dt=dt,
        vmax=vmax,
        layout="\n".join(lines),
    )


def step(spec: MazeSpec, state: EnvState, action) -> tuple[EnvState, float, bool]:
    """Cinemática com colisão separável por eixo"""
    if not spec.is_free(state.pos):
        raise MazeStateError(f"Posição {state.pos.tolist()} dentro de parede")
    if np.any(np.abs(state.vel) > spec.vmax + 1e-12):
        raise MazeStateError(f"Velocidade {state.vel.tolist()} acima de vmax={spec.vmax}")
    if state.t < 0:
        raise MazeStateError("Índice de passo negativo")

    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    vel = np.clip(state.vel + a * spec.dt, -spec.vmax, spec.vmax)
    pos = state.pos.copy()
    for axis in (0, 1):
        trial = pos.copy()
        trial[axis] += vel[axis] * spec.dt
        if spec.is_free(trial):
            pos = trial
        else:
            vel[axis] = 0.0
    t = state.t + 1

    if spec.reward_mode == "sparse":
        reached = reached_goal(spec, pos)
        reward = 1.0 if reached else 0.0
        done = reached or t >= spec.max_steps
    else:
        reward = -float(np.linalg.norm(pos - np.asarray(spec.goal))) * spec.dt
        done = t >= spec.max_steps
    return EnvState(pos, vel, t), reward, done


def reached_goal(spec: MazeSpec, pos: np.ndarray) -> bool:
    return float(np.linalg.norm(np.asarray(pos) - np.asarray(spec.goal))) <= spec.goal_radius


# ========== POLÍTICAS ==========

class EpisodePolicy(Protocol):
    def reset(self) -> None: ...

    def act(self, state: np.ndarray, rtg: float, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class ScriptedPolicy:
    """Controlador PD por waypoints com ruído uniforme"""

    waypoints: np.ndarray
    noise_scale: float = 0.0
    gain: float = 3.0
    damping: float = 2.5
    capture_radius: float = 0.3
    loop_start: int | None = None
    index: int = 0

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if len(self.waypoints) == 0:
            raise ValueError("Lista de waypoints vazia")

    def reset(self) -> None:
        self.index = 0

    def _advance(self, pos: np.ndarray) -> None:
        last = len(self.waypoints) - 1
        for _ in range(len(self.waypoints)):
            if np.linalg.norm(self.waypoints[self.index] - pos) > self.capture_radius:
                return
            if self.index < last:
                self.index += 1
            elif self.loop_start is not None:
                self.index = self.loop_start
            else:
                return

    def act(self, state: np.ndarray, rtg: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
        state = np.asarray(state, dtype=np.float64)
        pos, vel = state[:2], state[2:4]
        self._advance(pos)
        action = self.gain * (self.waypoints[self.index] - pos) - self.damping * vel
        if self.noise_scale > 0:
            action = action + rng.uniform(-self.noise_scale, self.noise_scale, size=2)
        return np.clip(action, -1.0, 1.0)


def scripted_policy(state: EnvState, waypoints, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Ação de um controlador recém-iniciado na rota"""
    return ScriptedPolicy(waypoints, noise_scale).act(state.vector(), 0.0, rng)


@dataclass
class RandomPolicy:
    def reset(self) -> None:
        pass

    def act(self, state: np.ndarray, rtg: float, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=2)


# ========== ROLLOUTS ==========

@dataclass
class Rollout:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    rtgs: np.ndarray
    terminal: bool
    success: bool

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())


def sample_start(spec: MazeSpec, rng: np.random.Generator,
                 box: tuple[tuple[float, float], tuple[float, float]] | None = None) -> EnvState:
    (x0, y0), (x1, y1) = box or spec.start_box
    return EnvState(np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)]), np.zeros(2), 0)


def rollout(spec: MazeSpec, policy: EpisodePolicy, start: EnvState, rng: np.random.Generator,
            target_rtg: float = 0.0) -> Rollout:
    """Executa um episódio; o RTG decai com a recompensa observada"""
    policy.reset()
    state = start
    g = float(target_rtg)
    states, actions, rewards, rtgs = [], [], [], []
    success = False
    while True:
        obs = state.vector()
        action = np.clip(np.asarray(policy.act(obs, g, rng), dtype=np.float64), -1.0, 1.0)
        state, reward, done = step(spec, state, action)
        states.append(obs)
        actions.append(action)
        rewards.append(reward)
        rtgs.append(g)
        g = g - reward
        if spec.reward_mode == "sparse" and reward > 0:
            success = True
        if done:
            break
    return Rollout(np.array(states), np.array(actions), np.array(rewards), np.array(rtgs),
                   terminal=success, success=success)


@dataclass(frozen=True)
class RouteSpec:
    name: str
    waypoints: tuple[tuple[float, float], ...]
    count: int
    noise_scale: float
    start_box: tuple[tuple[float, float], tuple[float, float]] | None = None
    loop_start: int | None = None

    def policy(self) -> ScriptedPolicy:
        return ScriptedPolicy(np.array(self.waypoints), self.noise_scale, loop_start=self.loop_start)


def collect_dataset(spec: MazeSpec, route_specs: Sequence[RouteSpec], seed: int,
                    gamma: float = GAMMA) -> Dataset:
    """Coleta trajetórias roteirizadas com um fluxo de RNG por episódio"""
    if not route_specs:
        raise ValueError("Nenhuma rota informada")
    trajectories = []
    for ri, route in enumerate(route_specs):
        for k in range(route.count):
            rng = np.random.default_rng([seed, ri, k])
            start = sample_start(spec, rng, route.start_box)
            ep = rollout(spec, route.policy(), start, rng)
            if len(ep.states) == 0:
                raise ValueError(f"Rota {route.name} produziu trajetória vazia")
            trajectories.append(Trajectory(ep.states, ep.actions, ep.rewards, ep.terminal,
                                           len(trajectories)))
        logger.info("Rota %s: %d trajetórias coletadas", route.name, route.count)
    return Dataset.from_trajectories(trajectories, gamma)


# ========== STITCH-MAZE ==========

def stitch_maze_spec(**physics) -> MazeSpec:
    return parse_layout(STITCH_MAZE_LAYOUT, **physics)


def stitch_maze_routes(spec: MazeSpec, count_a: int = 30, count_b: int = 30,
                       noise_scale: float = 0.2) -> tuple[list[RouteSpec], RouteSpec]:
    """Família A (largada → junção → laço sem saída), família B (junção → objetivo) e a rota especialista"""
    c = spec.cell_center
    junction = c(1, 3)
    half = 0.3 * spec.cell_size
    junction_box = ((junction[0] - half, junction[1] - half), (junction[0] + half, junction[1] + half))
    family_a = RouteSpec(
        name="A",
        waypoints=(junction, c(1, 5), c(1, 6), c(3, 6), c(3, 5)),
        count=count_a,
        noise_scale=noise_scale,
        loop_start=1,
    )
    family_b = RouteSpec(
        name="B",
        waypoints=(c(2, 3), c(4, 3), c(6, 3)),
        count=count_b,
        noise_scale=noise_scale,
        start_box=junction_box,
    )
    expert = RouteSpec(name="expert", waypoints=(junction, c(4, 3), c(6, 3)), count=1, noise_scale=0.0)
    return [family_a, family_b], expert


def reference_returns(spec: MazeSpec, expert_route: RouteSpec, episodes: int = 100, seed: int = 0,
                      expert_episodes: int = 10) -> tuple[float, float]:
    """Retornos médios de referência: política uniforme e rota especialista"""
    random_returns = []
    for k in range(episodes):
        rng = np.random.default_rng([seed, 0, k])
        random_returns.append(rollout(spec, RandomPolicy(), sample_start(spec, rng), rng).ret)
    expert_returns = []
    for k in range(expert_episodes):
        rng = np.random.default_rng([seed, 1, k])
        expert_returns.append(rollout(spec, expert_route.policy(), sample_start(spec, rng), rng).ret)
    return float(np.mean(random_returns)), float(np.mean(expert_returns))
