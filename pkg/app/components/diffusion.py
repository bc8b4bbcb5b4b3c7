"""
Modelo de difusão condicional (formulação EDM) sobre segmentos sucessores
de H passos, com denoiser transformer modulado por (ruído, condição).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from tqdm import tqdm

from components.dataset import Dataset, SegmentBatch, sample_segment_batch
from components.neural_core import (AdamState, NonFiniteError, Tape, Tensor, adam_step, add,
                                    affine, backprop, block_shapes, gelu, init_params, layer_norm,
                                    load_checkpoint, mlp_apply, mlp_shapes, modulate, net_forward,
                                    save_checkpoint, transformer_block)

logger = logging.getLogger(__name__)

MODS = ("shift1", "scale1", "shift2", "scale2")


# ========== CRONOGRAMA DE RUÍDO ==========

@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    steps: int = 10

    def __post_init__(self):
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError(f"Requer 0 < σ_min < σ_max (recebido {self.sigma_min}, {self.sigma_max})")
        if self.rho <= 0:
            raise ValueError("ρ deve ser positivo")
        if self.steps < 1:
            raise ValueError("N_σ deve ser ≥ 1")

    def ladder(self) -> np.ndarray:
        """σ_0 = σ_max > … > σ_{N−1} = σ_min, seguido de σ_N = 0"""
        if self.steps == 1:
            return np.array([self.sigma_max, 0.0])
        i = np.arange(self.steps)
        a = self.sigma_max ** (1.0 / self.rho)
        b = self.sigma_min ** (1.0 / self.rho)
        sigmas = (a + i / (self.steps - 1) * (b - a)) ** self.rho
        sigmas[0], sigmas[-1] = self.sigma_max, self.sigma_min
        return np.append(sigmas, 0.0)


def c_skip(sigma, sigma_data: float = 1.0):
    sigma = np.asarray(sigma, dtype=np.float64)
    return sigma_data ** 2 / (sigma ** 2 + sigma_data ** 2)


def c_out(sigma, sigma_data: float = 1.0):
    sigma = np.asarray(sigma, dtype=np.float64)
    return sigma * sigma_data / np.sqrt(sigma ** 2 + sigma_data ** 2)


def c_in(sigma, sigma_data: float = 1.0):
    sigma = np.asarray(sigma, dtype=np.float64)
    return 1.0 / np.sqrt(sigma ** 2 + sigma_data ** 2)


def c_noise(sigma):
    return np.log(np.asarray(sigma, dtype=np.float64)) / 4.0


def loss_weight(sigma, sigma_data: float = 1.0):
    """λ(σ) = (σ² + σ_d²)/(σ·σ_d)², de modo que λ·c_out² = 1"""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def perturb(x0: np.ndarray, sigma, rng: np.random.Generator) -> np.ndarray:
    """x_σ = x0 + σ·ε"""
    x0 = np.asarray(x0, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("σ deve ser ≥ 0")
    eps = rng.standard_normal(x0.shape)
    return x0 + sigma.reshape(sigma.shape + (1,) * (x0.ndim - sigma.ndim)) * eps


def noise_features(sigma, n_freq: int) -> np.ndarray:
    """Features de Fourier fixas de c_noise(σ), fora da fita"""
    freqs = np.geomspace(1.0, 32.0, n_freq)
    angles = c_noise(np.atleast_1d(sigma))[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


# ========== DENOISER ==========

@dataclass(frozen=True)
class DiffusionConfig:
    K: int = 10
    H: int = 10
    width: int = 128
    depth: int = 4
    heads: int = 4
    n_freq: int = 16
    sigma_data: float = 1.0
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    n_sigma: int = 10
    lr: float = 3e-4
    batch: int = 64
    steps: int = 20000

    def __post_init__(self):
        if self.K < 1 or self.H < 1:
            raise ValueError("K e H devem ser ≥ 1")
        if self.width % self.heads:
            raise ValueError(f"Largura {self.width} não divisível por {self.heads} cabeças")
        self.schedule()

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.sigma_min, self.sigma_max, self.rho, self.n_sigma)


@dataclass(frozen=True)
class DenoiserSpec:
    """F_θ: transformer bidirecional sobre H tokens com modulação DiT"""

    K: int
    H: int
    token_dim: int
    width: int = 128
    depth: int = 4
    heads: int = 4
    n_freq: int = 16
    prefix: str = "diffusion"

    @property
    def cond_dim(self) -> int:
        return self.K * self.token_dim + 1

    @property
    def input_dims(self) -> dict:
        return {"x": self.token_dim, "noise": 2 * self.n_freq, "cond": self.cond_dim}

    def param_shapes(self) -> dict:
        p, w = self.prefix, self.width
        shapes = {
            f"{p}/in/w": ((self.token_dim, w), "uniform"),
            f"{p}/in/b": ((w,), "zeros"),
            f"{p}/pos": ((self.H, w), "uniform"),
        }
        shapes.update(mlp_shapes(f"{p}/cond", [self.cond_dim, w, w]))
        shapes.update(mlp_shapes(f"{p}/noise", [2 * self.n_freq, w, w]))
        for i in range(self.depth):
            shapes.update(block_shapes(f"{p}/block{i}", w, modulated=True))
            for m in MODS:
                shapes[f"{p}/block{i}/ada/{m}/w"] = ((w, w), "uniform")
                shapes[f"{p}/block{i}/ada/{m}/b"] = ((w,), "zeros")
        for m in ("shift", "scale"):
            shapes[f"{p}/final/{m}/w"] = ((w, w), "uniform")
            shapes[f"{p}/final/{m}/b"] = ((w,), "zeros")
        shapes[f"{p}/out/w"] = ((w, self.token_dim), "uniform")
        shapes[f"{p}/out/b"] = ((self.token_dim,), "zeros")
        return shapes

    def _mod(self, tape: Tape, emb: Tensor, path: str) -> Tensor:
        return affine(tape, emb, tape.param(f"{path}/w"), tape.param(f"{path}/b"), name=path)

    def build(self, tape: Tape, inputs: Mapping[str, object]) -> Tensor:
        p = self.prefix
        h = affine(tape, inputs["x"], tape.param(f"{p}/in/w"), tape.param(f"{p}/in/b"), name=f"{p}/in")
        h = add(tape, h, tape.param(f"{p}/pos"), name=f"{p}/pos")
        c = mlp_apply(tape, f"{p}/cond", inputs["cond"], 2)
        e = mlp_apply(tape, f"{p}/noise", inputs["noise"], 2)
        emb = gelu(tape, add(tape, c, e, name=f"{p}/emb"), name=f"{p}/emb/gelu")
        for i in range(self.depth):
            blk = f"{p}/block{i}"
            mods = tuple(self._mod(tape, emb, f"{blk}/ada/{m}") for m in MODS)
            h = transformer_block(tape, blk, h, self.heads, causal=False, mods=mods)
        h = modulate(tape, layer_norm(tape, h, name=f"{p}/final/ln"),
                     self._mod(tape, emb, f"{p}/final/shift"), self._mod(tape, emb, f"{p}/final/scale"),
                     name=f"{p}/final")
        return affine(tape, h, tape.param(f"{p}/out/w"), tape.param(f"{p}/out/b"), name=f"{p}/out")

    def example_inputs(self, rng: np.random.Generator) -> dict:
        return {
            "x": rng.standard_normal((2, self.H, self.token_dim)),
            "noise": noise_features(np.exp(rng.normal(size=2)), self.n_freq),
            "cond": rng.standard_normal((2, self.cond_dim)),
        }


@dataclass(frozen=True)
class Condition:
    """Segmento condicional normalizado (K linhas) e retorno normalizado"""

    tokens: np.ndarray
    ret: float

    def __post_init__(self):
        tokens = np.array(self.tokens, dtype=np.float64)
        if tokens.ndim != 2:
            raise ValueError(f"Segmento condicional deve ser 2-D, recebido {tokens.shape}")
        if not np.isfinite(self.ret):
            raise ValueError("Retorno da condição não finito")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "ret", float(self.ret))

    def flat(self) -> np.ndarray:
        return np.append(self.tokens.reshape(-1), self.ret)


def _cond_matrix(tokens: np.ndarray, ret: np.ndarray) -> np.ndarray:
    return np.concatenate([tokens.reshape(len(tokens), -1), np.asarray(ret).reshape(-1, 1)], axis=-1)


class DenoiserModel:
    """D(x, σ) = c_skip·x + c_out·F(c_in·x, c_noise, cond)"""

    def __init__(self, token_dim: int, config: DiffusionConfig, seed: int = 0):
        self.config = config
        self.token_dim = token_dim
        self.spec = DenoiserSpec(config.K, config.H, token_dim, config.width, config.depth,
                                 config.heads, config.n_freq)
        self.params = init_params(self.spec, seed)
        self.opt = AdamState.for_params(self.params, lr=config.lr)

    @property
    def sigma_data(self) -> float:
        return self.config.sigma_data

    def _inputs(self, x: np.ndarray, sigma: np.ndarray, cond: np.ndarray) -> dict:
        if cond.shape[-1] != self.spec.cond_dim:
            raise ValueError(f"Condição com {cond.shape[-1]} valores, esperado {self.spec.cond_dim} (K={self.config.K})")
        scale = c_in(sigma, self.sigma_data)[:, None, None]
        return {"x": scale * x, "noise": noise_features(sigma, self.config.n_freq), "cond": cond}

    def denoise(self, x: np.ndarray, sigma, cond: np.ndarray) -> np.ndarray:
        """Denoiser pré-condicionado em lote; σ > 0 por elemento"""
        x = np.asarray(x, dtype=np.float64)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(x),))
        if np.any(sigma <= 0):
            raise ValueError("O denoiser requer σ > 0")
        out, _ = net_forward(self.params, self._inputs(x, sigma, cond), self.spec)
        s = sigma[:, None, None]
        return c_skip(s, self.sigma_data) * x + c_out(s, self.sigma_data) * out.data

    def save(self, path: Path) -> None:
        header = {"kind": "diffusion", "token_dim": self.token_dim, **asdict(self.config)}
        save_checkpoint(path, self.params, header)

    @classmethod
    def load(cls, path: Path) -> "DenoiserModel":
        params, header = load_checkpoint(path)
        if header.get("kind") != "diffusion":
            raise ValueError(f"{path} não é um checkpoint de difusão")
        fields = {k: header[k] for k in DiffusionConfig.__dataclass_fields__}
        model = cls(header["token_dim"], DiffusionConfig(**fields))
        model.params = params
        return model


# ========== TREINO ==========

def denoising_loss(model: DenoiserModel, batch: SegmentBatch, sigma: np.ndarray,
                   eps: np.ndarray) -> tuple[float, np.ndarray, Tape]:
    """Perda ponderada λ(σ)·‖D(x0 + σε) − x0‖² e gradiente na saída de F"""
    x0 = batch.successor
    s = sigma[:, None, None]
    x_noisy = x0 + s * eps
    cond = _cond_matrix(batch.cond, batch.ret)
    out, tape = net_forward(model.params, model._inputs(x_noisy, sigma, cond), model.spec)
    denoised = c_skip(s, model.sigma_data) * x_noisy + c_out(s, model.sigma_data) * out.data
    diff = denoised - x0
    weight = loss_weight(s, model.sigma_data)
    per_elem = x0[0].size
    loss = float((weight * diff * diff).sum() / (len(x0) * per_elem))
    d_out = 2.0 * weight * diff * c_out(s, model.sigma_data) / (len(x0) * per_elem)
    return loss, d_out, tape


def diffusion_train_step(model: DenoiserModel, batch: SegmentBatch, rng: np.random.Generator) -> float:
    """σ ~ log-normal(P_mean, P_std), perturbação e um passo Adam"""
    cfg = model.config
    sigma = np.exp(rng.normal(cfg.p_mean, cfg.p_std, size=len(batch.successor)))
    eps = rng.standard_normal(batch.successor.shape)
    loss, d_out, tape = denoising_loss(model, batch, sigma, eps)
    if not np.isfinite(loss):
        raise NonFiniteError(f"Perda de difusão não finita (σ ∈ [{sigma.min():.3g}, {sigma.max():.3g}])")
    adam_step(model.params, backprop(tape, d_out), model.opt)
    return loss


def train_diffusion(model: DenoiserModel, dataset: Dataset, steps: int, rng: np.random.Generator,
                    progress: bool = False) -> list[dict]:
    cfg = model.config
    history = []
    for i in tqdm(range(steps), desc="Difusão", disable=not progress):
        batch = sample_segment_batch(dataset, cfg.K, cfg.H, cfg.batch, rng)
        history.append({"step": i, "loss": diffusion_train_step(model, batch, rng)})
    if history:
        logger.info("Difusão treinada: perda final %.4g", history[-1]["loss"])
    return history


# ========== AMOSTRAGEM ==========

def _heun(model: DenoiserModel, x: np.ndarray, cond: np.ndarray, ladder: np.ndarray) -> np.ndarray:
    for sigma, sigma_next in zip(ladder[:-1], ladder[1:]):
        d = (x - model.denoise(x, sigma, cond)) / sigma
        x_next = x + (sigma_next - sigma) * d
        if sigma_next > 0:
            d2 = (x_next - model.denoise(x_next, sigma_next, cond)) / sigma_next
            x_next = x + (sigma_next - sigma) * 0.5 * (d + d2)
        if not np.isfinite(x_next).all():
            raise NonFiniteError(f"Estado não finito na amostragem em σ={sigma:.4g}")
        x = x_next
    return x


def sample_batch(model: DenoiserModel, conditions: Sequence[Condition], schedule: NoiseSchedule,
                 rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Heun determinístico pela escada de σ; um gerador por condição.

    Cada condição é integrada isoladamente: o resultado de uma condição não
    depende das demais do lote (bit a bit).
    """
    if len(conditions) != len(rngs):
        raise ValueError("Uma semente por condição")
    shape = (1, model.config.H, model.token_dim)
    ladder = schedule.ladder()
    out = [
        _heun(model, rng.standard_normal(shape) * schedule.sigma_max, cond.flat()[None, :], ladder)[0]
        for cond, rng in zip(conditions, rngs)
    ]
    return np.stack(out) if out else np.empty((0,) + shape[1:])


def sample(model: DenoiserModel, condition: Condition, schedule: NoiseSchedule,
           rng: np.random.Generator) -> np.ndarray:
    """Segmento H×(ds+da+1) em espaço normalizado"""
    return sample_batch(model, [condition], schedule, [rng])[0]
