"""
Núcleo numérico: tensores float64, fita de diferenciação reversa,
camadas padrão, otimizador Adam e checkpoints binários.

Todas as redes do pipeline (TVF, difusão e DT) são compostas a partir das
primitivas deste módulo.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Protocol, Sequence

import numpy as np
from scipy.special import erf

from components.artifact_store import atomic_write_bytes

logger = logging.getLogger(__name__)

LN_VARIANCE_FLOOR = 1e-6
CHECKPOINT_MAGIC = b"BGCKPT1"

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Formato de entrada incompatível com a camada"""


class NonFiniteError(FloatingPointError):
    """NaN/Inf detectado na saída de uma camada"""


class TapeConsumedError(RuntimeError):
    """Fita já percorrida por backprop"""


class CheckpointFormatError(ValueError):
    """Arquivo de checkpoint corrompido"""


class Tensor:
    """Array float64 com gradiente opcional"""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str = ""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor({self.name!r}, shape={self.shape})"


# ========== PARÂMETROS ==========

def path_seed(seed: int, path: str) -> int:
    """Semente determinística por caminho de parâmetro"""
    digest = hashlib.sha256(f"{seed}:{path}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def init_array(path: str, shape: tuple[int, ...], kind: str, seed: int) -> np.ndarray:
    """Inicializa um parâmetro: uniform(±1/√fan_in), zeros ou ones"""
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "uniform":
        bound = 1.0 / np.sqrt(shape[0])
        rng = np.random.default_rng(path_seed(seed, path))
        return rng.uniform(-bound, bound, size=shape)
    raise ValueError(f"Inicialização desconhecida para {path}: {kind}")


class ParamSet:
    """Mapa ordenado caminho → Tensor"""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    @classmethod
    def initialize(cls, shapes: Mapping[str, tuple[tuple[int, ...], str]], seed: int) -> "ParamSet":
        params = cls()
        for path, (shape, kind) in shapes.items():
            params.add(path, init_array(path, tuple(shape), kind, seed))
        return params

    def add(self, path: str, array) -> Tensor:
        if path in self._tensors:
            raise KeyError(f"Parâmetro duplicado: {path}")
        tensor = Tensor(array, name=path)
        self._tensors[path] = tensor
        return tensor

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._tensors[path]
        except KeyError:
            raise KeyError(f"Parâmetro inexistente: {path}") from None

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for path, tensor in self._tensors.items():
            out.add(path, tensor.data.copy())
        return out

    def polyak_from(self, source: "ParamSet", rate: float) -> None:
        """Média móvel exponencial: alvo ← (1−rate)·alvo + rate·fonte"""
        for path, tensor in self._tensors.items():
            tensor.data *= 1.0 - rate
            tensor.data += rate * source[path].data

    def renamed(self, old_prefix: str, new_prefix: str) -> "ParamSet":
        out = ParamSet()
        for path, tensor in self._tensors.items():
            if not path.startswith(old_prefix):
                raise KeyError(f"{path} não começa com {old_prefix}")
            out.add(new_prefix + path[len(old_prefix):], tensor.data.copy())
        return out

    def subset(self, prefix: str) -> "ParamSet":
        out = ParamSet()
        for path, tensor in self._tensors.items():
            if path.startswith(prefix):
                out.add(path, tensor.data.copy())
        return out

    @staticmethod
    def merged(*sets: "ParamSet") -> "ParamSet":
        out = ParamSet()
        for params in sets:
            for path, tensor in params.items():
                out.add(path, tensor.data)
        return out


# ========== FITA ==========

@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Registro das primitivas executadas, percorrido uma única vez"""

    def __init__(self, params: ParamSet):
        self.params = params
        self.inputs: dict[str, Tensor] = {}
        self.output: Tensor | None = None
        self._nodes: list[_Node] = []
        self._consumed = False

    def param(self, path: str) -> Tensor:
        return self.params[path]

    def constant(self, array, name: str = "input") -> Tensor:
        tensor = Tensor(array, name=name)
        _check_finite(tensor.data, name)
        return tensor

    def record(self, name: str, data: np.ndarray, parents: Sequence[Tensor],
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        _check_finite(data, name)
        out = Tensor(data, name=name)
        self._nodes.append(_Node(out, tuple(parents), backward, name))
        return out

    def __len__(self) -> int:
        return len(self._nodes)

    def grad_of(self, tensor: Tensor) -> np.ndarray:
        if not self._consumed:
            raise RuntimeError("Gradientes disponíveis apenas após backprop")
        if tensor.grad is None:
            return np.zeros_like(tensor.data)
        return tensor.grad


def _check_finite(data: np.ndarray, name: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"Ativação não finita na camada '{name}'")


def backprop(tape: Tape, loss_grad) -> dict[str, np.ndarray]:
    """Percorre a fita em ordem reversa; devolve gradientes por caminho"""
    if tape._consumed:
        raise TapeConsumedError("Fita já consumida por backprop")
    if tape.output is None:
        raise RuntimeError("Fita sem saída registrada")
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != tape.output.shape:
        raise ShapeError(
            f"loss_grad com formato {loss_grad.shape}, saída tem {tape.output.shape}"
        )
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(tape.output): loss_grad.copy()}
    touched: dict[int, Tensor] = {id(tape.output): tape.output}
    for node in reversed(tape._nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        node.out.grad = g_out
        for parent, g in zip(node.parents, node.backward(g_out)):
            if g is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.array(g, dtype=np.float64, copy=True)
                touched[key] = parent

    for key, g in grads.items():
        touched[key].grad = g
    return {
        path: grads.get(id(tensor), np.zeros_like(tensor.data))
        for path, tensor in tape.params.items()
    }


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ========== PRIMITIVAS ==========

def affine(tape: Tape, x: Tensor, w: Tensor, b: Tensor | None = None, name: str = "affine") -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"Camada '{name}': entrada com dimensão {x.shape[-1]}, esperado {w.shape[0]}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    def backward(g):
        gx = g @ w.data.T
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        out = [gx, x2.T @ g2]
        if b is not None:
            out.append(g2.sum(axis=0))
        return out

    parents = (x, w) if b is None else (x, w, b)
    return tape.record(name, y, parents, backward)


def layer_norm(tape: Tape, x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               name: str = "layer_norm") -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_VARIANCE_FLOOR)
    xhat = xc * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data

    def backward(g):
        gxhat = g * gain.data if gain is not None else g
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        out = [gx]
        if gain is not None:
            out.append((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None:
            out.append(g.reshape(-1, d).sum(axis=0))
        return out

    parents = [x] + [t for t in (gain, bias) if t is not None]
    return tape.record(name, y, parents, backward)


def gelu(tape: Tape, x: Tensor, name: str = "gelu") -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    y = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return [g * (cdf + x.data * pdf)]

    return tape.record(name, y, (x,), backward)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(tape: Tape, x: Tensor, name: str = "softmax") -> Tensor:
    p = _softmax(x.data)

    def backward(g):
        return [p * (g - (g * p).sum(axis=-1, keepdims=True))]

    return tape.record(name, p, (x,), backward)


def attention(tape: Tape, q: Tensor, k: Tensor, v: Tensor, n_heads: int, causal: bool = True,
              key_mask: np.ndarray | None = None, name: str = "attention") -> Tensor:
    """Atenção por produto escalar com máscara causal e de padding

    key_mask (B, T) marca as chaves válidas; a diagonal é sempre permitida
    para que linhas de padding não fiquem sem chave alguma.
    """
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 3:
        raise ShapeError(f"Camada '{name}': q/k/v devem ter o mesmo formato (B, T, D)")
    bsz, seq, dim = q.shape
    if dim % n_heads:
        raise ShapeError(f"Camada '{name}': largura {dim} não divisível por {n_heads} cabeças")
    dh = dim // n_heads
    scale = 1.0 / np.sqrt(dh)

    def split(a):
        return a.reshape(bsz, seq, n_heads, dh).transpose(0, 2, 1, 3)

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(bsz, seq, dim)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    allowed = np.tril(np.ones((seq, seq), dtype=bool)) if causal else np.ones((seq, seq), dtype=bool)
    allowed = np.broadcast_to(allowed, (bsz, 1, seq, seq))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (bsz, seq):
            raise ShapeError(f"Camada '{name}': key_mask com formato {key_mask.shape}")
        allowed = (allowed & key_mask[:, None, None, :]) | np.eye(seq, dtype=bool)
    scores = np.where(allowed, (qh @ kh.transpose(0, 1, 3, 2)) * scale, -np.inf)
    p = _softmax(scores)
    out = merge(p @ vh)

    def backward(g):
        go = split(g)
        gv = p.transpose(0, 1, 3, 2) @ go
        gp = go @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh
        return [merge(gq), merge(gk), merge(gv)]

    return tape.record(name, out, (q, k, v), backward)


def embedding(tape: Tape, indices: np.ndarray, table: Tensor, name: str = "embedding") -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"Camada '{name}': índice fora da tabela de {table.shape[0]} linhas")
    y = table.data[indices]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, indices, g)
        return [gt]

    return tape.record(name, y, (table,), backward)


def concat(tape: Tape, tensors: Sequence[Tensor], axis: int = -1, name: str = "concat") -> Tensor:
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, sizes, axis=axis)

    return tape.record(name, y, tuple(tensors), backward)


def modulate(tape: Tape, x: Tensor, shift: Tensor, scale: Tensor, name: str = "modulate") -> Tensor:
    """x·(1 + scale) + shift com scale/shift (B, D) difundidos sobre os tokens"""
    if shift.shape != scale.shape or shift.shape[-1] != x.shape[-1] or shift.shape[0] != x.shape[0]:
        raise ShapeError(f"Camada '{name}': modulação {shift.shape} incompatível com {x.shape}")
    view = (x.shape[0],) + (1,) * (x.data.ndim - 2) + (x.shape[-1],)
    sc = scale.data.reshape(view)
    sh = shift.data.reshape(view)
    y = x.data * (1.0 + sc) + sh

    def backward(g):
        axes = tuple(range(1, x.data.ndim - 1))
        return [
            g * (1.0 + sc),
            g.sum(axis=axes).reshape(shift.shape),
            (g * x.data).sum(axis=axes).reshape(scale.shape),
        ]

    return tape.record(name, y, (x, shift, scale), backward)


def add(tape: Tape, a: Tensor, b: Tensor, name: str = "add") -> Tensor:
    y = a.data + b.data

    def backward(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return tape.record(name, y, (a, b), backward)


def reshape(tape: Tape, x: Tensor, shape: tuple[int, ...], name: str = "reshape") -> Tensor:
    y = x.data.reshape(shape)

    def backward(g):
        return [g.reshape(x.shape)]

    return tape.record(name, y, (x,), backward)


def take(tape: Tape, x: Tensor, indices: np.ndarray, name: str = "take") -> Tensor:
    """Seleciona posições no eixo de tokens (eixo 1)"""
    indices = np.asarray(indices, dtype=np.int64)
    y = x.data[:, indices]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), indices), g)
        return [gx]

    return tape.record(name, y, (x,), backward)


# ========== BLOCOS ==========

def mlp_shapes(prefix: str, dims: Sequence[int], zero_last: bool = False) -> dict:
    shapes = {}
    n = len(dims) - 1
    for i in range(n):
        last = i == n - 1
        shapes[f"{prefix}/l{i}/w"] = ((dims[i], dims[i + 1]), "zeros" if last and zero_last else "uniform")
        shapes[f"{prefix}/l{i}/b"] = ((dims[i + 1],), "zeros")
    return shapes


def mlp_apply(tape: Tape, prefix: str, x: Tensor, n_layers: int) -> Tensor:
    h = x
    for i in range(n_layers):
        h = affine(tape, h, tape.param(f"{prefix}/l{i}/w"), tape.param(f"{prefix}/l{i}/b"), name=f"{prefix}/l{i}")
        if i < n_layers - 1:
            h = gelu(tape, h, name=f"{prefix}/l{i}/gelu")
    return h


def block_shapes(prefix: str, width: int, modulated: bool = False, mlp_ratio: int = 4) -> dict:
    """Parâmetros de um bloco transformer pré-LN"""
    shapes = {}
    if not modulated:
        for ln in ("ln1", "ln2"):
            shapes[f"{prefix}/{ln}/g"] = ((width,), "ones")
            shapes[f"{prefix}/{ln}/b"] = ((width,), "zeros")
    for proj in ("wq", "wk", "wv"):
        shapes[f"{prefix}/attn/{proj}"] = ((width, width), "uniform")
    shapes[f"{prefix}/attn/wo"] = ((width, width), "uniform")
    shapes[f"{prefix}/attn/bo"] = ((width,), "zeros")
    shapes.update(mlp_shapes(f"{prefix}/mlp", [width, mlp_ratio * width, width]))
    return shapes


def transformer_block(tape: Tape, prefix: str, h: Tensor, n_heads: int, causal: bool,
                      key_mask: np.ndarray | None = None,
                      mods: tuple[Tensor, Tensor, Tensor, Tensor] | None = None) -> Tensor:
    """Bloco pré-LN; com `mods` = (shift1, scale1, shift2, scale2) aplica modulação estilo DiT"""
    if mods is None:
        a = layer_norm(tape, h, tape.param(f"{prefix}/ln1/g"), tape.param(f"{prefix}/ln1/b"), name=f"{prefix}/ln1")
    else:
        a = modulate(tape, layer_norm(tape, h, name=f"{prefix}/ln1"), mods[0], mods[1], name=f"{prefix}/mod1")
    q = affine(tape, a, tape.param(f"{prefix}/attn/wq"), name=f"{prefix}/attn/q")
    k = affine(tape, a, tape.param(f"{prefix}/attn/wk"), name=f"{prefix}/attn/k")
    v = affine(tape, a, tape.param(f"{prefix}/attn/wv"), name=f"{prefix}/attn/v")
    a = attention(tape, q, k, v, n_heads, causal=causal, key_mask=key_mask, name=f"{prefix}/attn")
    a = affine(tape, a, tape.param(f"{prefix}/attn/wo"), tape.param(f"{prefix}/attn/bo"), name=f"{prefix}/attn/out")
    h = add(tape, h, a, name=f"{prefix}/res1")

    if mods is None:
        m = layer_norm(tape, h, tape.param(f"{prefix}/ln2/g"), tape.param(f"{prefix}/ln2/b"), name=f"{prefix}/ln2")
    else:
        m = modulate(tape, layer_norm(tape, h, name=f"{prefix}/ln2"), mods[2], mods[3], name=f"{prefix}/mod2")
    m = mlp_apply(tape, f"{prefix}/mlp", m, 2)
    return add(tape, h, m, name=f"{prefix}/res2")


# ========== REDES ==========

class GraphSpec(Protocol):
    """Descrição de rede: entradas declaradas, parâmetros e construção"""

    input_dims: Mapping[str, int | None]

    def param_shapes(self) -> dict: ...

    def build(self, tape: Tape, inputs: Mapping[str, object]) -> Tensor: ...

    def example_inputs(self, rng: np.random.Generator) -> dict: ...


@dataclass(frozen=True)
class MLPSpec:
    """MLP com GELU entre camadas afins"""

    prefix: str
    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    zero_last: bool = False

    @property
    def input_dims(self) -> dict:
        return {"x": self.in_dim}

    @property
    def dims(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.out_dim]

    def param_shapes(self) -> dict:
        return mlp_shapes(self.prefix, self.dims, self.zero_last)

    def build(self, tape: Tape, inputs: Mapping[str, object]) -> Tensor:
        return mlp_apply(tape, self.prefix, inputs["x"], len(self.dims) - 1)

    def example_inputs(self, rng: np.random.Generator) -> dict:
        return {"x": rng.standard_normal((3, self.in_dim))}


def init_params(spec: GraphSpec, seed: int) -> ParamSet:
    return ParamSet.initialize(spec.param_shapes(), seed)


def net_forward(params: ParamSet, inputs, graph_spec: GraphSpec) -> tuple[Tensor, Tape]:
    """Executa a rede registrando cada primitiva na fita"""
    if isinstance(inputs, np.ndarray):
        inputs = {"x": inputs}
    tape = Tape(params)
    wrapped: dict[str, object] = {}
    for key, dim in graph_spec.input_dims.items():
        if key not in inputs:
            raise ShapeError(f"Camada 'input:{key}': entrada ausente")
        value = np.asarray(inputs[key])
        if dim is None:
            wrapped[key] = value
            continue
        if value.ndim == 0 or value.shape[-1] != dim:
            raise ShapeError(f"Camada 'input:{key}': formato {value.shape}, última dimensão esperada {dim}")
        tensor = tape.constant(value, name=f"input:{key}")
        tape.inputs[key] = tensor
        wrapped[key] = tensor
    out = graph_spec.build(tape, wrapped)
    tape.output = out
    return out, tape


def softmax_cross_entropy(probs: Tensor, onehot: np.ndarray) -> tuple[float, np.ndarray]:
    """Perda −Σ y·log p e gradiente em relação às probabilidades"""
    p = probs.data
    loss = float(-(onehot * np.log(p)).sum())
    return loss, -onehot / p


def mse_loss(pred: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Erro quadrático médio (ponderado) e gradiente em relação à predição"""
    diff = pred - target
    if weights is None:
        weights = np.ones_like(diff)
    norm = weights.sum()
    if norm <= 0:
        return 0.0, np.zeros_like(diff)
    return float((weights * diff * diff).sum() / norm), 2.0 * weights * diff / norm


# ========== OTIMIZADOR ==========

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float = 3e-4, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        for path, tensor in params.items():
            state.m[path] = np.zeros_like(tensor.data)
            state.v[path] = np.zeros_like(tensor.data)
        return state


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: AdamState) -> tuple[ParamSet, AdamState]:
    """Atualização Adam com correção de viés, elemento a elemento"""
    missing = [path for path in params if path not in grads]
    if missing:
        raise KeyError(f"Gradiente ausente para: {', '.join(missing)}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for path, tensor in params.items():
        g = grads[path]
        if g.shape != tensor.shape:
            raise ShapeError(f"Gradiente de {path} com formato {g.shape}, esperado {tensor.shape}")
        m = state.m.setdefault(path, np.zeros_like(tensor.data))
        v = state.v.setdefault(path, np.zeros_like(tensor.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ========== VERIFICAÇÃO DE GRADIENTE ==========

def grad_check(graph_spec: GraphSpec, seed: int, eps: float = 1e-5) -> float:
    """Maior erro relativo entre gradiente analítico e diferenças centrais"""
    params = init_params(graph_spec, seed)
    rng = np.random.default_rng(seed)
    inputs = graph_spec.example_inputs(rng)
    out, tape = net_forward(params, inputs, graph_spec)
    cotangent = rng.standard_normal(out.shape)
    analytic = backprop(tape, cotangent)

    def loss() -> float:
        y, _ = net_forward(params, inputs, graph_spec)
        return float((y.data * cotangent).sum())

    worst = 0.0
    for path, tensor in params.items():
        flat = tensor.data.reshape(-1)
        grad = analytic[path].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = loss()
            flat[i] = orig - eps
            minus = loss()
            flat[i] = orig
            numeric = (plus - minus) / (2.0 * eps)
            err = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    logger.debug("grad_check seed=%d: erro relativo máximo %.3e", seed, worst)
    return worst


# ========== CHECKPOINTS ==========

def save_checkpoint(path: Path, params: ParamSet, header: Mapping | None = None) -> None:
    """Grava parâmetros no formato BGCKPT1"""
    buf = bytearray(CHECKPOINT_MAGIC)
    hb = json.dumps(dict(header or {}), sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(hb)) + hb
    buf += struct.pack("<I", len(params))
    for name, tensor in params.items():
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", tensor.data.ndim)
        buf += struct.pack(f"<{tensor.data.ndim}I", *tensor.shape)
        buf += tensor.data.astype("<f8").tobytes()
    atomic_write_bytes(Path(path), bytes(buf))


def load_checkpoint(path: Path) -> tuple[ParamSet, dict]:
    """Lê um checkpoint BGCKPT1; erro com o offset em caso de corrupção"""
    raw = Path(path).read_bytes()
    offset = 0

    def read(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise CheckpointFormatError(f"Checkpoint truncado no offset {offset}")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    if read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("Magic inválido no offset 0")
    (hlen,) = struct.unpack("<I", read(4))
    header = json.loads(read(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", read(4))
    params = ParamSet()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", read(4))
        name = read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{rank}I", read(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        params.add(name, data)
    if offset != len(raw):
        raise CheckpointFormatError(f"Bytes excedentes a partir do offset {offset}")
    return params, header
