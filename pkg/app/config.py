"""
Configuração do pipeline de ramos de trajetória: paths, leitura do YAML,
hash de configuração, sementes por estágio e logging.
"""
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml
from dotenv import load_dotenv

# Adiciona o diretório app ao path
APP_DIR = Path(__file__).parent
sys.path.insert(0, str(APP_DIR))

from components.branch import FilterConfig  # noqa: E402
from components.diffusion import DiffusionConfig  # noqa: E402
from components.dt import DTConfig  # noqa: E402
from components.env_pointmaze import STITCH_MAZE_LAYOUT  # noqa: E402
from components.tvf import TVFConfig, default_tau  # noqa: E402

load_dotenv()

# Paths importantes
DEFAULT_SETTINGS = APP_DIR / "settings.yaml"
SMOKE_SETTINGS = APP_DIR / "smoke.yaml"
ACCEPTANCE_SETTINGS = APP_DIR / "acceptance.yaml"
OUT_DIR = Path(os.environ.get("BG_OUT_DIR", "runs/default"))
LOG_LEVEL = os.environ.get("BG_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ConfigError(ValueError):
    """Configuração inválida ou com chaves desconhecidas"""


@dataclass(frozen=True)
class MazeConfig:
    layout: str = STITCH_MAZE_LAYOUT
    cell_size: float = 1.0
    reward_mode: str = "sparse"
    max_steps: int = 300
    dt: float = 0.1
    vmax: float = 1.0
    goal_radius_cells: float = 0.5


@dataclass(frozen=True)
class DataConfig:
    count_a: int = 30
    count_b: int = 30
    noise_scale: float = 0.2


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 50
    reference_episodes: int = 100
    expert_episodes: int = 10

    def __post_init__(self):
        if self.episodes < 1 or self.reference_episodes < 1 or self.expert_episodes < 1:
            raise ValueError("Número de episódios deve ser ≥ 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    disable_progress: bool = False
    maze: MazeConfig = field(default_factory=MazeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tvf: TVFConfig = field(default_factory=TVFConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    dt: DTConfig = field(default_factory=DTConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def gamma(self) -> float:
        return self.tvf.gamma

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {
    "maze": MazeConfig,
    "data": DataConfig,
    "tvf": TVFConfig,
    "diffusion": DiffusionConfig,
    "filter": FilterConfig,
    "dt": DTConfig,
    "eval": EvalConfig,
}
SCALARS = ("seed", "disable_progress")


def _section(name: str, cls, values) -> object:
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"Seção '{name}' deve ser um mapeamento")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"Chave desconhecida: {name}.{key}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Seção '{name}' inválida: {e}") from e


def config_from_dict(raw: dict) -> RunConfig:
    """Monta o RunConfig validando chaves e invariantes entre módulos"""
    raw = dict(raw or {})
    for key in raw:
        if key not in SECTIONS and key not in SCALARS:
            raise ConfigError(f"Chave desconhecida: {key}")
    sections = {name: _section(name, cls, raw.get(name)) for name, cls in SECTIONS.items()}
    filter_raw = raw.get("filter") or {}
    if "gamma" in filter_raw and filter_raw["gamma"] != sections["tvf"].gamma:
        raise ConfigError("filter.gamma deve coincidir com tvf.gamma")
    if "tau" not in (raw.get("tvf") or {}):
        try:
            tau = default_tau(sections["maze"].reward_mode)
        except ValueError as e:
            raise ConfigError(f"Seção 'maze' inválida: {e}") from e
        sections["tvf"] = dataclasses.replace(sections["tvf"], tau=tau)
    if sections["filter"].gamma != sections["tvf"].gamma:
        sections["filter"] = dataclasses.replace(sections["filter"], gamma=sections["tvf"].gamma)
    scalars = {key: raw[key] for key in SCALARS if key in raw}
    if not isinstance(scalars.get("seed", 0), int):
        raise ConfigError("seed deve ser inteiro")
    return RunConfig(**scalars, **sections)


def load_config(path: Path) -> RunConfig:
    """Lê o YAML de execução"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Arquivo de configuração não encontrado: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"YAML inválido em {path}: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path} deve conter um mapeamento no topo")
    return config_from_dict(raw or {})


def config_hash(config: RunConfig) -> str:
    """sha256 do JSON canônico da configuração"""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def stage_seed(master_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{stage}:{master_seed}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def setup_logging(level: str | int = LOG_LEVEL) -> None:
    """Um único handler de stream com o formato padrão do projeto"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level if isinstance(level, int) else level.upper())
