"""
Orquestração dos estágios: coleta → TVF → difusão → ramos → expansão →
DT → avaliação, com manifesto, sementes por estágio e artefatos atômicos.
"""
from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from config import RunConfig, config_hash, stage_seed
from components import dataset as dataset_io
from components.artifact_store import atomic_write_text, hash_file, read_json, read_jsonl, write_json, write_jsonl
from components.branch import BranchCandidate, calibrate_delta, expand_dataset, filter_candidates, generate_branches
from components.dataset import Dataset, DatasetFormatError
from components.diffusion import DenoiserModel, train_diffusion
from components.dt import DTPolicy, evaluate, target_rtg, train_dt
from components.env_pointmaze import MazeSpec, collect_dataset, parse_layout, reference_returns, stitch_maze_routes
from components.reports import render_html_report
from components.tvf import ValueHeads, train_tvf
from components.visual_blocks import loss_curves, render_branch_svg, save_svg

logger = logging.getLogger(__name__)

VERSION = "v0.1.0"
MANIFEST = "manifest.json"
FIGURE = "branches.svg"
STAGES = ("collect", "train-tvf", "train-diffusion", "gen-branches", "expand", "train-dt", "eval")
BASELINE_STAGES = ("train-dt-baseline", "eval-baseline")

ARTIFACTS = {
    "collect": {"dataset": "dataset.bgd"},
    "train-tvf": {"tvf": "tvf.ckpt", "losses": "losses_train-tvf.csv"},
    "train-diffusion": {"diffusion": "diffusion.ckpt", "losses": "losses_train-diffusion.csv"},
    "gen-branches": {"candidates": "candidates.jsonl", "filter": "filter.json"},
    "expand": {"dataset": "dataset_expanded.bgd"},
    "train-dt": {"dt": "dt.ckpt", "losses": "losses_train-dt.csv"},
    "eval": {"eval": "eval.jsonl"},
    "train-dt-baseline": {"dt": "dt_baseline.ckpt", "losses": "losses_train-dt-baseline.csv"},
    "eval-baseline": {"eval": "eval_baseline.jsonl"},
}

REQUIRES = {
    "collect": (),
    "train-tvf": ("collect",),
    "train-diffusion": ("collect",),
    "gen-branches": ("train-tvf", "train-diffusion"),
    "expand": ("gen-branches",),
    "train-dt": ("expand",),
    "eval": ("train-dt",),
    "train-dt-baseline": ("collect",),
    "eval-baseline": ("train-dt-baseline",),
}


class PipelineError(RuntimeError):
    """Falha de orquestração do pipeline"""


class MissingStageError(PipelineError):
    def __init__(self, stage: str):
        super().__init__(f"Estágio '{stage}' ainda não executado (artefatos ausentes)")
        self.stage = stage


class ConfigMismatchError(PipelineError):
    """Artefatos existentes foram gerados com outra configuração"""


@dataclass
class Run:
    """Estado de uma execução; `override_stage` limita a semente substituta a um estágio"""

    config: RunConfig
    out_dir: Path
    seed_override: int | None = None
    override_stage: str | None = None
    stage: str | None = None

    @property
    def master_seed(self) -> int:
        if self.seed_override is None or self.override_stage is not None:
            return self.config.seed
        return self.seed_override

    @property
    def overridden(self) -> bool:
        return self.seed_override is not None and self.stage is not None and self.stage == self.override_stage

    @property
    def progress(self) -> bool:
        return not self.config.disable_progress and sys.stderr.isatty()

    def seed(self, name: str) -> int:
        return stage_seed(self.seed_override if self.overridden else self.master_seed, name)

    def rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng(self.seed(stage))

    def path(self, stage: str, key: str) -> Path:
        return self.out_dir / ARTIFACTS[stage][key]


def maze_spec(config: RunConfig) -> MazeSpec:
    m = config.maze
    return parse_layout(m.layout, cell_size=m.cell_size, reward_mode=m.reward_mode, max_steps=m.max_steps,
                        dt=m.dt, vmax=m.vmax, goal_radius_cells=m.goal_radius_cells)


def _routes(config: RunConfig, spec: MazeSpec):
    return stitch_maze_routes(spec, config.data.count_a, config.data.count_b, config.data.noise_scale)


def _save_losses(path: Path, history: list[dict]) -> None:
    atomic_write_text(path, pd.DataFrame(history).to_csv(index=False))


# ========== MANIFESTO ==========

def load_manifest(out_dir: Path) -> dict | None:
    path = Path(out_dir) / MANIFEST
    if not path.exists():
        return None
    try:
        return read_json(path)
    except json.JSONDecodeError as e:
        raise PipelineError(f"Manifesto ilegível em {path}: {e}") from e


def _open_manifest(run: Run) -> dict:
    digest = config_hash(run.config)
    manifest = load_manifest(run.out_dir)
    if manifest is None:
        return {"version": VERSION, "config_hash": digest, "master_seed": run.master_seed, "stages": {}}
    if manifest.get("config_hash") != digest:
        raise ConfigMismatchError(
            f"Config hash {digest[:12]} difere do manifesto em {run.out_dir} "
            f"({str(manifest.get('config_hash'))[:12]}); use outro --out-dir"
        )
    if manifest.get("master_seed") != run.master_seed:
        raise ConfigMismatchError(
            f"Semente mestre {run.master_seed} difere da registrada ({manifest.get('master_seed')})"
        )
    return manifest


def _require(run: Run, manifest: dict, stage: str) -> None:
    for upstream in REQUIRES[stage]:
        entry = manifest["stages"].get(upstream)
        if entry is None or any(not (run.out_dir / name).exists() for name in ARTIFACTS[upstream].values()):
            raise MissingStageError(upstream)


# ========== ESTÁGIOS ==========

def _collect(run: Run) -> dict:
    spec = maze_spec(run.config)
    routes, _ = _routes(run.config, spec)
    data = collect_dataset(spec, routes, run.seed("collect"), run.config.gamma)
    dataset_io.save(data, run.path("collect", "dataset"))
    return {"trajectories": len(data), "steps": int(sum(t.T for t in data))}


def _train_tvf(run: Run) -> dict:
    data = dataset_io.load(run.path("collect", "dataset"))
    seed = run.seed("train-tvf")
    heads = ValueHeads(data.ds, data.da, data.norm, run.config.tvf, seed=seed)
    history = train_tvf(heads, data, run.config.tvf.steps, np.random.default_rng(seed), run.progress)
    heads.save(run.path("train-tvf", "tvf"))
    _save_losses(run.path("train-tvf", "losses"), history)
    return {"steps": len(history)}


def _train_diffusion(run: Run) -> dict:
    data = dataset_io.load(run.path("collect", "dataset"))
    seed = run.seed("train-diffusion")
    model = DenoiserModel(data.ds + data.da + 1, run.config.diffusion, seed=seed)
    history = train_diffusion(model, data, run.config.diffusion.steps, np.random.default_rng(seed), run.progress)
    model.save(run.path("train-diffusion", "diffusion"))
    _save_losses(run.path("train-diffusion", "losses"), history)
    return {"steps": len(history)}


def _gen_branches(run: Run) -> dict:
    data = dataset_io.load(run.path("collect", "dataset"))
    heads = ValueHeads.load(run.path("train-tvf", "tvf"), data.norm)
    model = DenoiserModel.load(run.path("train-diffusion", "diffusion"))
    settings = run.config.filter
    count = max(1, int(round(settings.budget_fraction * len(data))))
    candidates = generate_branches(data, heads, model, count, run.rng("gen-branches"), progress=run.progress)
    if settings.calibrate:
        delta, _ = calibrate_delta(data, heads, settings, model.config.K, model.config.H,
                                   run.rng("calibrate"))
        settings = replace(settings, delta=delta)
    judged = filter_candidates(candidates, heads, settings)
    accepted = sum(c.accepted for c in judged)
    write_jsonl(run.path("gen-branches", "candidates"), [c.to_record() for c in judged])
    write_json(run.path("gen-branches", "filter"), {
        "delta": settings.delta, "percentile": settings.percentile, "enabled": settings.enabled,
        "calibrated": settings.calibrate, "attempted": len(judged), "accepted": accepted,
    })
    return {"attempted": len(judged), "accepted": accepted, "delta": settings.delta}


def _expand(run: Run) -> dict:
    data = dataset_io.load(run.path("collect", "dataset"))
    heads = ValueHeads.load(run.path("train-tvf", "tvf"), data.norm)
    records = read_jsonl(run.path("gen-branches", "candidates"))
    accepted = [BranchCandidate.from_record(r, data) for r in records if r["accepted"]]
    expanded = expand_dataset(data, accepted, heads)
    dataset_io.save(expanded, run.path("expand", "dataset"))
    return {"trajectories": len(expanded), "added": len(accepted)}


def _training_dataset(run: Run, baseline: bool) -> Dataset:
    if baseline:
        return dataset_io.load(run.path("collect", "dataset"))
    return dataset_io.load(run.path("expand", "dataset"))


def _train_dt(run: Run, baseline: bool = False) -> dict:
    stage = "train-dt-baseline" if baseline else "train-dt"
    data = _training_dataset(run, baseline)
    seed = run.seed("train-dt")
    policy = DTPolicy.for_dataset(data, run.config.dt, seed=seed)
    history = train_dt(policy, data, run.config.dt.steps, np.random.default_rng(seed), run.progress)
    policy.save(run.path(stage, "dt"))
    _save_losses(run.path(stage, "losses"), history)
    return {"steps": len(history), "dataset_trajectories": len(data)}


def _eval(run: Run, baseline: bool = False) -> dict:
    stage = "eval-baseline" if baseline else "eval"
    data = _training_dataset(run, baseline)
    policy = DTPolicy.load(run.path("train-dt-baseline" if baseline else "train-dt", "dt"))
    spec = maze_spec(run.config)
    _, expert = _routes(run.config, spec)
    cfg = run.config.eval
    references = reference_returns(spec, expert, cfg.reference_episodes, run.seed("references"),
                                   cfg.expert_episodes)
    target = target_rtg(data, run.config.dt.target_rtg_factor)
    report = evaluate(policy, spec, target, cfg.episodes, run.seed("eval"), references)
    records = report.records()
    records[-1]["target_rtg"] = target
    records[-1]["eval_seed"] = run.seed("eval")
    write_jsonl(run.path(stage, "eval"), records)
    return {
        "normalized_score": report.normalized_score, "success_rate": report.success_rate,
        "mean_return": report.mean_return, "target_rtg": target,
    }


STAGE_FUNCS = {
    "collect": _collect,
    "train-tvf": _train_tvf,
    "train-diffusion": _train_diffusion,
    "gen-branches": _gen_branches,
    "expand": _expand,
    "train-dt": _train_dt,
    "eval": _eval,
    "train-dt-baseline": lambda run: _train_dt(run, baseline=True),
    "eval-baseline": lambda run: _eval(run, baseline=True),
}


def _run_single(run: Run, stage: str) -> dict:
    manifest = _open_manifest(run)
    _require(run, manifest, stage)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    run.stage = stage
    if run.overridden:
        logger.info("Estágio %s (semente substituta %d)", stage, run.seed_override)
    else:
        logger.info("Estágio %s (semente mestre %d)", stage, run.master_seed)
    started = time.perf_counter()
    extra = STAGE_FUNCS[stage](run)
    entry = {
        "artifacts": dict(ARTIFACTS[stage]),
        "hashes": {key: hash_file(run.out_dir / name) for key, name in ARTIFACTS[stage].items()},
        "seconds": round(time.perf_counter() - started, 3),
        "seed": run.seed(stage.removesuffix("-baseline")),
        **extra,
    }
    if run.overridden:
        entry["seed_override"] = run.seed_override
    manifest["stages"][stage] = entry
    write_json(run.out_dir / MANIFEST, manifest)
    return {stage: entry}


def run_stage(config: RunConfig, stage: str, out_dir: Path, seed_override: int | None = None,
              baseline: bool = False) -> dict:
    """Executa um estágio (ou a cadeia 'all') e devolve o delta do manifesto.

    Com 'all', `seed_override` substitui a semente mestre da execução inteira.
    Com um único estágio, vale só para ele: o manifesto mantém a semente
    mestre e o estágio pode ser refeito num diretório existente.
    """
    if stage == "all":
        chain = list(STAGES) + (list(BASELINE_STAGES) if baseline else [])
    elif stage not in STAGES:
        raise PipelineError(f"Estágio desconhecido: {stage}")
    elif baseline:
        if stage not in ("train-dt", "eval"):
            raise PipelineError("--baseline só se aplica a train-dt, eval e all")
        chain = [f"{stage}-baseline"]
    else:
        chain = [stage]
    run = Run(config, Path(out_dir), seed_override, override_stage=None if stage == "all" else chain[0])
    delta = {}
    for name in chain:
        delta.update(_run_single(run, name))
    return delta


# ========== FIGURA E RELATÓRIO ==========

def plot_branches(dataset_path: Path, candidate_log_path: Path, out_path: Path, spec: MazeSpec) -> Path:
    """SVG com paredes, trajetórias coletadas, ramos aceitos (condição destacada) e objetivo"""
    try:
        data = dataset_io.load(dataset_path)
        records = read_jsonl(candidate_log_path)
        accepted = [BranchCandidate.from_record(r, data) for r in records if r["accepted"]]
    except (OSError, DatasetFormatError, json.JSONDecodeError, KeyError) as e:
        raise PipelineError(f"Artefato ilegível para a figura: {e}") from e
    trajectories = [t.states[:, :2] for t in data if t.provenance == "collected"]
    branches = [
        {"n": c.n, "t": c.t, "condition": c.cond_states[:, :2], "positions": c.states[:, :2]}
        for c in accepted
    ]
    svg = render_branch_svg(spec.walls, spec.cell_size, spec.goal, spec.goal_radius, trajectories, branches)
    logger.info("Figura com %d ramos salva em %s", len(branches), out_path)
    return save_svg(svg, out_path)


def _eval_summary(out_dir: Path, name: str) -> dict:
    return read_jsonl(Path(out_dir) / name)[-1]


def report(out_dir: Path) -> str:
    """Resumo pareado BG+DT vs DT-baseline; grava também report.html"""
    out_dir = Path(out_dir)
    manifest = load_manifest(out_dir)
    if manifest is None:
        raise PipelineError(f"Manifesto ausente em {out_dir}")
    stages = manifest["stages"]
    if "eval" not in stages or not (out_dir / ARTIFACTS["eval"]["eval"]).exists():
        raise MissingStageError("eval")
    if "gen-branches" not in stages:
        raise MissingStageError("gen-branches")

    rows = [("BG+DT", _eval_summary(out_dir, ARTIFACTS["eval"]["eval"]))]
    if "eval-baseline" in stages:
        rows.append(("DT-baseline", _eval_summary(out_dir, ARTIFACTS["eval-baseline"]["eval"])))
    records = read_jsonl(out_dir / ARTIFACTS["gen-branches"]["candidates"])
    attempted = len(records)
    accepted = sum(1 for r in records if r["accepted"])
    rate = accepted / attempted if attempted else 0.0
    delta = read_json(out_dir / ARTIFACTS["gen-branches"]["filter"])["delta"]

    lines = [f"Execução {out_dir} (config {manifest['config_hash'][:12]}, semente mestre {manifest['master_seed']})"]
    for label, s in rows:
        lines.append(
            f"{label:<12} score={s['normalized_score']:.2f} sucesso={100 * s['success_rate']:.1f}% "
            f"retorno={s['mean_return']:.3f} alvo_rtg={s['target_rtg']:.3f} seed={s['eval_seed']}"
        )
    lines.append(f"Ramos aceitos: {accepted}/{attempted} (taxa={rate:.4f})")
    lines.append(f"δ do filtro: {delta:.6g}")
    text = "\n".join(lines)

    table = pd.DataFrame([
        {"método": label, "score normalizado": round(s["normalized_score"], 2),
         "sucesso (%)": round(100 * s["success_rate"], 1), "retorno médio": round(s["mean_return"], 3),
         "episódios": s["episodes"], "seed": s["eval_seed"]}
        for label, s in rows
    ])
    figures = [
        loss_curves(pd.read_csv(out_dir / ARTIFACTS[stage]["losses"]), stage)
        for stage in ("train-tvf", "train-diffusion", "train-dt", "train-dt-baseline")
        if stage in stages and (out_dir / ARTIFACTS[stage]["losses"]).exists()
    ]
    render_html_report(
        title="Ramos de trajetória: relatório da execução",
        run=str(out_dir),
        summary=text,
        config_hash=manifest["config_hash"],
        version=manifest.get("version", VERSION),
        metrics=[
            {"label": "Taxa de aceitação", "value": f"{100 * rate:.1f}%"},
            {"label": "δ do filtro", "value": f"{delta:.4g}"},
        ],
        tables=[{"title": "Scores pareados", "df": table}],
        figures=figures,
        protocol=[
            "RTG alvo = maior rótulo RTG do dataset de treino (expandido quando aplicável)",
            "RTG decrementado pela recompensa observada a cada passo",
            "Referências: política uniforme aleatória e rota especialista roteirizada",
        ],
        out_html=out_dir / "report.html",
    )
    return text
