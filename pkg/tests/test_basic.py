"""
Testes básicos: imports, configurações e artefatos auxiliares
"""

import sys
from pathlib import Path

import numpy as np
import pandas as pd

# Adiciona o diretório app ao path
sys.path.insert(0, str(Path(__file__).parent.parent / 'app'))


def test_imports():
    """Todos os módulos podem ser importados"""
    from components.artifact_store import write_jsonl
    from components.branch import expand_dataset
    from components.dataset import Dataset
    from components.diffusion import DenoiserModel
    from components.dt import DTPolicy
    from components.env_pointmaze import stitch_maze_spec
    from components.neural_core import Tape
    from components.pipeline import run_stage
    from components.reports import render_html_report
    from components.tvf import ValueHeads
    from components.visual_blocks import line_over_time

    assert all([write_jsonl, expand_dataset, Dataset, DenoiserModel, DTPolicy, stitch_maze_spec, Tape,
                run_stage, render_html_report, ValueHeads, line_over_time])


def test_shipped_configs_are_valid():
    """settings.yaml, smoke.yaml e acceptance.yaml passam pela validação"""
    from config import ACCEPTANCE_SETTINGS, DEFAULT_SETTINGS, SMOKE_SETTINGS, load_config

    full = load_config(DEFAULT_SETTINGS)
    smoke = load_config(SMOKE_SETTINGS)
    acceptance = load_config(ACCEPTANCE_SETTINGS)
    assert full.maze.layout.strip() == smoke.maze.layout.strip()
    assert smoke.diffusion.steps == smoke.tvf.steps == smoke.dt.steps == 200
    assert acceptance.maze == full.maze and acceptance.data == full.data
    assert acceptance.diffusion.K == acceptance.diffusion.H == 10
    assert acceptance.diffusion.n_sigma == 10


def test_atomic_writes_leave_no_temp_files(tmp_path):
    """Gravação atômica de registros JSON por linha"""
    from components.artifact_store import read_jsonl, write_jsonl

    path = write_jsonl(tmp_path / "log.jsonl", [{"b": 1, "a": 2.5}, {"ok": True}])
    assert read_jsonl(path) == [{"a": 2.5, "b": 1}, {"ok": True}]
    assert path.read_text(encoding="utf-8").splitlines()[0] == '{"a":2.5,"b":1}'
    assert [p.name for p in tmp_path.iterdir()] == ["log.jsonl"]


def test_loss_curves_figure():
    """Curvas de perda suavizadas viram uma figura plotly"""
    from components.visual_blocks import loss_curves

    history = pd.DataFrame({"step": np.arange(20), "loss_v": np.linspace(1, 0, 20), "loss_q": np.ones(20)})
    fig = loss_curves(history, "train-tvf", window=5)
    assert fig is not None
    assert {trace.name for trace in fig.data} == {"loss_v", "loss_q"}


def test_html_report(tmp_path):
    """Relatório HTML com tabela pandas"""
    from components.reports import render_html_report

    df = pd.DataFrame({"método": ["BG+DT"], "score": [50.0]})
    html = render_html_report("Teste", "runs/x", "resumo", "abc", "v0", tables=[{"title": "T", "df": df}],
                              out_html=tmp_path / "r.html")
    assert "BG+DT" in html
    assert (tmp_path / "r.html").exists()
