"""
Figuras do pipeline: curvas de perda (plotly) e o mapa SVG de ramos
(paredes, trajetórias do dataset, ramos aceitos e objetivo).
"""
from pathlib import Path

import numpy as np
import pandas as pd
import plotly.express as px
from jinja2 import Template

from components.artifact_store import atomic_write_text

PX_PER_UNIT = 48
TRAJ_CHUNKS = 8
TRAJ_LIGHT = np.array([198, 219, 239])
TRAJ_DARK = np.array([8, 48, 107])
BRANCH_COLOR = "#d62728"
CONDITION_COLOR = "#ff7f0e"

SVG_TEMPLATE = """<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{{ width }}" height="{{ height }}" viewBox="0 0 {{ width }} {{ height }}">
  <title>{{ title }}</title>
  <rect x="0" y="0" width="{{ width }}" height="{{ height }}" fill="#ffffff"/>
  <g class="walls" fill="#444444">
  {% for w in walls %}
    <rect x="{{ w.x }}" y="{{ w.y }}" width="{{ cell }}" height="{{ cell }}"/>
  {% endfor %}
  </g>
  <g class="dataset" fill="none" stroke-width="1.2" stroke-opacity="0.8">
  {% for seg in segments %}
    <polyline class="trajectory" points="{{ seg.points }}" stroke="{{ seg.color }}"/>
  {% endfor %}
  </g>
  <g class="branches" fill="none">
  {% for b in branches %}
    <polyline class="condition" points="{{ b.condition }}" stroke="{{ condition_color }}" stroke-width="3"/>
    <polyline class="branch" data-n="{{ b.n }}" data-t="{{ b.t }}" points="{{ b.points }}" stroke="{{ branch_color }}" stroke-width="2"/>
  {% endfor %}
  </g>
  <circle class="goal" cx="{{ goal.x }}" cy="{{ goal.y }}" r="{{ goal.r }}" fill="#2ca02c" fill-opacity="0.6"/>
</svg>
"""


def line_over_time(df, time_col, value_col, color=None, title=None):
    """Gráfico de linha temporal"""
    fig = px.line(
        df,
        x=time_col,
        y=value_col,
        color=color,
        title=title or f"{value_col} ao longo do treino",
    )

    fig.update_layout(
        template="plotly_dark",
        hovermode='x unified',
        showlegend=True
    )

    return fig


def loss_curves(history: pd.DataFrame, stage: str, window: int = 50):
    """Perdas de um estágio em formato longo, suavizadas por média móvel"""
    value_cols = [c for c in history.columns if c != "step"]
    smooth = history[value_cols].rolling(window, min_periods=1).mean()
    smooth["step"] = history["step"]
    long = smooth.melt(id_vars="step", var_name="perda", value_name="valor")
    return line_over_time(long, "step", "valor", color="perda", title=f"Perdas: {stage}")


def _points(xy: np.ndarray) -> str:
    scaled = np.asarray(xy, dtype=np.float64) * PX_PER_UNIT
    return " ".join(f"{x:.2f},{y:.2f}" for x, y in scaled)


def _shade(frac: float) -> str:
    rgb = np.rint(TRAJ_LIGHT + frac * (TRAJ_DARK - TRAJ_LIGHT)).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def trajectory_segments(positions: np.ndarray, chunks: int = TRAJ_CHUNKS) -> list[dict]:
    """Quebra a trajetória em trechos com cor do claro ao escuro no sentido do tempo"""
    T = len(positions)
    if T < 2:
        return []
    bounds = np.linspace(0, T - 1, min(chunks, T - 1) + 1).round().astype(int)
    segments = []
    for k, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        if b <= a:
            continue
        frac = k / max(len(bounds) - 2, 1)
        segments.append({"points": _points(positions[a:b + 1]), "color": _shade(frac)})
    return segments


def render_branch_svg(walls: np.ndarray, cell_size: float, goal, goal_radius: float,
                      trajectories: list[np.ndarray], branches: list[dict],
                      title: str = "Ramos de trajetória") -> str:
    """`branches`: dicts com n, t, condition (K×2) e positions (H×2)"""
    rows, cols = walls.shape
    cell = cell_size * PX_PER_UNIT
    wall_rects = [{"x": c * cell, "y": r * cell} for r, c in zip(*np.nonzero(walls))]
    segments = [seg for pos in trajectories for seg in trajectory_segments(pos)]
    overlay = [
        {"n": b["n"], "t": b["t"], "condition": _points(b["condition"]), "points": _points(b["positions"])}
        for b in branches
    ]
    return Template(SVG_TEMPLATE).render(
        width=cols * cell, height=rows * cell, cell=cell, title=title,
        walls=wall_rects, segments=segments, branches=overlay,
        branch_color=BRANCH_COLOR, condition_color=CONDITION_COLOR,
        goal={"x": goal[0] * PX_PER_UNIT, "y": goal[1] * PX_PER_UNIT, "r": goal_radius * PX_PER_UNIT},
    )


def save_svg(svg: str, out_path: Path) -> Path:
    return atomic_write_text(Path(out_path), svg)
