#!/usr/bin/env python3
"""
📈 Figures à partir de plot_data.json
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import matplotlib as mpl
mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .autodiff import TGFError

logger = logging.getLogger(__name__)

PLOT_DATA = "plot_data.json"
DPI = 150


class PlotDataError(TGFError):
    pass


def load_plot_data(run_dir: Union[str, Path]) -> Dict[str, Any]:
    path = Path(run_dir) / PLOT_DATA
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise PlotDataError(f"Lecture impossible de {path}: {e}") from e


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    logger.info(f"🖼️ Figure écrite: {path}")
    return path


def plot_gate_bars(data: Dict[str, Any], path: Path) -> Path:
    """Une barre par porte : poids w, ouvertes en bleu, fermées en gris"""
    gates = data["gates"]
    fig, axes = plt.subplots(len(gates), 1, figsize=(8, 2.5 * len(gates)), squeeze=False)
    for ax, (name, gate) in zip(axes[:, 0], gates.items()):
        colors = ["tab:blue" if m else "tab:gray" for m in gate["mask"]]
        ax.bar(range(len(gate["weights"])), gate["weights"], color=colors)
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_title(f"{name} ({sum(gate['mask'])}/{len(gate['mask'])} actives)")
        ax.set_xlabel("index")
        ax.set_ylabel("w")
    fig.tight_layout()
    return _save(fig, path)


def plot_curves(data: Dict[str, Any], path: Path) -> Path:
    curves = data["curves"]
    fig, (ax_loss, ax_ratio) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax_loss.plot(curves["iteration"], curves["task_loss"], label="task")
    ax_loss.plot(curves["iteration"], curves["reg_loss"], label="reg")
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("iteration")
    ax_loss.legend()
    ax_ratio.plot(curves["iteration"], curves["cost_ratio"], color="tab:orange")
    if data.get("target") is not None:
        ax_ratio.axhline(data["target"], linestyle="--", color="black", linewidth=0.8)
    ax_ratio.set_xlabel("iteration")
    ax_ratio.set_ylabel("C(w) / C_tot")
    fig.tight_layout()
    return _save(fig, path)


def plot_fit(data: Dict[str, Any], path: Path) -> Path:
    fit = data["fit"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(fit["x"], fit["target"], label="sin(x)", color="black", linewidth=1.0)
    ax.plot(fit["x"], fit["prediction"], label="model", linestyle="--")
    probs = data.get("softmax_baseline", {}).get("probabilities")
    if probs:
        inset = ax.inset_axes([0.62, 0.08, 0.35, 0.3])
        for name, p in probs.items():
            inset.bar(range(len(p)), p)
        inset.set_title("softmax", fontsize=8)
        inset.tick_params(labelsize=6)
    ax.set_xlabel("x")
    ax.legend(loc="upper left")
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(data: Dict[str, Any], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    by_shape: Dict[str, List[Dict[str, Any]]] = {}
    for row in data["sweep"]:
        by_shape.setdefault(row.get("shape_kind") or "default", []).append(row)
    for shape, rows in by_shape.items():
        rows = sorted(rows, key=lambda r: r["cost_ratio"])
        ax.plot([r["cost_ratio"] for r in rows], [r["accuracy"] for r in rows], marker="o", label=shape)
    ax.set_xlabel("C(w) / C_tot")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def render_run(run_dir: Union[str, Path]) -> List[Path]:
    """Produit les PNG d'une exécution dans son répertoire"""
    run_dir = Path(run_dir)
    data = load_plot_data(run_dir)
    written = []
    if data.get("gates"):
        written.append(plot_gate_bars(data, run_dir / "gates.png"))
    if data.get("curves", {}).get("iteration"):
        written.append(plot_curves(data, run_dir / "curves.png"))
    if data.get("fit"):
        written.append(plot_fit(data, run_dir / "fit.png"))
    if data.get("sweep"):
        written.append(plot_sweep(data, run_dir / "sweep.png"))
    return written
