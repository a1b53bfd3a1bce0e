#!/usr/bin/env python3
"""
🏁 Expériences de bout en bout (longues)

    pytest -m acceptance
"""

import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from trainable_gates.budget import gated_cost_value, total_cost_static
from trainable_gates.checkpoint import load_checkpoint
from trainable_gates.experiments import EXIT_OK, gate_math_checks, parse_gate_dump, run_experiment
from trainable_gates.layers import hard_prune

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = range(10)


def _shipped(name: str, tmp_path: Path, run: str, **overrides) -> dict:
    with open(CONFIGS / f"{name}.yaml", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    data["output_dir"] = str(tmp_path / run)
    data.update(overrides)
    return data


def _run(data: dict, write_config) -> dict:
    path = write_config(data, f"{Path(data['output_dir']).name}.yaml")
    assert run_experiment(path) == EXIT_OK
    with open(Path(data["output_dir"]) / "summary.json", encoding="utf-8") as f:
        return json.load(f)


def test_gate_math_suite():
    checks = gate_math_checks()
    assert all(v["ok"] for v in checks["convergence"].values()), checks["convergence"]
    assert all(v["ok"] for v in checks["derivative"].values()), checks["derivative"]
    assert checks["derivative"]["constant_one"]["exact_one"] is True


def test_gradcheck_suite(write_config, tmp_path):
    summary = _run(_shipped("gradcheck_suite", tmp_path, "gradcheck"), write_config)
    assert summary["passed"] is True
    assert summary["max_rel_error"] < 1e-4


def test_sine_selects_one_node(write_config, tmp_path):
    """Un seul nœud sur 20 et MSE test < 1e-3 pour au moins 8 graines sur 10"""
    passing = 0
    for seed in SEEDS:
        data = _shipped("sine_selection", tmp_path, f"sine{seed}", seed=seed, baseline=False)
        summary = _run(data, write_config)
        dump = parse_gate_dump((tmp_path / f"sine{seed}" / "gates.txt").read_text(encoding="utf-8"))
        if sum(dump["hidden"]["mask"]) == 1 and summary["test_mse"] < 1e-3:
            passing += 1
    assert passing >= 8


def test_planted_matches_oracle(write_config, tmp_path):
    passing = 0
    for seed in SEEDS:
        summary = _run(_shipped("planted_features", tmp_path, f"planted{seed}", seed=seed),
                       write_config)
        if summary["matches_oracle"]:
            passing += 1
            assert summary["tgf_loss"] <= 1.1 * summary["oracle_loss"]
    assert passing >= 8


@pytest.mark.parametrize("rho,low,high", [(0.5, 0.45, 0.55), (0.25, 0.20, 0.30)])
def test_cnn_ratio_control(write_config, tmp_path, rho, low, high):
    data = _shipped("cnn_budget", tmp_path, f"cnn{rho}")
    del data["sweep"]
    data["train"]["regularizer"]["rho"] = rho
    summary = _run(data, write_config)
    assert low <= summary["cost_ratio"] <= high
    assert abs(summary["cost_ratio"] - rho) < abs(summary["initial_cost_ratio"] - rho)
    assert summary["accuracy_gap"] <= 0.03

    # élagage physique : même sortie, coût statique égal au coût masqué
    model = load_checkpoint(tmp_path / f"cnn{rho}" / "checkpoint.json")
    pruned = hard_prune(model).model
    x = np.random.default_rng(1).uniform(0.0, 1.0, size=(100, 1, 28, 28))
    np.testing.assert_allclose(pruned.predict(x), model.predict(x), atol=1e-3)
    assert total_cost_static(pruned, "flops") == gated_cost_value(model, "flops", hard=True)


def test_frozen_theta_selection(write_config, tmp_path):
    summary = _run(_shipped("cnn_budget_frozen", tmp_path, "frozen"), write_config)
    assert summary["theta_unchanged"] is True
    assert summary["initial_cost_ratio"] == pytest.approx(1.0, abs=1e-3)
    assert abs(summary["cost_ratio"] - 0.5) <= 0.05


def test_runs_are_bitwise_reproducible(write_config, tmp_path):
    metrics = []
    for run in ("again_a", "again_b"):
        data = _shipped("sine_selection", tmp_path, run, baseline=False)
        _run(data, write_config)
        metrics.append((tmp_path / run / "metrics.csv").read_bytes())
    assert metrics[0] == metrics[1]
