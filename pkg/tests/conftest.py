#!/usr/bin/env python3
"""
🧰 Fixtures partagées des tests
"""

import numpy as np
import pytest
import yaml

from trainable_gates.autodiff import set_default_dtype
from trainable_gates.layers import Activation, Conv2D, Dense, Flatten, GatedModel, TrainableGateLayer


@pytest.fixture(autouse=True)
def float64_default():
    """Chaque test démarre (et se termine) en float64"""
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_sine_model(hidden: int = 20, seed: int = 0) -> GatedModel:
    """Réseau 1 -> hidden (sinus, porte canal) -> 1, sans biais"""
    rng = np.random.default_rng(seed)
    model = GatedModel((1,), [
        Dense("hidden", 1, hidden, bias=False, rng=rng),
        Activation("sine", "sin"),
        Dense("output", hidden, 1, bias=False, rng=rng),
    ])
    model.attach_gate(0, TrainableGateLayer.create("hidden", hidden, rng=rng))
    return model


@pytest.fixture
def sine_model():
    return make_sine_model()


def make_cnn_model(seed: int = 0) -> GatedModel:
    """Deux convolutions 3×3 à porte canal sur 1×8×8, puis une tête dense"""
    rng = np.random.default_rng(seed)
    model = GatedModel((1, 8, 8), [
        Conv2D("conv1", 1, 4, kernel_size=3, stride=2, rng=rng),
        Activation("relu1", "relu"),
        Conv2D("conv2", 4, 6, kernel_size=3, stride=2, rng=rng),
        Activation("relu2", "relu"),
        Flatten("flatten"),
        Dense("head", 6 * 2 * 2, 3, rng=rng),
    ])
    model.attach_gate(0, TrainableGateLayer.create("conv1", 4, rng=rng))
    model.attach_gate(2, TrainableGateLayer.create("conv2", 6, rng=rng))
    return model


@pytest.fixture
def cnn_model():
    return make_cnn_model()


def planted_config(output_dir: str, **train_overrides) -> dict:
    """Configuration planted_features minimale (dictionnaire YAML)"""
    train = {
        "mode": "joint",
        "iterations": 20,
        "batch_size": 16,
        "regularizer": {"rho": 0.3, "lambda": 0.1},
        "cost_kind": "channels",
        "task_loss": "mse",
        "optimizer": {"kind": "adam", "lr": 0.01},
        "log_every": 5,
    }
    train.update(train_overrides)
    return {
        "schema_version": 1,
        "kind": "planted_features",
        "name": "planted_small",
        "seed": 0,
        "output_dir": output_dir,
        "architecture": {
            "input_shape": [6],
            "input_gate": {"granularity": "channel"},
            "layers": [{"kind": "dense", "name": "output", "n_out": 1, "bias": False}],
        },
        "train": train,
        "dataset": {
            "source": "synthetic_planted",
            "n_train": 64,
            "n_test": 16,
            "n_features": 6,
            "k_relevant": 2,
            "noise": 0.01,
        },
    }


@pytest.fixture
def write_config(tmp_path):
    """Écrit un dictionnaire de configuration en YAML et retourne le chemin"""
    def _write(data: dict, name: str = "experiment.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
        return path
    return _write


@pytest.fixture
def planted_dict(tmp_path):
    """Fabrique de configurations planted_features écrivant sous tmp_path"""
    def _make(**train_overrides):
        return planted_config(str(tmp_path / "run"), **train_overrides)
    return _make


@pytest.fixture
def sine_factory():
    return make_sine_model
