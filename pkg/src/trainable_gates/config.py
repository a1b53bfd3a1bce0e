#!/usr/bin/env python3
"""
⚙️ Configuration des expériences
Schéma pydantic des fichiers YAML (version 1), chargement, surcharges par
variables d'environnement et construction du modèle décrit.
Schéma documenté dans docs/CONFIG_SCHEMA.md.
"""

import logging
import math
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .autodiff import Padding, TGFError
from .budget import ConfigurationError
from .gates import DEFAULT_M, ShapeKind
from .layers import (
    Activation, ActivationKind, Conv2D, Dense, Flatten, GatedModel, Granularity, Layer,
    LayerKind, Relaxation, TrainableGateLayer, share_gates,
)
from .trainer import TrainConfig, TrainMode

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "TGATES_OUTPUT_ROOT"


class ExperimentKind(Enum):
    SINE_SELECTION = "sine_selection"
    PLANTED_FEATURES = "planted_features"
    CNN_BUDGET = "cnn_budget"
    GRADCHECK_SUITE = "gradcheck_suite"


class DatasetSource(Enum):
    SYNTHETIC_SINE = "synthetic_sine"
    SYNTHETIC_PLANTED = "synthetic_planted"
    SYNTHETIC_SHAPES = "synthetic_shapes"
    IDX_FILES = "idx_files"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GateConfig(_Strict):
    """Porte entraînable attachée à une couche (ou à l'entrée)"""
    granularity: Granularity = Field(default=Granularity.CHANNEL, description="channel, weight ou block")
    M: int = Field(default=DEFAULT_M, ge=1, description="Granularité de la dent de scie")
    shape_kind: ShapeKind = Field(default=ShapeKind.CONSTANT_ONE, description="Forme de dérivée g")
    share_group: Optional[str] = Field(default=None, description="Groupe de portes partagées")
    relaxation: Relaxation = Field(default=Relaxation.TG, description="tg, ou softmax (comparaison)")
    init_low: float = 0.01
    init_high: float = 0.1

    @model_validator(mode="after")
    def validate_init(self) -> "GateConfig":
        if self.init_high < self.init_low:
            raise ValueError("init_high doit être ≥ init_low")
        return self


class LayerConfig(_Strict):
    """Couche de l'architecture ; n_in est déduit de la couche précédente"""
    kind: LayerKind
    name: Optional[str] = None
    n_out: Optional[int] = Field(default=None, ge=1, description="Unités ou canaux de sortie")
    n_in: Optional[int] = Field(default=None, ge=1, description="Vérifié contre la couche précédente")
    kernel_size: int = Field(default=3, ge=1)
    stride: int = Field(default=1, ge=1)
    padding: Padding = Padding.SAME
    bias: bool = True
    fn: Optional[ActivationKind] = None
    gate: Optional[GateConfig] = None

    @model_validator(mode="after")
    def validate_kind(self) -> "LayerConfig":
        if self.kind in (LayerKind.DENSE, LayerKind.CONV2D) and self.n_out is None:
            raise ValueError(f"Une couche '{self.kind.value}' requiert n_out")
        if self.kind is LayerKind.ACTIVATION and self.fn is None:
            raise ValueError("Une activation requiert fn")
        if self.gate is not None and self.kind not in (LayerKind.DENSE, LayerKind.CONV2D):
            raise ValueError(f"Une couche '{self.kind.value}' ne porte pas de porte")
        return self


class ArchitectureConfig(_Strict):
    input_shape: List[int] = Field(..., min_length=1)
    layers: List[LayerConfig] = Field(..., min_length=1)
    input_gate: Optional[GateConfig] = None
    gate_last: bool = Field(default=False, description="Autorise une porte sur la dernière couche")
    init_range: Optional[float] = Field(default=None, gt=0.0, description="θ uniforme dans [-r, r]")

    @field_validator("input_shape")
    @classmethod
    def validate_input_shape(cls, v: List[int]) -> List[int]:
        if any(d < 1 for d in v):
            raise ValueError(f"Forme d'entrée invalide: {v}")
        return v


class DatasetSpec(_Strict):
    """Source des données et paramètres de génération"""
    source: DatasetSource
    n_train: int = Field(default=1000, ge=1)
    n_test: int = Field(default=200, ge=0)
    noise: float = Field(default=0.0, ge=0.0)
    x_range: List[float] = Field(default_factory=lambda: [-math.pi, math.pi], min_length=2, max_length=2)
    n_features: int = Field(default=10, ge=1)
    k_relevant: int = Field(default=3, ge=1)
    n_classes: int = Field(default=10, ge=2)
    image_size: int = Field(default=28, ge=7)
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    test_images_path: Optional[str] = None
    test_labels_path: Optional[str] = None

    @model_validator(mode="after")
    def validate_source(self) -> "DatasetSpec":
        if self.source is DatasetSource.IDX_FILES:
            for label in ("images_path", "labels_path"):
                value = getattr(self, label)
                if value is None:
                    raise ValueError(f"idx_files requiert {label}")
                if not Path(value).exists():
                    raise ValueError(f"Fichier introuvable: {value}")
        if self.source is DatasetSource.SYNTHETIC_SINE and not self.x_range[1] > self.x_range[0]:
            raise ValueError(f"Intervalle vide: {self.x_range}")
        if self.source is DatasetSource.SYNTHETIC_PLANTED and not 1 <= self.k_relevant <= self.n_features <= 12:
            raise ValueError("Il faut 1 ≤ k_relevant ≤ n_features ≤ 12")
        return self


class SweepConfig(_Strict):
    """Balayage des cibles ρ et des formes de dérivée (cnn_budget)"""
    rho: List[float] = Field(default_factory=list)
    shape_kinds: List[ShapeKind] = Field(default_factory=list)

    @field_validator("rho")
    @classmethod
    def validate_rho(cls, v: List[float]) -> List[float]:
        if any(not 0.0 < r <= 1.0 for r in v):
            raise ValueError(f"Cibles hors de (0, 1]: {v}")
        return v


class GradcheckSettings(_Strict):
    eps: float = Field(default=1e-5, gt=0.0)
    tolerance: float = Field(default=1e-4, gt=0.0)
    max_elements: Optional[int] = Field(default=None, ge=1)
    batch_size: int = Field(default=8, ge=1)


class ExperimentConfig(_Strict):
    """Fichier d'expérience complet"""
    schema_version: Literal[1] = SCHEMA_VERSION
    kind: ExperimentKind
    name: str = Field(..., min_length=1)
    seed: int = 0
    precision: Literal["float64", "float32"] = "float64"
    architecture: ArchitectureConfig
    train: TrainConfig
    dataset: DatasetSpec
    output_dir: str = Field(..., min_length=1)
    baseline: Union[bool, Literal["softmax"]] = False
    pretrain_iterations: int = Field(default=0, ge=0)
    sweep: Optional[SweepConfig] = None
    gradcheck: GradcheckSettings = Field(default_factory=GradcheckSettings)

    @model_validator(mode="after")
    def validate_experiment(self) -> "ExperimentConfig":
        if self.dataset.n_train < self.train.batch_size:
            raise ValueError(
                f"{self.dataset.n_train} échantillons pour des lots de {self.train.batch_size}"
            )
        if self.baseline == "softmax" and self.kind is not ExperimentKind.SINE_SELECTION:
            raise ValueError("baseline: softmax n'existe que pour sine_selection")
        if self.sweep is not None and self.kind is not ExperimentKind.CNN_BUDGET:
            raise ValueError("sweep n'existe que pour cnn_budget")
        if self.pretrain_iterations and self.train.mode is TrainMode.THETA_ONLY:
            raise ValueError("pretrain_iterations est sans objet en mode theta_only")
        if self.kind is ExperimentKind.PLANTED_FEATURES and self.architecture.input_gate is None:
            raise ValueError("planted_features requiert input_gate")
        try:
            build_model(self.architecture, self.seed)
        except TGFError as e:
            raise ValueError(f"Architecture invalide: {e}") from e
        return self


# ====== Construction du modèle ======

def _make_gate(name: str, count: int, gate: GateConfig, rng: np.random.Generator) -> TrainableGateLayer:
    return TrainableGateLayer.create(
        name, count, granularity=gate.granularity, M=gate.M, shape_kind=gate.shape_kind, rng=rng,
        init_low=gate.init_low, init_high=gate.init_high, share_group=gate.share_group,
        relaxation=gate.relaxation,
    )


def build_model(arch: ArchitectureConfig, seed: int = 0, with_gates: bool = True) -> GatedModel:
    """
    Construit le GatedModel décrit (chaînage des formes vérifié)

    Args:
        with_gates: False pour le modèle de référence sans portes
    """
    rng = np.random.default_rng(seed)
    shape = tuple(arch.input_shape)
    layers: List[Layer] = []
    for i, spec in enumerate(arch.layers):
        name = spec.name or f"{spec.kind.value}{i}"
        if spec.kind in (LayerKind.DENSE, LayerKind.CONV2D):
            expected_rank = 1 if spec.kind is LayerKind.DENSE else 3
            if len(shape) != expected_rank:
                raise ConfigurationError(f"{name}: entrée de forme {shape} incompatible avec '{spec.kind.value}'")
            n_in = shape[0]
            if spec.n_in is not None and spec.n_in != n_in:
                raise ConfigurationError(f"{name}: n_in={spec.n_in} mais la couche précédente produit {n_in}")
            if spec.kind is LayerKind.DENSE:
                layer: Layer = Dense(name, n_in, spec.n_out, bias=spec.bias, rng=rng, init_range=arch.init_range)
            else:
                layer = Conv2D(name, n_in, spec.n_out, kernel_size=spec.kernel_size, stride=spec.stride,
                               padding=spec.padding, bias=spec.bias, rng=rng, init_range=arch.init_range)
        elif spec.kind is LayerKind.ACTIVATION:
            layer = Activation(name, spec.fn)
        else:
            layer = Flatten(name)
        shape = layer.build(shape)
        layers.append(layer)

    model = GatedModel(arch.input_shape, layers)
    if not with_gates:
        return model

    weighted = [i for i, layer in enumerate(model.layers) if layer.is_weighted]
    groups: Dict[str, List[TrainableGateLayer]] = {}
    if arch.input_gate is not None:
        tgl = _make_gate("input", model.effective_input_shape[0], arch.input_gate, rng)
        model.attach_input_gate(tgl)
        if tgl.share_group:
            groups.setdefault(tgl.share_group, []).append(tgl)
    for i, spec in enumerate(arch.layers):
        if spec.gate is None:
            continue
        if weighted and i == weighted[-1] and not arch.gate_last:
            raise ConfigurationError(f"{model.layers[i].name}: la dernière couche n'est pas masquée (gate_last)")
        layer = model.layers[i]
        count = {Granularity.CHANNEL: layer.n_out, Granularity.WEIGHT: layer.weight.size,
                 Granularity.BLOCK: 1}[spec.gate.granularity]
        tgl = _make_gate(layer.name, count, spec.gate, rng)
        model.attach_gate(i, tgl)
        if tgl.share_group:
            groups.setdefault(tgl.share_group, []).append(tgl)
    for group_id, members in groups.items():
        share_gates(members, group_id)
    return model


# ====== Chargement ======

def _format_validation(error: ValidationError) -> str:
    lines = []
    for err in error.errors():
        location = ".".join(str(part) for part in err["loc"])
        lines.append(f"  {location}: {err['msg']}")
    return "\n".join(lines)


def parse_experiment_config(data: Any, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}: document YAML attendu sous forme de table")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"{source}: configuration invalide\n{_format_validation(e)}") from e


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Lit et valide un fichier d'expérience

    Raises:
        ConfigurationError: fichier illisible, YAML invalide ou schéma non respecté
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigurationError(f"Lecture impossible de {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: YAML invalide: {e}") from e
    config = parse_experiment_config(data, str(path))
    logger.debug(f"⚙️ Configuration '{config.name}' ({config.kind.value}) chargée depuis {path}")
    return config


def resolve_output_dir(config: ExperimentConfig) -> Path:
    """output_dir, préfixé par TGATES_OUTPUT_ROOT s'il est relatif"""
    output = Path(config.output_dir)
    root = os.getenv(OUTPUT_ROOT_ENV)
    if root and not output.is_absolute():
        output = Path(root) / output
    return output


def dump_config(config: ExperimentConfig) -> str:
    """Configuration résolue, rechargeable par load_experiment_config"""
    data = config.model_dump(mode="json", by_alias=True, exclude_none=True)
    return yaml.safe_dump(data, sort_keys=False, allow_unicode=True)
