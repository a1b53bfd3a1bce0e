#!/usr/bin/env python3
"""
💾 Points de sauvegarde des modèles
Document JSON autodescriptif : architecture, paramètres (nom, forme, données à
plat) et définitions des portes. Format décrit dans docs/CHECKPOINT_FORMAT.md.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .autodiff import Parameter, ParamRole, TGFError
from .gates import GateSpec, ShapeKind
from .layers import (
    INPUT_KEY, Activation, Conv2D, Dense, Flatten, GatedModel, Layer, LayerKind,
    TrainableGateLayer,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "trainable-gates-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(TGFError):
    """Point de sauvegarde illisible ou incohérent"""
    pass


def _param_entry(param: Parameter) -> Dict[str, Any]:
    return {
        "name": param.name,
        "role": param.role.value,
        "shape": list(param.shape),
        "data": [float(v) for v in param.value.reshape(-1)],
    }


def checkpoint_document(model: GatedModel, metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Construit le document JSON d'un modèle"""
    gates = []
    for key, tgl in model.gate_items():
        gates.append({
            "layer": key,
            "param": tgl.weights.name,
            "M": tgl.spec.M,
            "shape_kind": tgl.spec.shape_kind.value,
            "granularity": tgl.granularity.value,
            "share_group": tgl.share_group,
            "relaxation": tgl.relaxation.value,
        })
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": model.describe(),
        "parameters": [_param_entry(p) for p in model.parameters()],
        "gates": gates,
        "metadata": metadata or {},
    }


def save_checkpoint(model: GatedModel, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Écrit le point de sauvegarde (les flottants sont écrits via repr, donc exacts)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(checkpoint_document(model, metadata), f, indent=1)
    logger.info(f"💾 Point de sauvegarde écrit: {path}")
    return path


def _layer_from(desc: Dict[str, Any], values: Dict[str, np.ndarray]) -> Layer:
    kind = LayerKind(desc["kind"])
    name = desc["name"]
    if kind is LayerKind.DENSE:
        return Dense(name, desc["n_in"], desc["n_out"], bias=desc["bias"],
                     weight=values[f"{name}.weight"], bias_value=values.get(f"{name}.bias"))
    if kind is LayerKind.CONV2D:
        return Conv2D(name, desc["n_in"], desc["n_out"], kernel_size=desc["kernel_size"],
                      stride=desc["stride"], padding=desc["padding"], bias=desc["bias"],
                      weight=values[f"{name}.weight"], bias_value=values.get(f"{name}.bias"))
    if kind is LayerKind.ACTIVATION:
        return Activation(name, desc["fn"])
    return Flatten(name)


def model_from_document(doc: Dict[str, Any]) -> GatedModel:
    """Reconstruit un GatedModel ; les portes d'un même paramètre sont partagées"""
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Format inconnu: {doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Version non supportée: {doc.get('version')!r}")
    try:
        values: Dict[str, np.ndarray] = {}
        roles: Dict[str, ParamRole] = {}
        for entry in doc["parameters"]:
            data = np.asarray(entry["data"], dtype=np.float64)
            shape = tuple(entry["shape"])
            if data.size != int(np.prod(shape)):
                raise CheckpointError(f"{entry['name']}: {data.size} valeurs pour la forme {shape}")
            values[entry["name"]] = data.reshape(shape)
            roles[entry["name"]] = ParamRole(entry.get("role", "theta"))

        arch = doc["architecture"]
        layers = [_layer_from(desc, values) for desc in arch["layers"]]
        model = GatedModel(arch["input_shape"], layers, input_selection=arch.get("input_selection"),
                           input_prunable=arch.get("input_prunable", False))
        for desc, layer in zip(arch["layers"], model.layers):
            layer.prunable = bool(desc.get("prunable", layer.prunable))

        by_name = {layer.name: i for i, layer in enumerate(model.layers)}
        shared: Dict[str, Parameter] = {}
        for gate in doc.get("gates", []):
            pname = gate["param"]
            if pname not in shared:
                if pname not in values or roles[pname] is not ParamRole.GATE:
                    raise CheckpointError(f"Porte sans poids de porte: {pname}")
                shared[pname] = Parameter(pname, values[pname], ParamRole.GATE)
            spec = GateSpec(weights=shared[pname], M=int(gate["M"]), shape_kind=ShapeKind(gate["shape_kind"]))
            tgl = TrainableGateLayer(spec=spec, granularity=gate["granularity"],
                                     share_group=gate.get("share_group"),
                                     relaxation=gate.get("relaxation", "tg"))
            if gate["layer"] == INPUT_KEY:
                model.attach_input_gate(tgl)
            elif gate["layer"] in by_name:
                model.attach_gate(by_name[gate["layer"]], tgl)
            else:
                raise CheckpointError(f"Porte sur une couche inconnue: {gate['layer']}")
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, TGFError) as e:
        raise CheckpointError(f"Point de sauvegarde incohérent: {e}") from e
    return model


def load_checkpoint(path: Union[str, Path]) -> GatedModel:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Lecture impossible de {path}: {e}") from e
    model = model_from_document(doc)
    logger.debug(f"📂 Point de sauvegarde chargé: {path}")
    return model


def load_metadata(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f).get("metadata", {})
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Lecture impossible de {path}: {e}") from e
