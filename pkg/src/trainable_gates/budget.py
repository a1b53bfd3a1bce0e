#!/usr/bin/env python3
"""
📊 Modèle de coût et régularisation du budget
Coût statique exact C_tot et coût différentiable C(w) en FLOPs (MAC), paramètres
ou canaux ; régulariseur λ·(ρ − C(w)/C_tot)².

Le coût d'une couche utilise la somme des portes de sa propre sortie et celle de
son prédécesseur pour ses entrées.
"""

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import autodiff as ad
from .autodiff import ArgumentError, Tape, Tensor, TGFError
from .layers import (
    INPUT_KEY, GatedModel, Granularity, Layer, LayerKind, TrainableGateLayer,
    active_mask, gate_values,
)

logger = logging.getLogger(__name__)

Amount = Union[float, Tensor]


class ConfigurationError(TGFError):
    """Configuration invalide (coût total nul, fichier d'expérience incorrect)"""
    pass


class CostKind(Enum):
    FLOPS = "flops"
    PARAMS = "params"
    CHANNELS = "channels"


class RegularizerConfig(BaseModel):
    """Cible de compression ρ et poids λ"""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    rho: float = Field(..., gt=0.0, le=1.0, description="Fraction de coût conservée visée")
    lam: float = Field(default=0.1, ge=0.0, alias="lambda", description="Poids de régularisation")


class RegularizerStage(BaseModel):
    """Nouvelles valeurs de ρ et/ou λ à partir de l'itération `at`"""
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    at: int = Field(..., ge=1)
    rho: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    lam: Optional[float] = Field(default=None, ge=0.0, alias="lambda")

    def apply(self, regularizer: RegularizerConfig) -> RegularizerConfig:
        update = {key: value for key, value in (("rho", self.rho), ("lam", self.lam)) if value is not None}
        return regularizer.model_copy(update=update)


# ====== Coût statique ======

def layer_cost_static(layer: Layer, kind: Union[CostKind, str], warnings: Optional[List[str]] = None) -> int:
    """
    Coût exact d'une couche

    flops : MAC (dense n_in·n_out, conv k·k·n_in·n_out·H·W) ; params : noyau + biais ;
    channels : n_out. Activations et Flatten coûtent 0 ; tout autre type est
    compté 0 avec un avertissement.
    """
    kind = CostKind(kind)
    layer_kind = getattr(layer, "kind", None)
    if layer_kind in (LayerKind.ACTIVATION, LayerKind.FLATTEN):
        return 0
    if layer_kind not in (LayerKind.DENSE, LayerKind.CONV2D):
        message = f"Couche non comptée: {getattr(layer, 'name', type(layer).__name__)}"
        logger.warning(f"⚠️ {message}")
        if warnings is not None:
            warnings.append(message)
        return 0

    k2 = layer.kernel_size ** 2 if layer_kind is LayerKind.CONV2D else 1
    if kind is CostKind.FLOPS:
        return k2 * layer.n_in * layer.n_out * layer.out_spatial
    if kind is CostKind.PARAMS:
        return k2 * layer.n_in * layer.n_out + (layer.n_out if layer.has_bias else 0)
    return layer.n_out


def _channel_counted(model: GatedModel) -> Tuple[List[int], bool]:
    """Couches (et entrée) comptées par le coût en canaux"""
    weighted = [i for i, _ in model.weighted_layers()]
    prunable = [i for i in weighted if model.layers[i].prunable]
    if prunable or model.input_prunable:
        return prunable, model.input_prunable
    return weighted, False


def total_cost_static(model: GatedModel, kind: Union[CostKind, str],
                      warnings: Optional[List[str]] = None) -> int:
    """
    C_tot : somme des coûts statiques des couches comptées

    Raises:
        ConfigurationError: total nul
    """
    kind = CostKind(kind)
    if kind is CostKind.CHANNELS:
        counted, with_input = _channel_counted(model)
        total = sum(model.layers[i].n_out for i in counted)
        if with_input:
            total += model.effective_input_shape[0]
    else:
        total = sum(layer_cost_static(layer, kind, warnings) for layer in model.layers)
    if total <= 0:
        raise ConfigurationError(f"Coût total nul pour le type '{kind.value}'")
    return int(total)


# ====== Coût sous portes ======

def _times(a: Amount, b: Amount) -> Amount:
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ad.mul(a, b) if isinstance(a, Tensor) else ad.mul(b, a)
    return a * b


def _plus(a: Amount, b: Amount) -> Amount:
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return ad.add(a, b) if isinstance(a, Tensor) else ad.add(b, a)
    return a + b


def _value(amount: Amount) -> float:
    return amount.item() if isinstance(amount, Tensor) else float(amount)


GateSum = Callable[[TrainableGateLayer], Amount]


def _soft_sum(tape: Tape) -> GateSum:
    return lambda tgl: ad.sum_all(gate_values(tgl, tape))


def _hard_sum(tgl: TrainableGateLayer) -> float:
    return float(active_mask(tgl).sum())


def _layer_terms(model: GatedModel, kind: CostKind, gate_sum: GateSum) -> List[Tuple[str, Amount]]:
    """
    Contribution de chaque couche comptée au coût sous portes

    Les canaux d'entrée d'une couche valent la somme des portes de sortie du
    prédécesseur (multipliée par l'étendue spatiale après un Flatten).
    """
    terms: List[Tuple[str, Amount]] = []
    counted, with_input = _channel_counted(model) if kind is CostKind.CHANNELS else ([], False)

    if model.input_gate is not None:
        prev_sum: Amount = gate_sum(model.input_gate)
    else:
        prev_sum = float(model.effective_input_shape[0])
    prev_spatial = int(np.prod(model.effective_input_shape[1:]))
    if with_input:
        terms.append((INPUT_KEY, prev_sum))
    flattened = False

    for index, layer in enumerate(model.layers):
        if layer.kind is LayerKind.FLATTEN:
            flattened = True
            continue
        if not layer.is_weighted:
            continue

        in_sum = _times(prev_sum, float(prev_spatial)) if flattened and prev_spatial != 1 else prev_sum
        tgl = model.gates.get(index)
        k2 = float(layer.kernel_size ** 2) if layer.kind is LayerKind.CONV2D else 1.0

        if tgl is not None and tgl.granularity is Granularity.WEIGHT:
            # fraction d'éléments ouverts appliquée au noyau restreint aux entrées actives
            share = _times(gate_sum(tgl), 1.0 / tgl.count)
            out_sum: Amount = float(layer.n_out)
            kernel = _times(share, _times(in_sum, k2 * layer.n_out))
            if kind is CostKind.FLOPS:
                term: Amount = _times(kernel, float(layer.out_spatial))
            elif kind is CostKind.PARAMS:
                term = _plus(kernel, float(layer.n_out if layer.has_bias else 0))
            else:
                term = out_sum
        else:
            if tgl is None:
                out_sum = float(layer.n_out)
            elif tgl.granularity is Granularity.BLOCK:
                out_sum = _times(gate_sum(tgl), float(layer.n_out))
            else:
                out_sum = gate_sum(tgl)
            if kind is CostKind.FLOPS:
                term = _times(_times(in_sum, out_sum), k2 * layer.out_spatial)
            elif kind is CostKind.PARAMS:
                term = _times(_times(in_sum, out_sum), k2)
                if layer.has_bias:
                    term = _plus(term, out_sum)
            else:
                term = out_sum

        if kind is not CostKind.CHANNELS or index in counted:
            terms.append((layer.name, term))
        prev_sum, prev_spatial, flattened = out_sum, layer.out_spatial, False
    return terms


def gated_cost(model: GatedModel, kind: Union[CostKind, str], tape: Optional[Tape]) -> Tensor:
    """
    C(w) : coût différentiable où les canaux actifs sont remplacés par ΣTG(w)

    Returns:
        Tenseur scalaire sur la bande ; le gradient atteint chaque poids de porte
    """
    if tape is None:
        raise ArgumentError("gated_cost requiert une bande active")
    kind = CostKind(kind)
    total: Amount = 0.0
    for _, term in _layer_terms(model, kind, _soft_sum(tape)):
        total = _plus(total, term)
    return total if isinstance(total, Tensor) else ad.as_tensor(total)


def gated_cost_value(model: GatedModel, kind: Union[CostKind, str], hard: bool = False) -> float:
    """Évaluation numérique de C(w), avec les valeurs TG ou les masques 0/1"""
    kind = CostKind(kind)
    gate_sum = _hard_sum if hard else _soft_sum(Tape(frozen=model.parameters()))
    return float(sum(_value(term) for _, term in _layer_terms(model, kind, gate_sum)))


def reg_loss(cost: Tensor, c_tot: float, cfg: RegularizerConfig, tape: Optional[Tape] = None) -> Tensor:
    """λ·(ρ − C/C_tot)²"""
    if c_tot <= 0:
        raise ConfigurationError(f"Coût total non positif: {c_tot}")
    ratio = ad.mul(cost, 1.0 / c_tot)
    return ad.mul(ad.square(ad.sub(ratio, cfg.rho)), cfg.lam)


@dataclass
class CostModel:
    """Coût statique d'un modèle pour un type donné, avec les avertissements collectés"""
    kind: CostKind
    total: int
    per_layer: Dict[str, int] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: GatedModel, kind: Union[CostKind, str]) -> "CostModel":
        kind = CostKind(kind)
        warnings: List[str] = []
        per_layer = {layer.name: layer_cost_static(layer, kind, warnings) for layer in model.layers}
        return cls(kind=kind, total=total_cost_static(model, kind), per_layer=per_layer, warnings=warnings)

    def ratio(self, model: GatedModel, hard: bool = False) -> float:
        return gated_cost_value(model, self.kind, hard=hard) / self.total


# ====== Rapport de coût ======

@dataclass
class CostRow:
    layer: str
    kind: str
    static: int
    gated: float
    hard: float
    active: Optional[int] = None
    total_channels: Optional[int] = None


def cost_report(model: GatedModel, kind: Union[CostKind, str]) -> List[CostRow]:
    """Une ligne par couche comptée : coût statique, sous portes TG et sous masques"""
    kind = CostKind(kind)
    soft = dict(_layer_terms(model, kind, _soft_sum(Tape(frozen=model.parameters()))))
    hard = dict(_layer_terms(model, kind, _hard_sum))
    gates = dict(model.gate_items())
    rows = []
    for name in soft:
        if name == INPUT_KEY:
            static, layer_kind = model.effective_input_shape[0], "input"
        else:
            layer = next(l for l in model.layers if l.name == name)
            static = layer.n_out if kind is CostKind.CHANNELS else layer_cost_static(layer, kind)
            layer_kind = layer.kind.value
        tgl = gates.get(name)
        rows.append(CostRow(
            layer=name,
            kind=layer_kind,
            static=int(static),
            gated=_value(soft[name]),
            hard=_value(hard[name]),
            active=int(active_mask(tgl).sum()) if tgl is not None else None,
            total_channels=tgl.count if tgl is not None else None,
        ))
    return rows


def format_cost_report(rows: List[CostRow], kind: Union[CostKind, str]) -> str:
    """Tableau texte aligné"""
    kind = CostKind(kind)
    header = f"{'layer':<16}{'kind':<12}{'static':>14}{'gated':>18}{'hard':>14}{'active':>12}"
    lines = [f"# cost kind: {kind.value}", header, "-" * len(header)]
    for row in rows:
        active = f"{row.active}/{row.total_channels}" if row.active is not None else "-"
        lines.append(f"{row.layer:<16}{row.kind:<12}{row.static:>14d}{row.gated:>18.6f}{row.hard:>14.1f}{active:>12}")
    static_total = sum(r.static for r in rows)
    gated_total = sum(r.gated for r in rows)
    hard_total = sum(r.hard for r in rows)
    lines.append("-" * len(header))
    lines.append(f"{'total':<28}{static_total:>14d}{gated_total:>18.6f}{hard_total:>14.1f}")
    if static_total > 0:
        lines.append(f"ratio gated={gated_total / static_total:.6f} hard={hard_total / static_total:.6f}")
    return "\n".join(lines) + "\n"


def write_cost_report_csv(rows: List[CostRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "kind", "static", "gated", "hard", "active", "total_channels"])
        for row in rows:
            writer.writerow([row.layer, row.kind, row.static, repr(row.gated), repr(row.hard),
                             "" if row.active is None else row.active,
                             "" if row.total_channels is None else row.total_channels])
