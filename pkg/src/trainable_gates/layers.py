#!/usr/bin/env python3
"""
🧱 Couches et couche de portes entraînables (TGL)
Couches denses, convolutions, activations, et portes multipliant les canaux de
sortie, les éléments d'un noyau ou un bloc entier. Les portes se placent sur la
sortie de la couche avant l'activation : ỹ_i = TG(w_i)·y_i.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ArgumentError, DimensionError, Parameter, ParamRole, Tape, Tensor, TGFError
from .gates import DEFAULT_M, GateSpec, ShapeKind, gate_tensor, step_gate

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


class DegenerateModelError(TGFError):
    """Couche sans aucun canal actif au moment de l'élagage"""
    pass


class UnprunableGateError(TGFError):
    """Porte sans équivalent structurel (granularité par poids)"""
    pass


class LayerKind(Enum):
    DENSE = "dense"
    CONV2D = "conv2d"
    ACTIVATION = "activation"
    FLATTEN = "flatten"


class ActivationKind(Enum):
    RELU = "relu"
    SIN = "sin"
    IDENTITY = "identity"


class Granularity(Enum):
    """Granularité d'une TGL"""
    CHANNEL = "channel"
    WEIGHT = "weight"
    BLOCK = "block"


class Relaxation(Enum):
    """TG (défaut) ou softmax (comparaison probabiliste uniquement)"""
    TG = "tg"
    SOFTMAX = "softmax"


def _glorot(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int,
            init_range: Optional[float]) -> np.ndarray:
    limit = init_range if init_range is not None else math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ====== Couches ======

class Layer:
    """Couche de base : formes par échantillon (sans l'axe du lot)"""

    kind: LayerKind

    def __init__(self, name: str):
        self.name = name
        self.prunable = False
        self.in_shape: Optional[Shape] = None
        self.out_shape: Optional[Shape] = None

    @property
    def is_weighted(self) -> bool:
        return self.kind in (LayerKind.DENSE, LayerKind.CONV2D)

    def build(self, in_shape: Shape) -> Shape:
        self.in_shape = tuple(in_shape)
        self.out_shape = self._output_shape(self.in_shape)
        return self.out_shape

    def _output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def parameters(self) -> List[Parameter]:
        return []

    def describe(self) -> Dict:
        return {"kind": self.kind.value, "name": self.name, "prunable": self.prunable}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name}, {self.in_shape} -> {self.out_shape})"


class WeightedLayer(Layer):
    """Couche portant un noyau θ et un biais optionnel"""

    def __init__(self, name: str, n_in: int, n_out: int, weight_shape: Shape, fans: Tuple[int, int],
                 bias: bool, rng: Optional[np.random.Generator], init_range: Optional[float],
                 weight: Optional[np.ndarray], bias_value: Optional[np.ndarray]):
        super().__init__(name)
        if n_in < 1 or n_out < 1:
            raise DimensionError(f"{name}: nombres de canaux invalides ({n_in}, {n_out})")
        self.n_in = n_in
        self.n_out = n_out
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weight = _glorot(rng, weight_shape, fans[0], fans[1], init_range)
        weight = np.asarray(weight)
        if weight.shape != tuple(weight_shape):
            raise DimensionError(f"{name}: noyau {weight.shape} au lieu de {tuple(weight_shape)}")
        self.weight = Parameter(f"{name}.weight", weight, ParamRole.THETA)
        self.bias: Optional[Parameter] = None
        if bias:
            value = np.zeros(n_out) if bias_value is None else np.asarray(bias_value)
            if value.shape != (n_out,):
                raise DimensionError(f"{name}: biais {value.shape} au lieu de {(n_out,)}")
            self.bias = Parameter(f"{name}.bias", value, ParamRole.THETA)

    @property
    def has_bias(self) -> bool:
        return self.bias is not None

    def parameters(self) -> List[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def apply(self, x: Tensor, kernel: Tensor, bias: Optional[Tensor]) -> Tensor:
        raise NotImplementedError


class Dense(WeightedLayer):
    """Couche entièrement connectée, noyau (n_in, n_out)"""

    kind = LayerKind.DENSE

    def __init__(self, name: str, n_in: int, n_out: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, init_range: Optional[float] = None,
                 weight: Optional[np.ndarray] = None, bias_value: Optional[np.ndarray] = None):
        super().__init__(name, n_in, n_out, (n_in, n_out), (n_in, n_out), bias, rng, init_range,
                         weight, bias_value)

    def _output_shape(self, in_shape: Shape) -> Shape:
        if in_shape != (self.n_in,):
            raise DimensionError(f"{self.name}: entrée {in_shape} pour une couche dense à {self.n_in} entrées")
        return (self.n_out,)

    @property
    def in_spatial(self) -> int:
        return 1

    @property
    def out_spatial(self) -> int:
        return 1

    def apply(self, x: Tensor, kernel: Tensor, bias: Optional[Tensor]) -> Tensor:
        y = ad.matmul(x, kernel)
        return ad.add_bias(y, bias) if bias is not None else y

    def describe(self) -> Dict:
        return {**super().describe(), "n_in": self.n_in, "n_out": self.n_out, "bias": self.has_bias}


class Conv2D(WeightedLayer):
    """Convolution NCHW, noyau (n_out, n_in, k, k)"""

    kind = LayerKind.CONV2D

    def __init__(self, name: str, n_in: int, n_out: int, kernel_size: int = 3, stride: int = 1,
                 padding: Union[ad.Padding, str] = ad.Padding.SAME, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, init_range: Optional[float] = None,
                 weight: Optional[np.ndarray] = None, bias_value: Optional[np.ndarray] = None):
        if kernel_size < 1:
            raise ArgumentError(f"{name}: taille de noyau invalide {kernel_size}")
        if stride < 1:
            raise ArgumentError(f"{name}: pas de convolution non positif {stride}")
        k2 = kernel_size * kernel_size
        super().__init__(name, n_in, n_out, (n_out, n_in, kernel_size, kernel_size),
                         (n_in * k2, n_out * k2), bias, rng, init_range, weight, bias_value)
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = ad.Padding(padding)
        self.out_hw: Tuple[int, int] = (0, 0)
        self.in_hw: Tuple[int, int] = (0, 0)

    def _output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[0] != self.n_in:
            raise DimensionError(f"{self.name}: entrée {in_shape} pour une convolution à {self.n_in} canaux")
        _, h, w = in_shape
        out_h, _, _ = ad.conv_output_size(h, self.kernel_size, self.stride, self.padding)
        out_w, _, _ = ad.conv_output_size(w, self.kernel_size, self.stride, self.padding)
        self.in_hw = (h, w)
        self.out_hw = (out_h, out_w)
        return (self.n_out, out_h, out_w)

    @property
    def in_spatial(self) -> int:
        return self.in_hw[0] * self.in_hw[1]

    @property
    def out_spatial(self) -> int:
        return self.out_hw[0] * self.out_hw[1]

    def apply(self, x: Tensor, kernel: Tensor, bias: Optional[Tensor]) -> Tensor:
        y = ad.conv2d(x, kernel, stride=self.stride, padding=self.padding)
        return ad.add_bias(y, bias) if bias is not None else y

    def describe(self) -> Dict:
        return {**super().describe(), "n_in": self.n_in, "n_out": self.n_out, "bias": self.has_bias,
                "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding.value}


class Activation(Layer):
    kind = LayerKind.ACTIVATION

    def __init__(self, name: str, fn: Union[ActivationKind, str]):
        super().__init__(name)
        self.fn = ActivationKind(fn)

    def apply(self, x: Tensor) -> Tensor:
        if self.fn is ActivationKind.RELU:
            return ad.relu(x)
        if self.fn is ActivationKind.SIN:
            return ad.sin(x)
        return x

    def describe(self) -> Dict:
        return {**super().describe(), "fn": self.fn.value}


class Flatten(Layer):
    kind = LayerKind.FLATTEN

    def _output_shape(self, in_shape: Shape) -> Shape:
        return (int(np.prod(in_shape)),)

    def apply(self, x: Tensor) -> Tensor:
        return ad.flatten(x)


# ====== Portes ======

@dataclass(eq=False)
class TrainableGateLayer:
    """
    Banque de portes entraînables

    Le vecteur de poids compte n_out éléments (canal), autant que le noyau
    (poids) ou un seul (bloc). Les TGL d'un même groupe partagent le même
    Parameter.
    """
    spec: GateSpec
    granularity: Granularity = Granularity.CHANNEL
    share_group: Optional[str] = None
    relaxation: Relaxation = Relaxation.TG

    def __post_init__(self):
        self.granularity = Granularity(self.granularity)
        self.relaxation = Relaxation(self.relaxation)
        if self.relaxation is Relaxation.SOFTMAX and self.granularity is not Granularity.CHANNEL:
            raise ArgumentError("La relaxation softmax ne s'applique qu'aux canaux")

    @property
    def weights(self) -> Parameter:
        return self.spec.weights

    @property
    def count(self) -> int:
        return self.spec.count

    @classmethod
    def create(cls, name: str, count: int, granularity: Union[Granularity, str] = Granularity.CHANNEL,
               M: int = DEFAULT_M, shape_kind: Union[ShapeKind, str] = ShapeKind.CONSTANT_ONE,
               rng: Optional[np.random.Generator] = None, init_low: float = 0.01, init_high: float = 0.1,
               share_group: Optional[str] = None,
               relaxation: Union[Relaxation, str] = Relaxation.TG) -> "TrainableGateLayer":
        """Portes initialisées uniformément dans [init_low, init_high] (toutes ouvertes)"""
        if count < 1:
            raise DimensionError(f"{name}: nombre de portes invalide {count}")
        rng = rng if rng is not None else np.random.default_rng(0)
        weights = Parameter(f"{name}.gate", rng.uniform(init_low, init_high, size=count), ParamRole.GATE)
        spec = GateSpec(weights=weights, M=M, shape_kind=ShapeKind(shape_kind))
        return cls(spec=spec, granularity=granularity, share_group=share_group, relaxation=relaxation)


def gate_values(tgl: TrainableGateLayer, tape: Tape) -> Tensor:
    """Multiplicateurs de la TGL : TG(w), ou softmax(w) pour la relaxation probabiliste"""
    w = tape.watch(tgl.weights)
    if tgl.relaxation is Relaxation.SOFTMAX:
        return ad.softmax(w)
    return gate_tensor(w, tgl.spec, tape)


def tgl_forward(y: Tensor, tgl: TrainableGateLayer, tape: Tape) -> Tensor:
    """
    Applique une TGL canal (ou bloc) à la sortie y d'une couche

    Le canal i de la sortie vaut TG(w_i)·y_i ; le gradient atteint y et w.
    """
    if tgl.granularity is Granularity.WEIGHT:
        raise ArgumentError("Une porte par poids s'applique au noyau, pas à la sortie")
    if tgl.granularity is Granularity.CHANNEL and (len(y.shape) < 2 or y.shape[1] != tgl.count):
        raise DimensionError(f"TGL à {tgl.count} portes sur une sortie {y.shape}")
    gates = gate_values(tgl, tape)
    if tgl.granularity is Granularity.BLOCK:
        return ad.mul(y, gates)
    return ad.scale_channels(y, gates)


def weight_gate_forward(kernel: Tensor, tgl: TrainableGateLayer, tape: Tape) -> Tensor:
    """Noyau masqué TG(w)⊙K, utilisé à la place de K"""
    if tgl.count != kernel.size:
        raise DimensionError(f"{tgl.count} portes pour un noyau de {kernel.size} éléments")
    gates = ad.reshape(gate_values(tgl, tape), kernel.shape)
    return ad.mul(kernel, gates)


def active_mask(tgl: TrainableGateLayer) -> np.ndarray:
    """
    Masque binaire b(w) des portes

    Pour la relaxation softmax, seul le canal de poids maximal est retenu.
    """
    w = tgl.weights.value
    if tgl.relaxation is Relaxation.SOFTMAX:
        mask = np.zeros(w.shape, dtype=int)
        mask[int(np.argmax(w))] = 1
        return mask
    return np.asarray(step_gate(w), dtype=int)


def share_gates(tgls: Sequence[TrainableGateLayer], group_id: str) -> None:
    """Fait pointer toutes les TGL du groupe vers le même vecteur de poids"""
    if not tgls:
        return
    counts = {t.count for t in tgls}
    if len(counts) != 1:
        raise DimensionError(f"Groupe '{group_id}': nombres de portes différents {sorted(counts)}")
    shared = tgls[0].weights
    for tgl in tgls:
        tgl.spec.weights = shared
        tgl.share_group = group_id
    logger.debug(f"🔗 Groupe '{group_id}': {len(tgls)} TGL partagent {shared.name}")


# ====== Modèle ======

INPUT_KEY = "input"


class GatedModel:
    """
    Suite ordonnée de couches avec TGL attachées

    Attributes:
        input_shape: forme brute d'un échantillon
        layers: couches dans l'ordre d'évaluation
        gates: TGL par indice de couche
        input_gate: TGL canal optionnelle sur l'entrée (sélection de variables)
        input_selection: indices d'entrée conservés après élagage
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[Layer],
                 input_selection: Optional[Sequence[int]] = None, input_prunable: bool = False):
        self.input_shape: Shape = tuple(int(d) for d in input_shape)
        self.layers: List[Layer] = list(layers)
        self.gates: Dict[int, TrainableGateLayer] = {}
        self.input_gate: Optional[TrainableGateLayer] = None
        self.input_selection: Optional[List[int]] = (
            [int(i) for i in input_selection] if input_selection is not None else None
        )
        self.input_prunable = input_prunable
        if not self.layers:
            raise ArgumentError("Modèle sans couche")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ArgumentError(f"Noms de couches dupliqués: {names}")
        self._build()

    @property
    def effective_input_shape(self) -> Shape:
        if self.input_selection is None:
            return self.input_shape
        if any(i < 0 or i >= self.input_shape[0] for i in self.input_selection):
            raise DimensionError(f"Sélection d'entrée hors bornes: {self.input_selection}")
        return (len(self.input_selection),) + self.input_shape[1:]

    def _build(self) -> None:
        shape = self.effective_input_shape
        for layer in self.layers:
            shape = layer.build(shape)
        self.output_shape = shape

    def weighted_layers(self) -> List[Tuple[int, WeightedLayer]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if layer.is_weighted]

    def attach_gate(self, index: int, tgl: TrainableGateLayer) -> None:
        """Attache une TGL à la couche pondérée `index`"""
        layer = self.layers[index]
        if not layer.is_weighted:
            raise ArgumentError(f"{layer.name}: seules les couches denses ou convolutives portent une TGL")
        expected = {
            Granularity.CHANNEL: layer.n_out,
            Granularity.WEIGHT: layer.weight.size,
            Granularity.BLOCK: 1,
        }[tgl.granularity]
        if tgl.count != expected:
            raise DimensionError(
                f"{layer.name}: {tgl.count} portes pour une granularité "
                f"'{tgl.granularity.value}' qui en attend {expected}"
            )
        self.gates[index] = tgl
        layer.prunable = tgl.granularity in (Granularity.CHANNEL, Granularity.BLOCK)

    def attach_input_gate(self, tgl: TrainableGateLayer) -> None:
        if tgl.granularity is not Granularity.CHANNEL:
            raise ArgumentError("La porte d'entrée est une porte canal")
        features = self.effective_input_shape[0]
        if tgl.count != features:
            raise DimensionError(f"Porte d'entrée à {tgl.count} portes pour {features} variables")
        self.input_gate = tgl
        self.input_prunable = True

    def gate_items(self) -> List[Tuple[str, TrainableGateLayer]]:
        """(nom, TGL) de chaque porte, l'entrée en premier"""
        items = [(INPUT_KEY, self.input_gate)] if self.input_gate is not None else []
        items += [(self.layers[i].name, tgl) for i, tgl in sorted(self.gates.items())]
        return items

    def theta_parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def gate_parameters(self) -> List[Parameter]:
        """Poids de portes, chaque groupe partagé compté une fois"""
        seen, params = set(), []
        for _, tgl in self.gate_items():
            if id(tgl.weights) not in seen:
                seen.add(id(tgl.weights))
                params.append(tgl.weights)
        return params

    def parameters(self) -> List[Parameter]:
        return self.theta_parameters() + self.gate_parameters()

    def forward(self, x, tape: Optional[Tape] = None) -> Tensor:
        """
        Passage avant ; sans bande, tous les paramètres sont évalués comme constantes

        Args:
            x: lot (N, *input_shape)
            tape: bande active
        """
        if tape is None:
            tape = Tape(frozen=self.parameters())
        h = ad.as_tensor(x)
        if tuple(h.shape[1:]) != self.input_shape:
            raise DimensionError(f"Lot {h.shape} pour un modèle d'entrée {self.input_shape}")
        if self.input_selection is not None:
            h = ad.take_channels(h, self.input_selection)
        if self.input_gate is not None:
            h = tgl_forward(h, self.input_gate, tape)

        for index, layer in enumerate(self.layers):
            if not layer.is_weighted:
                h = layer.apply(h)
                continue
            tgl = self.gates.get(index)
            kernel = tape.watch(layer.weight)
            if tgl is not None and tgl.granularity is Granularity.WEIGHT:
                kernel = weight_gate_forward(kernel, tgl, tape)
            bias = tape.watch(layer.bias) if layer.bias is not None else None
            h = layer.apply(h, kernel, bias)
            if tgl is not None and tgl.granularity is not Granularity.WEIGHT:
                h = tgl_forward(h, tgl, tape)
        return h

    def predict(self, x) -> np.ndarray:
        return self.forward(x).numpy()

    def describe(self) -> Dict:
        return {
            "input_shape": list(self.input_shape),
            "input_selection": self.input_selection,
            "input_prunable": self.input_prunable,
            "layers": [layer.describe() for layer in self.layers],
        }


# ====== Élagage structurel ======

@dataclass
class PruneResult:
    """Modèle compact et nombre de canaux par couche"""
    model: GatedModel
    report: List[Dict] = field(default_factory=list)


def _consumer(layers: Sequence[Layer], start: int) -> Tuple[Optional[int], bool]:
    """Prochaine couche pondérée après `start` et présence d'un Flatten entre les deux"""
    flattened = False
    for j in range(start + 1, len(layers)):
        if layers[j].kind is LayerKind.FLATTEN:
            flattened = True
        elif layers[j].is_weighted:
            return j, flattened
    return None, flattened


def _input_rows(keep: np.ndarray, spatial: int) -> np.ndarray:
    # après Flatten, le canal c occupe les lignes c·spatial .. c·spatial + spatial − 1
    return (keep[:, None] * spatial + np.arange(spatial)[None, :]).reshape(-1)


def _slice_inputs(layer: WeightedLayer, weight: np.ndarray, keep: np.ndarray, spatial: int) -> np.ndarray:
    if layer.kind is LayerKind.DENSE:
        return weight[_input_rows(keep, spatial), :]
    return weight[:, keep]


def hard_prune(model: GatedModel) -> PruneResult:
    """
    Retire physiquement les canaux dont la porte est fermée

    Les sorties des couches à porte canal sont découpées ainsi que les entrées de
    la couche pondérée suivante. Une porte de bloc ouverte disparaît. Les TGL sont
    supprimées.

    Raises:
        UnprunableGateError: porte par poids (aucun canal à retirer)
        DegenerateModelError: couche (ou entrée) sans canal actif, bloc fermé
    """
    weight_gated = [model.layers[i].name for i, tgl in sorted(model.gates.items())
                    if tgl.granularity is Granularity.WEIGHT]
    if weight_gated:
        raise UnprunableGateError(f"Portes par poids non élagables: {', '.join(weight_gated)}")

    weights = {i: layer.weight.value.copy() for i, layer in model.weighted_layers()}
    biases = {i: layer.bias.value.copy() for i, layer in model.weighted_layers() if layer.bias is not None}
    n_in = {i: layer.n_in for i, layer in model.weighted_layers()}
    n_out = {i: layer.n_out for i, layer in model.weighted_layers()}
    report: List[Dict] = []
    input_selection = model.input_selection

    if model.input_gate is not None:
        keep = np.flatnonzero(active_mask(model.input_gate))
        total = model.input_gate.count
        if keep.size == 0:
            raise DegenerateModelError("Aucune variable d'entrée active")
        base = np.arange(model.effective_input_shape[0]) if input_selection is None else np.asarray(input_selection)
        input_selection = [int(i) for i in base[keep]]
        first, flattened = _consumer(model.layers, -1)
        if first is not None:
            spatial = int(np.prod(model.effective_input_shape[1:])) if flattened else 1
            weights[first] = _slice_inputs(model.layers[first], weights[first], keep, spatial)
            n_in[first] = keep.size * spatial if model.layers[first].kind is LayerKind.DENSE else keep.size
        report.append({"layer": INPUT_KEY, "kind": "input", "channels_before": total, "channels_after": int(keep.size)})

    for index, tgl in sorted(model.gates.items()):
        layer = model.layers[index]
        mask = active_mask(tgl)
        if tgl.granularity is Granularity.BLOCK:
            if mask.sum() == 0:
                raise DegenerateModelError(f"{layer.name}: bloc fermé")
            report.append({"layer": layer.name, "kind": "block", "channels_before": layer.n_out,
                           "channels_after": layer.n_out})
            continue

        keep = np.flatnonzero(mask)
        if keep.size == 0:
            raise DegenerateModelError(f"{layer.name}: aucun canal actif")
        weights[index] = weights[index][:, keep] if layer.kind is LayerKind.DENSE else weights[index][keep]
        if index in biases:
            biases[index] = biases[index][keep]
        n_out[index] = keep.size
        consumer, flattened = _consumer(model.layers, index)
        if consumer is not None:
            spatial = layer.out_spatial if flattened else 1
            weights[consumer] = _slice_inputs(model.layers[consumer], weights[consumer], keep, spatial)
            n_in[consumer] = keep.size * spatial if model.layers[consumer].kind is LayerKind.DENSE else keep.size
        report.append({"layer": layer.name, "kind": "channel", "channels_before": layer.n_out,
                       "channels_after": int(keep.size)})

    layers: List[Layer] = []
    for index, layer in enumerate(model.layers):
        if layer.kind is LayerKind.DENSE:
            new = Dense(layer.name, n_in[index], n_out[index], bias=layer.has_bias,
                        weight=weights[index], bias_value=biases.get(index))
        elif layer.kind is LayerKind.CONV2D:
            new = Conv2D(layer.name, n_in[index], n_out[index], kernel_size=layer.kernel_size,
                         stride=layer.stride, padding=layer.padding, bias=layer.has_bias,
                         weight=weights[index], bias_value=biases.get(index))
        elif layer.kind is LayerKind.ACTIVATION:
            new = Activation(layer.name, layer.fn)
        else:
            new = Flatten(layer.name)
        new.prunable = layer.prunable
        layers.append(new)

    compact = GatedModel(model.input_shape, layers, input_selection=input_selection,
                         input_prunable=model.input_prunable)
    for row in report:
        logger.info(f"✂️ {row['layer']}: {row['channels_before']} -> {row['channels_after']} canaux")
    return PruneResult(model=compact, report=report)
