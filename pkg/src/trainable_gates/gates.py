#!/usr/bin/env python3
"""
🚪 Fonctions de porte entraînables
Fonction de mise en forme du gradient, porte binaire, porte entraînable TG et
catalogue des formes de dérivée.

    s(w)  = (M·w − ⌊M·w⌋) / M
    TG(w) = b(w) + s(w)·g(w)        avec b(w) = 1[w > 0]
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np

from .autodiff import ArgumentError, DimensionError, Parameter, ParamRole, Tape, Tensor, custom_grad

logger = logging.getLogger(__name__)

DEFAULT_M = 100000

ArrayLike = Union[float, np.ndarray]


class ShapeKind(Enum):
    """Catalogue des formes de dérivée g"""
    CONSTANT_ONE = "constant_one"
    SIGMOID_PRIME = "sigmoid_prime"
    TANH_PRIME = "tanh_prime"


@dataclass(frozen=True)
class ShapeFunction:
    """Forme de dérivée g et sa dérivée analytique g′ (bornées toutes deux)"""
    kind: ShapeKind
    g: Callable[[ArrayLike], ArrayLike]
    g_prime: Callable[[ArrayLike], ArrayLike]


def _sigmoid(w):
    # forme stable pour les grands |w|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(w, dtype=np.float64)))


def _sigmoid_prime(w):
    s = _sigmoid(w)
    return s * (1.0 - s)


def _sigmoid_second(w):
    s = _sigmoid(w)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def _tanh_prime(w):
    t = np.tanh(np.asarray(w, dtype=np.float64))
    return 1.0 - t * t


def _tanh_second(w):
    t = np.tanh(np.asarray(w, dtype=np.float64))
    return -2.0 * t * (1.0 - t * t)


def _ones(w):
    return np.ones_like(np.asarray(w, dtype=np.float64))


def _zeros(w):
    return np.zeros_like(np.asarray(w, dtype=np.float64))


_CATALOG = {
    ShapeKind.CONSTANT_ONE: (_ones, _zeros),
    ShapeKind.SIGMOID_PRIME: (_sigmoid_prime, _sigmoid_second),
    ShapeKind.TANH_PRIME: (_tanh_prime, _tanh_second),
}


def make_shape(kind: Union[ShapeKind, str]) -> ShapeFunction:
    """Construit une forme de dérivée du catalogue"""
    try:
        kind = ShapeKind(kind)
    except ValueError:
        raise ArgumentError(f"Forme de dérivée inconnue: {kind}")
    g, g_prime = _CATALOG[kind]
    return ShapeFunction(kind=kind, g=g, g_prime=g_prime)


def _check_finite(w: ArrayLike) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ArgumentError("Poids de porte non fini")
    return w


def _scalar_or_array(value: np.ndarray, like) -> ArrayLike:
    return float(value) if np.ndim(like) == 0 else value


def grad_shaping(w: ArrayLike, M: int) -> ArrayLike:
    """
    Fonction en dents de scie s(w) = (M·w − ⌊M·w⌋)/M, à valeurs dans [0, 1/M)

    Sa pente vaut 1 partout où elle est dérivable.
    """
    if M < 1:
        raise ArgumentError(f"Granularité M invalide: {M}")
    arr = _check_finite(w)
    mw = M * arr
    return _scalar_or_array((mw - np.floor(mw)) / M, w)


def step_gate(w: ArrayLike) -> ArrayLike:
    """Porte binaire b(w) = 1[w > 0] ; b(0) = 0"""
    arr = np.asarray(w, dtype=np.float64)
    out = (arr > 0).astype(np.float64)
    return _scalar_or_array(out, w)


@dataclass
class GateSpec:
    """
    Définition d'une porte entraînable

    Attributes:
        weights: vecteur de poids w, un par unité commandée
        M: granularité de la dent de scie (défaut 10^5)
        shape_kind: forme de dérivée g
        tie_value: sortie de la porte en w = 0 (fixée à 0)
    """
    weights: Parameter
    M: int = DEFAULT_M
    shape_kind: ShapeKind = ShapeKind.CONSTANT_ONE
    tie_value: float = 0.0

    def __post_init__(self):
        self.shape_kind = ShapeKind(self.shape_kind)
        if self.M < 1:
            raise ArgumentError(f"Granularité M invalide: {self.M}")
        if self.tie_value != 0.0:
            raise ArgumentError("La valeur en w = 0 est fixée à 0")
        if self.weights.value.ndim != 1:
            raise DimensionError(f"Vecteur de poids attendu, reçu {self.weights.shape}")
        self.weights.role = ParamRole.GATE

    @property
    def shape(self) -> ShapeFunction:
        return make_shape(self.shape_kind)

    @property
    def count(self) -> int:
        return self.weights.size


def trainable_gate(w: ArrayLike, spec: GateSpec) -> ArrayLike:
    """TG(w) = b(w) + s(w)·g(w), à moins de sup|g|/M de b(w)"""
    arr = _check_finite(w)
    value = step_gate(arr) + grad_shaping(arr, spec.M) * spec.shape.g(arr)
    return _scalar_or_array(value, w)


def trainable_gate_backward(w: ArrayLike, upstream: ArrayLike, spec: GateSpec) -> ArrayLike:
    """
    Dérivée exacte de TG sur ses morceaux dérivables : upstream·(g(w) + s(w)·g′(w))

    Les points de discontinuité de la dent de scie (mesure nulle) sont évalués par
    la même formule.
    """
    arr = _check_finite(w)
    shape = spec.shape
    local = shape.g(arr) + grad_shaping(arr, spec.M) * shape.g_prime(arr)
    value = np.asarray(upstream, dtype=np.float64) * local
    return _scalar_or_array(value, w)


def gate_tensor(w: Tensor, spec: GateSpec, tape: Optional[Tape]) -> Tensor:
    """
    Applique TG élément par élément à un tenseur de poids

    Le passage arrière suit trainable_gate_backward (et non la dérivée nulle de b).
    """
    if tape is None:
        raise ArgumentError("gate_tensor requiert une bande active")
    w_data = np.asarray(w.data, dtype=np.float64)
    forward_value = trainable_gate(w_data, spec)

    def backward(upstream: np.ndarray):
        grad = trainable_gate_backward(w_data, upstream, spec)
        return [np.asarray(grad, dtype=w.data.dtype).reshape(w.shape)]

    return custom_grad(np.asarray(forward_value, dtype=w.data.dtype), backward, [w])


def hard_gate_values(spec: GateSpec) -> np.ndarray:
    """Masque 0/1 des poids courants"""
    return np.asarray(step_gate(spec.weights.value), dtype=np.float64)
