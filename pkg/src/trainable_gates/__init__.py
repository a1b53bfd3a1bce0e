"""
Trainable Gates - Package d'initialisation
Portes entraînables, élagage de canaux sous budget de calcul et moteur de
différentiation automatique NumPy.
"""

__version__ = "1.0.0"
__author__ = "Trainable Gates Team"
__description__ = "Trainable gate functions and budget-constrained channel pruning"

from .autodiff import (
    ArgumentError, DimensionError, GradientShapeError, NonFiniteError, Parameter, Tape, Tensor,
    TGFError, backward, custom_grad,
)
from .gates import GateSpec, ShapeKind, grad_shaping, make_shape, step_gate, trainable_gate
from .layers import GatedModel, Granularity, TrainableGateLayer, hard_prune

__all__ = [
    "ArgumentError", "DimensionError", "GradientShapeError", "NonFiniteError", "Parameter", "Tape",
    "Tensor", "TGFError", "backward", "custom_grad",
    "GateSpec", "ShapeKind", "grad_shaping", "make_shape", "step_gate", "trainable_gate",
    "GatedModel", "Granularity", "TrainableGateLayer", "hard_prune",
]
