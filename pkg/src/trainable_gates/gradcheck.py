#!/usr/bin/env python3
"""
🩺 Vérification des gradients par différences finies centrées
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import ArgumentError, Parameter, ParamRole, Tape, Tensor, backward

logger = logging.getLogger(__name__)

LossFn = Callable[[Tape], Tensor]

REL_FLOOR = 1e-7


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


@dataclass
class GradcheckResult:
    max_rel_error: float = 0.0
    per_param: Dict[str, float] = field(default_factory=dict)
    checked: int = 0
    skipped: int = 0
    worst: Optional[str] = None

    def passed(self, tol: float = 1e-4) -> bool:
        return bool(self.max_rel_error < tol)


def _near_discontinuity(w: float, M: int, h: float) -> bool:
    # dents de scie discontinues aux multiples de 1/M (dont w = 0)
    frac = M * w - np.floor(M * w)
    margin = 2.0 * M * h
    return frac < margin or frac > 1.0 - margin


def check_gradients(loss_fn: LossFn, params: Sequence[Parameter], eps: float = 1e-5,
                    gate_m: Optional[Dict[str, int]] = None, max_elements: Optional[int] = None,
                    seed: int = 0) -> GradcheckResult:
    """
    Compare la rétropropagation aux différences finies centrées

    Pour les poids de porte, le pas vaut min(eps, 0.01/M) et les éléments trop
    proches d'une discontinuité de la dent de scie sont ignorés.

    Args:
        loss_fn: construit la perte scalaire sur la bande fournie
        params: paramètres à vérifier
        gate_m: granularité M par nom de poids de porte
        max_elements: nombre d'éléments tirés au hasard par paramètre
    """
    if eps <= 0:
        raise ArgumentError(f"Pas non positif: {eps}")
    gate_m = gate_m or {}
    all_params = list(params)

    tape = Tape()
    for p in all_params:
        tape.watch(p)
    loss = loss_fn(tape)
    backward(tape, loss)
    analytic = {p.name: tape.grad(p).copy() for p in all_params}

    def evaluate() -> float:
        return loss_fn(Tape(frozen=all_params)).item()

    rng = np.random.default_rng(seed)
    result = GradcheckResult()
    for p in all_params:
        is_gate = p.role is ParamRole.GATE
        M = gate_m.get(p.name)
        if is_gate and M is None:
            raise ArgumentError(f"Granularité M inconnue pour la porte {p.name}")
        h = min(eps, 0.01 / M) if is_gate else eps
        flat_indices = np.arange(p.size)
        if max_elements is not None and p.size > max_elements:
            flat_indices = np.sort(rng.choice(p.size, size=max_elements, replace=False))

        worst = 0.0
        for flat in flat_indices:
            idx = np.unravel_index(int(flat), p.shape) if p.shape else ()
            original = float(p.value[idx])
            if is_gate and _near_discontinuity(original, M, h):
                result.skipped += 1
                continue
            p.value[idx] = original + h
            plus = evaluate()
            p.value[idx] = original - h
            minus = evaluate()
            p.value[idx] = original
            numeric = (plus - minus) / (2.0 * h)
            err = relative_error(float(analytic[p.name][idx]), numeric)
            worst = max(worst, err)
            result.checked += 1
        result.per_param[p.name] = worst
        if worst >= result.max_rel_error:
            result.max_rel_error, result.worst = worst, p.name

    logger.info(f"🩺 Vérification: {result.checked} éléments, {result.skipped} ignorés, "
                f"erreur relative max {result.max_rel_error:.3e} ({result.worst})")
    return result


def gate_granularities(items: List) -> Dict[str, int]:
    """Carte nom du poids de porte -> M à partir de paires (nom, TGL)"""
    return {tgl.weights.name: tgl.spec.M for _, tgl in items}
