#!/usr/bin/env python3
"""
🔎 Oracle exhaustif de sélection de variables
Énumère tous les sous-ensembles de taille ≤ k et résout les moindres carrés
(avec ordonnée à l'origine) sur chacun.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .autodiff import ArgumentError
from .datasets import MAX_PLANTED_FEATURES, Dataset

logger = logging.getLogger(__name__)


@dataclass
class OracleResult:
    subset: Tuple[int, ...]
    loss: float
    evaluated: int = 0
    losses: List[Tuple[Tuple[int, ...], float]] = field(default_factory=list)


def subset_loss(x: np.ndarray, y: np.ndarray, subset: Tuple[int, ...]) -> float:
    """Erreur quadratique moyenne des moindres carrés sur `subset` (sous-ensemble vide : variance de y)"""
    design = np.hstack([np.ones((x.shape[0], 1)), x[:, list(subset)]])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = y - design @ coef
    return float(np.mean(residual * residual))


def brute_force_select(dataset: Dataset, budget: int) -> OracleResult:
    """
    Meilleur sous-ensemble de taille ≤ budget

    Raises:
        ArgumentError: plus de 12 variables ou budget négatif
    """
    x = np.asarray(dataset.x, dtype=np.float64)
    y = np.asarray(dataset.y, dtype=np.float64).reshape(-1)
    n_features = x.shape[1]
    if n_features > MAX_PLANTED_FEATURES:
        raise ArgumentError(f"{n_features} variables : l'énumération est limitée à {MAX_PLANTED_FEATURES}")
    if budget < 0:
        raise ArgumentError(f"Budget négatif: {budget}")

    best = OracleResult(subset=(), loss=float("inf"))
    for k in range(min(budget, n_features) + 1):
        for subset in itertools.combinations(range(n_features), k):
            loss = subset_loss(x, y, subset)
            best.losses.append((subset, loss))
            best.evaluated += 1
            if loss < best.loss:
                best.subset, best.loss = subset, loss
            assert best.loss <= loss

    logger.info(f"🔎 Oracle: {best.evaluated} sous-ensembles, meilleur {list(best.subset)} (perte {best.loss:.6g})")
    return best
