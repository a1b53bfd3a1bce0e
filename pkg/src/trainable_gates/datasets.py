#!/usr/bin/env python3
"""
🗂️ Jeux de données
Jeux synthétiques (sinus, sous-ensemble planté, formes) et lecteur de fichiers IDX.
"""

import gzip
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .autodiff import ArgumentError, TGFError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_PLANTED_FEATURES = 12


class IdxParseError(TGFError):
    """Fichier IDX invalide ; `offset` indique l'octet fautif"""

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (octet {offset})")


@dataclass
class Dataset:
    """Échantillons x (N, ...) et cibles y (N, ...) ; `meta` garde la vérité terrain"""
    x: np.ndarray
    y: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ArgumentError(f"{self.x.shape[0]} entrées pour {self.y.shape[0]} cibles")

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def subset(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.x[start:stop], self.y[start:stop], dict(self.meta))


def gen_sine_dataset(n: int, x_range: Tuple[float, float] = (-math.pi, math.pi), seed: int = 0) -> Dataset:
    """Paires (x, sin x), x uniforme sur x_range"""
    if n < 1:
        raise ArgumentError(f"Nombre d'échantillons invalide: {n}")
    low, high = float(x_range[0]), float(x_range[1])
    if not high > low:
        raise ArgumentError(f"Intervalle vide: [{low}, {high}]")
    rng = np.random.default_rng(seed)
    x = rng.uniform(low, high, size=(n, 1))
    return Dataset(x=x, y=np.sin(x), meta={"source": "synthetic_sine", "x_range": [low, high]})


def gen_planted_dataset(n_features: int, k_relevant: int, n: int, noise: float = 0.01, seed: int = 0) -> Dataset:
    """
    y = somme de k variables désignées + bruit gaussien σ

    Les variables suivent N(0, 1) ; l'ensemble pertinent (trié) est conservé dans
    meta["relevant"].
    """
    if not 1 <= k_relevant <= n_features <= MAX_PLANTED_FEATURES:
        raise ArgumentError(
            f"Il faut 1 ≤ k ({k_relevant}) ≤ variables ({n_features}) ≤ {MAX_PLANTED_FEATURES}"
        )
    if n < 1:
        raise ArgumentError(f"Nombre d'échantillons invalide: {n}")
    if noise < 0:
        raise ArgumentError(f"Bruit négatif: {noise}")
    rng = np.random.default_rng(seed)
    relevant = sorted(int(i) for i in rng.choice(n_features, size=k_relevant, replace=False))
    x = rng.standard_normal((n, n_features))
    y = x[:, relevant].sum(axis=1, keepdims=True)
    if noise > 0:
        y = y + noise * rng.standard_normal((n, 1))
    return Dataset(x=x, y=y, meta={"source": "synthetic_planted", "relevant": relevant, "noise": noise})


def synthetic_shapes(n: int, n_classes: int = 10, size: int = 28, noise: float = 0.1, seed: int = 0,
                     template_seed: int = 1234) -> Dataset:
    """
    Images (N, 1, size, size) de motifs par classe bruités, étiquettes entières

    Les motifs sont des grilles 7×7 aléatoires agrandies, tirées avec
    `template_seed` pour que les jeux d'entraînement et de test partagent les classes.
    """
    if n < 1 or n_classes < 2:
        raise ArgumentError(f"Paramètres invalides: n={n}, classes={n_classes}")
    if size % 7 != 0:
        raise ArgumentError(f"Taille d'image non multiple de 7: {size}")
    templates = (np.random.default_rng(template_seed).random((n_classes, 7, 7)) > 0.5).astype(np.float64)
    block = np.ones((size // 7, size // 7))
    templates = np.stack([np.kron(t, block) for t in templates])

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, size=n)
    images = templates[labels] + noise * rng.standard_normal((n, size, size))
    images = np.clip(images, 0.0, 1.0)[:, None, :, :]
    return Dataset(x=images, y=labels.astype(np.int64), meta={"source": "synthetic_shapes", "classes": n_classes})


# ====== Format IDX ======

def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise IdxParseError(f"Lecture impossible: {e}", 0, str(path)) from e


def parse_idx(raw: bytes, expected_magic: int, path: Optional[str] = None) -> np.ndarray:
    """Décode un tableau IDX d'octets non signés (en-tête gros-boutiste)"""
    if len(raw) < 4:
        raise IdxParseError("En-tête tronqué", len(raw), path)
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxParseError(f"Nombre magique 0x{magic:08x} au lieu de 0x{expected_magic:08x}", 0, path)
    ndims = raw[3]
    header_end = 4 + 4 * ndims
    if len(raw) < header_end:
        raise IdxParseError("Dimensions tronquées", len(raw), path)
    dims = struct.unpack(f">{ndims}I", raw[4:header_end])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) < header_end + count:
        raise IdxParseError(f"Données tronquées: {count} octets attendus", len(raw), path)
    if len(raw) > header_end + count:
        logger.warning(f"⚠️ {path}: {len(raw) - header_end - count} octets en trop ignorés")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def read_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             limit: Optional[int] = None) -> Dataset:
    """
    Lit une paire de fichiers IDX (images 0x803, étiquettes 0x801)

    Les pixels sont ramenés dans [0, 1] ; les images ont la forme (N, 1, H, W).

    Raises:
        IdxParseError: nombre magique, troncature ou comptes incohérents
    """
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise IdxParseError(f"{images.shape[0]} images pour {labels.shape[0]} étiquettes", 4, str(labels_path))
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    logger.info(f"📥 {x.shape[0]} images {x.shape[2]}×{x.shape[3]} lues depuis {images_path}")
    return Dataset(x=x, y=labels.astype(np.int64), meta={"source": "idx_files"})
