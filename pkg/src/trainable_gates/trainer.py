#!/usr/bin/env python3
"""
🏋️ Optimiseurs et boucles d'entraînement
Deux régimes : sélection seule (θ gelé, seuls les poids de porte w bougent) et
élagage conjoint avec ajustement de θ. Un troisième mode entraîne θ seul
(pré-entraînement, modèle de référence sans portes).
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import autodiff as ad
from .autodiff import ArgumentError, DimensionError, NonFiniteError, Parameter, Tape, Tensor, TGFError
from .budget import CostKind, CostModel, RegularizerConfig, RegularizerStage, gated_cost, reg_loss
from .datasets import Dataset
from .layers import GatedModel, active_mask

logger = logging.getLogger(__name__)


class DivergenceError(TGFError):
    """Perte NaN/Inf pendant l'entraînement"""
    pass


class OptimizerKind(Enum):
    SGD_MOMENTUM = "sgd_momentum"
    ADAM = "adam"


class TrainMode(Enum):
    SELECTION_ONLY = "selection_only"
    JOINT = "joint"
    THETA_ONLY = "theta_only"


class TaskLoss(Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


# ====== Optimiseurs ======

class OptimizerConfig(BaseModel):
    """Hyperparamètres de l'optimiseur (Adam lr 1e-4 par défaut)"""
    model_config = ConfigDict(extra="forbid")

    kind: OptimizerKind = OptimizerKind.ADAM
    lr: float = Field(default=1e-4, gt=0.0)
    momentum: float = Field(default=0.0, ge=0.0, lt=1.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)


@dataclass
class OptimizerState:
    """État de l'optimiseur : tampons de moments par paramètre (clé = nom)"""
    kind: OptimizerKind = OptimizerKind.ADAM
    lr: float = 1e-4
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    buffers: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if self.lr <= 0:
            raise ArgumentError(f"Taux d'apprentissage non positif: {self.lr}")
        for label, beta in (("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= beta < 1.0:
                raise ArgumentError(f"{label} hors de [0, 1): {beta}")
        if self.eps <= 0:
            raise ArgumentError(f"eps non positif: {self.eps}")

    @classmethod
    def from_config(cls, cfg: OptimizerConfig) -> "OptimizerState":
        return cls(kind=cfg.kind, lr=cfg.lr, momentum=cfg.momentum,
                   beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    def _buffer(self, param: Parameter, slot: str) -> np.ndarray:
        slots = self.buffers.setdefault(param.name, {})
        if slot not in slots:
            slots[slot] = np.zeros_like(param.value)
        return slots[slot]


def _check_grad(param: Parameter, grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad)
    if grad.shape != param.shape:
        raise DimensionError(f"{param.name}: gradient {grad.shape} pour un paramètre {param.shape}")
    return grad


def sgd_update(param: Parameter, grad: np.ndarray, state: OptimizerState) -> np.ndarray:
    """SGD avec moment classique : v ← μ·v + g ; p ← p − lr·v"""
    grad = _check_grad(param, grad)
    velocity = state._buffer(param, "velocity")
    velocity = state.momentum * velocity + grad
    state.buffers[param.name]["velocity"] = velocity
    state.steps[param.name] = state.steps.get(param.name, 0) + 1
    param.value = (param.value - state.lr * velocity).astype(param.value.dtype)
    return param.value


def adam_update(param: Parameter, grad: np.ndarray, state: OptimizerState) -> np.ndarray:
    """Adam avec correction de biais"""
    grad = _check_grad(param, grad)
    t = state.steps.get(param.name, 0) + 1
    state.steps[param.name] = t
    m = state.beta1 * state._buffer(param, "m") + (1.0 - state.beta1) * grad
    v = state.beta2 * state._buffer(param, "v") + (1.0 - state.beta2) * grad * grad
    state.buffers[param.name]["m"] = m
    state.buffers[param.name]["v"] = v
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    param.value = (param.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.value.dtype)
    return param.value


def apply_update(param: Parameter, grad: np.ndarray, state: OptimizerState) -> np.ndarray:
    if state.kind is OptimizerKind.ADAM:
        return adam_update(param, grad, state)
    return sgd_update(param, grad, state)


# ====== Configuration d'entraînement ======

class TrainConfig(BaseModel):
    """Régime d'entraînement, budget et optimiseur"""
    model_config = ConfigDict(extra="forbid")

    mode: TrainMode = TrainMode.JOINT
    iterations: int = Field(..., gt=0)
    batch_size: int = Field(default=32, ge=1)
    regularizer: RegularizerConfig
    cost_kind: CostKind = CostKind.FLOPS
    task_loss: TaskLoss = TaskLoss.MSE
    seed: int = 0
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    lr_halving_at: List[int] = Field(default_factory=list)
    regularizer_schedule: List[RegularizerStage] = Field(default_factory=list)
    clip_norm: Optional[float] = Field(default=None, gt=0.0)
    log_every: int = Field(default=100, ge=1)

    @field_validator("lr_halving_at")
    @classmethod
    def validate_halving(cls, v: List[int]) -> List[int]:
        if any(i <= 0 for i in v):
            raise ValueError("Les itérations de division du taux doivent être positives")
        return sorted(set(v))

    @field_validator("regularizer_schedule")
    @classmethod
    def validate_stages(cls, v: List[RegularizerStage]) -> List[RegularizerStage]:
        starts = [stage.at for stage in v]
        if len(set(starts)) != len(starts):
            raise ValueError(f"Étapes du régulariseur en double: {starts}")
        return sorted(v, key=lambda stage: stage.at)

    @model_validator(mode="after")
    def validate_schedule(self) -> "TrainConfig":
        if any(i > self.iterations for i in self.lr_halving_at):
            logger.warning("⚠️ Division du taux prévue après la dernière itération")
        if any(stage.at > self.iterations for stage in self.regularizer_schedule):
            logger.warning("⚠️ Étape du régulariseur prévue après la dernière itération")
        return self

    def regularizer_at(self, iteration: int) -> RegularizerConfig:
        """ρ et λ en vigueur à l'itération donnée"""
        regularizer = self.regularizer
        for stage in self.regularizer_schedule:
            if stage.at <= iteration:
                regularizer = stage.apply(regularizer)
        return regularizer


# ====== Pertes ======

@dataclass
class LossTerms:
    total: Tensor
    task: Tensor
    reg: Tensor
    cost: Optional[Tensor] = None


def task_loss_value(pred: Tensor, y: np.ndarray, kind: Union[TaskLoss, str]) -> Tensor:
    kind = TaskLoss(kind)
    if kind is TaskLoss.CROSS_ENTROPY:
        return ad.softmax_cross_entropy(pred, y)
    y = np.asarray(y)
    if y.ndim == 1 and pred.shape == (y.shape[0], 1):
        y = y.reshape(-1, 1)
    return ad.mse(pred, y)


def loss_terms(model: GatedModel, batch: Tuple[np.ndarray, np.ndarray], regularizer: RegularizerConfig,
               cost_model: CostModel, tape: Tape, task_loss: Union[TaskLoss, str] = TaskLoss.MSE,
               use_regularizer: bool = True) -> LossTerms:
    """Perte de la tâche, régulariseur de budget et coût sous portes"""
    x, y = batch
    task = task_loss_value(model.forward(x, tape), y, task_loss)
    if not use_regularizer or regularizer.lam == 0 or not model.gate_items():
        zero = ad.mul(task, 0.0)
        return LossTerms(total=task, task=task, reg=zero)
    cost = gated_cost(model, cost_model.kind, tape)
    reg = reg_loss(cost, cost_model.total, regularizer, tape)
    return LossTerms(total=ad.add(task, reg), task=task, reg=reg, cost=cost)


def loss_total(model: GatedModel, batch: Tuple[np.ndarray, np.ndarray], regularizer: RegularizerConfig,
               cost_model: CostModel, tape: Tape, task_loss: Union[TaskLoss, str] = TaskLoss.MSE) -> Tensor:
    """L(θ, w) + λ·(ρ − C(w)/C_tot)², un seul scalaire sur la bande"""
    return loss_terms(model, batch, regularizer, cost_model, tape, task_loss).total


# ====== Pas d'entraînement ======

@dataclass
class StepMetrics:
    iteration: int
    task_loss: float
    reg_loss: float
    cost_ratio: float
    active: Dict[str, int] = field(default_factory=dict)
    lr: float = 0.0


def active_counts(model: GatedModel) -> Dict[str, int]:
    return {name: int(active_mask(tgl).sum()) for name, tgl in model.gate_items()}


def trainable_parameters(model: GatedModel, mode: Union[TrainMode, str]) -> List[Parameter]:
    mode = TrainMode(mode)
    if mode is TrainMode.SELECTION_ONLY:
        return model.gate_parameters()
    if mode is TrainMode.THETA_ONLY:
        return model.theta_parameters()
    return model.parameters()


def _clip(grads: List[np.ndarray], clip_norm: Optional[float]) -> List[np.ndarray]:
    if clip_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= clip_norm or norm == 0.0:
        return grads
    scale = clip_norm / norm
    return [g * scale for g in grads]


def train_step(model: GatedModel, batch: Tuple[np.ndarray, np.ndarray], opt: OptimizerState,
               cfg: TrainConfig, cost_model: Optional[CostModel] = None, iteration: int = 0,
               regularizer: Optional[RegularizerConfig] = None) -> StepMetrics:
    """
    Passage avant, rétropropagation et mise à jour

    En mode selection_only, θ n'est pas surveillé par la bande et reste intact ;
    en mode theta_only, les portes sont gelées et λ est ignoré. `regularizer`
    remplace cfg.regularizer (étapes du calendrier).

    Raises:
        DivergenceError: perte non finie
    """
    mode = TrainMode(cfg.mode)
    if cost_model is None:
        cost_model = CostModel.for_model(model, cfg.cost_kind)
    params = trainable_parameters(model, mode)
    if not params:
        raise ArgumentError(f"Aucun paramètre à entraîner en mode {mode.value}")
    frozen = [p for p in model.parameters() if all(p is not q for q in params)]
    tape = Tape(frozen=frozen)
    regularizer = regularizer if regularizer is not None else cfg.regularizer

    try:
        terms = loss_terms(model, batch, regularizer, cost_model, tape, cfg.task_loss,
                           use_regularizer=mode is not TrainMode.THETA_ONLY)
    except NonFiniteError as e:
        raise DivergenceError(f"Itération {iteration}: {e}") from e
    total = terms.total.item()
    if not math.isfinite(total):
        raise DivergenceError(f"Itération {iteration}: perte non finie ({total})")

    ad.backward(tape, terms.total)
    grads = _clip([tape.grad(p) for p in params], cfg.clip_norm)
    for param, grad in zip(params, grads):
        apply_update(param, grad, opt)

    cost_ratio = terms.cost.item() / cost_model.total if terms.cost is not None else cost_model.ratio(model)
    return StepMetrics(
        iteration=iteration,
        task_loss=terms.task.item(),
        reg_loss=terms.reg.item(),
        cost_ratio=cost_ratio,
        active=active_counts(model),
        lr=opt.lr,
    )


# ====== Flux de métriques ======

class MetricsWriter:
    """
    Écrit les métriques en CSV (flottants via repr, reproductibles au bit près)

    Colonnes : iteration, task_loss, reg_loss, cost_ratio, active_<porte>...
    """

    def __init__(self, path: Union[str, Path], gate_names: Sequence[str]):
        self.path = Path(path)
        self.gate_names = list(gate_names)
        self._file = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file)
        self._writer.writerow(["iteration", "task_loss", "reg_loss", "cost_ratio"]
                              + [f"active_{name}" for name in self.gate_names])

    def write(self, metrics: StepMetrics) -> None:
        self._writer.writerow([metrics.iteration, repr(metrics.task_loss), repr(metrics.reg_loss),
                               repr(metrics.cost_ratio)]
                              + [metrics.active.get(name, "") for name in self.gate_names])

    def flush(self) -> None:
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ====== Boucle ======

@dataclass
class History:
    """Métriques journalisées et résumé par époque"""
    records: List[StepMetrics] = field(default_factory=list)
    epochs: List[Dict[str, float]] = field(default_factory=list)

    @property
    def last(self) -> Optional[StepMetrics]:
        return self.records[-1] if self.records else None

    def __len__(self) -> int:
        return len(self.records)


def fit(model: GatedModel, dataset: Dataset, cfg: TrainConfig, iterations: Optional[int] = None,
        opt: Optional[OptimizerState] = None, metrics: Optional[MetricsWriter] = None,
        label: str = "train") -> History:
    """
    Boucle d'entraînement déterministe

    Le jeu est rebrassé à chaque époque avec la graine ; seuls les lots complets
    sont utilisés. Une métrique est enregistrée toutes les `log_every` itérations
    ainsi qu'à la dernière.

    Args:
        iterations: remplace cfg.iterations (0 autorisé : historique vide)
        opt: état d'optimiseur à reprendre
        metrics: flux CSV optionnel
    """
    n_iter = cfg.iterations if iterations is None else iterations
    history = History()
    if n_iter <= 0:
        return history
    n = len(dataset)
    if n == 0:
        raise ArgumentError("Jeu de données vide")
    if cfg.batch_size > n:
        raise ArgumentError(f"Lot de {cfg.batch_size} pour {n} échantillons")

    rng = np.random.default_rng(cfg.seed)
    opt = opt if opt is not None else OptimizerState.from_config(cfg.optimizer)
    cost_model = CostModel.for_model(model, cfg.cost_kind)
    per_epoch = n // cfg.batch_size
    halving = set(cfg.lr_halving_at)
    stages = {stage.at for stage in cfg.regularizer_schedule}
    regularizer = cfg.regularizer_at(1)
    logger.info(f"🚀 [{label}] {n_iter} itérations, mode {TrainMode(cfg.mode).value}, "
                f"C_tot={cost_model.total} ({cost_model.kind.value})")

    order = rng.permutation(n)
    epoch_losses: List[float] = []
    for it in range(1, n_iter + 1):
        slot = (it - 1) % per_epoch
        if slot == 0 and it > 1:
            history.epochs.append({"epoch": len(history.epochs) + 1,
                                   "task_loss": float(np.mean(epoch_losses))})
            epoch_losses = []
            order = rng.permutation(n)
        if it in halving:
            opt.lr /= 2.0
            logger.info(f"📉 [{label}] taux d'apprentissage divisé: {opt.lr:g}")
        if it in stages and it > 1:
            regularizer = cfg.regularizer_at(it)
            logger.info(f"🎚️ [{label}] régulariseur: ρ={regularizer.rho:g} λ={regularizer.lam:g}")

        idx = order[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
        step = train_step(model, (dataset.x[idx], dataset.y[idx]), opt, cfg, cost_model, it, regularizer)
        epoch_losses.append(step.task_loss)

        if it % cfg.log_every == 0 or it == n_iter:
            history.records.append(step)
            if metrics is not None:
                metrics.write(step)
                metrics.flush()
            logger.info(f"🔁 [{label}] it {it}: tâche={step.task_loss:.6g} rég={step.reg_loss:.6g} "
                        f"ratio={step.cost_ratio:.4f} actifs={step.active}")

    if epoch_losses:
        history.epochs.append({"epoch": len(history.epochs) + 1, "task_loss": float(np.mean(epoch_losses))})
    return history


@dataclass
class EvalResult:
    loss: float
    accuracy: Optional[float] = None


def evaluate(model: GatedModel, dataset: Dataset, task_loss: Union[TaskLoss, str] = TaskLoss.MSE,
             batch_size: int = 256) -> EvalResult:
    """Perte moyenne (et exactitude en classification) sans bande d'entraînement"""
    task_loss = TaskLoss(task_loss)
    n = len(dataset)
    if n == 0:
        raise ArgumentError("Jeu de données vide")
    loss_sum, correct = 0.0, 0
    for start in range(0, n, batch_size):
        x, y = dataset.x[start:start + batch_size], dataset.y[start:start + batch_size]
        pred = model.forward(x)
        loss_sum += task_loss_value(pred, y, task_loss).item() * x.shape[0]
        if task_loss is TaskLoss.CROSS_ENTROPY:
            correct += int(np.sum(np.argmax(pred.data, axis=1) == y))
    accuracy = correct / n if task_loss is TaskLoss.CROSS_ENTROPY else None
    return EvalResult(loss=loss_sum / n, accuracy=accuracy)
