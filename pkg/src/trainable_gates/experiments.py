#!/usr/bin/env python3
"""
🧪 Exécution des expériences
Recettes sine_selection, planted_features, cnn_budget et gradcheck_suite, écriture
des artefacts d'une exécution et verrouillage du répertoire de sortie.
Formats des artefacts décrits dans docs/FILE_FORMATS.md.
"""

import csv
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ParamRole, Tape, TGFError, backward, set_default_dtype
from .budget import (
    ConfigurationError, CostKind, CostModel, cost_report, format_cost_report, gated_cost_value,
    total_cost_static, write_cost_report_csv,
)
from .checkpoint import save_checkpoint
from .config import (
    DatasetSource, DatasetSpec, ExperimentConfig, ExperimentKind, build_model, dump_config,
    load_experiment_config, resolve_output_dir,
)
from .datasets import Dataset, gen_planted_dataset, gen_sine_dataset, read_idx, synthetic_shapes
from .gates import GateSpec, ShapeKind, gate_tensor, grad_shaping, make_shape, step_gate, trainable_gate
from .gradcheck import check_gradients, gate_granularities
from .layers import (
    DegenerateModelError, GatedModel, Relaxation, UnprunableGateError, active_mask, hard_prune,
)
from .oracle import brute_force_select
from .trainer import (
    DivergenceError, History, MetricsWriter, TrainConfig, TrainMode, evaluate, fit, loss_total,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

LOCK_NAME = ".lock"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class RunLockedError(TGFError):
    """Répertoire de sortie déjà utilisé par une autre exécution"""
    pass


# ====== Verrou et journal ======

class RunLock:
    """Fichier verrou créé de façon exclusive dans le répertoire de sortie"""

    def __init__(self, directory: Union[str, Path]):
        self.path = Path(directory) / LOCK_NAME
        self._held = False

    def acquire(self) -> None:
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"Répertoire verrouillé par une autre exécution: {self.path}")
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._held = True

    def release(self) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self) -> "RunLock":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()


@contextmanager
def run_log(directory: Path) -> Iterator[logging.Handler]:
    """Journal run.log de l'exécution, attaché au logger racine le temps du bloc"""
    handler = logging.FileHandler(directory / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield handler
    finally:
        root.removeHandler(handler)
        handler.close()


# ====== Artefacts ======

def format_gate_dump(model: GatedModel) -> str:
    """
    Vidage texte des portes : un en-tête par porte puis une ligne par poids

        gate <nom> granularity=<g> M=<M> shape=<forme> share_group=<groupe|-> count=<n> active=<k>
        <indice> <w> <masque>
    """
    lines = ["# trainable-gates gate dump v1"]
    for name, tgl in model.gate_items():
        mask = active_mask(tgl)
        lines.append(
            f"gate {name} granularity={tgl.granularity.value} M={tgl.spec.M} "
            f"shape={tgl.spec.shape_kind.value} share_group={tgl.share_group or '-'} "
            f"count={tgl.count} active={int(mask.sum())}"
        )
        for i, (w, m) in enumerate(zip(tgl.weights.value.reshape(-1), mask.reshape(-1))):
            lines.append(f"{i} {float(w)!r} {int(m)}")
    return "\n".join(lines) + "\n"


def parse_gate_dump(text: str) -> Dict[str, Dict[str, Any]]:
    """Relit un vidage de portes : {nom: {"weights": [...], "mask": [...], ...}}"""
    gates: Dict[str, Dict[str, Any]] = {}
    current: Optional[Dict[str, Any]] = None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "gate":
            current = {"weights": [], "mask": []}
            current.update(dict(p.split("=", 1) for p in parts[2:]))
            gates[parts[1]] = current
        elif current is not None:
            current["weights"].append(float(parts[1]))
            current["mask"].append(int(parts[2]))
    return gates


def _curves(history: History) -> Dict[str, List[float]]:
    return {
        "iteration": [r.iteration for r in history.records],
        "task_loss": [r.task_loss for r in history.records],
        "reg_loss": [r.reg_loss for r in history.records],
        "cost_ratio": [r.cost_ratio for r in history.records],
    }


def _gate_bars(model: GatedModel) -> Dict[str, Dict[str, List]]:
    return {
        name: {"weights": [float(w) for w in tgl.weights.value.reshape(-1)],
               "mask": [int(m) for m in active_mask(tgl).reshape(-1)]}
        for name, tgl in model.gate_items()
    }


def _write_json(path: Path, data: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)


def write_model_artifacts(out: Path, model: GatedModel, kind: CostKind, metadata: Dict[str, Any]) -> None:
    """gates.txt, cost_report.txt, cost_report.csv et checkpoint.json"""
    (out / "gates.txt").write_text(format_gate_dump(model), encoding="utf-8")
    rows = cost_report(model, kind)
    (out / "cost_report.txt").write_text(format_cost_report(rows, kind), encoding="utf-8")
    write_cost_report_csv(rows, out / "cost_report.csv")
    save_checkpoint(model, out / "checkpoint.json", metadata)


# ====== Données ======

def load_datasets(spec: DatasetSpec, seed: int) -> Tuple[Dataset, Dataset]:
    """Jeux d'entraînement et de test (le test reprend l'entraînement si n_test = 0)"""
    source = DatasetSource(spec.source)
    total = spec.n_train + spec.n_test
    if source is DatasetSource.SYNTHETIC_SINE:
        train = gen_sine_dataset(spec.n_train, tuple(spec.x_range), seed)
        test = gen_sine_dataset(spec.n_test, tuple(spec.x_range), seed + 1) if spec.n_test else train
        return train, test
    if source is DatasetSource.SYNTHETIC_PLANTED:
        data = gen_planted_dataset(spec.n_features, spec.k_relevant, total, spec.noise, seed)
    elif source is DatasetSource.SYNTHETIC_SHAPES:
        data = synthetic_shapes(total, spec.n_classes, spec.image_size, spec.noise, seed)
    else:
        train = read_idx(spec.images_path, spec.labels_path, limit=spec.n_train)
        if spec.test_images_path and spec.test_labels_path:
            test = read_idx(spec.test_images_path, spec.test_labels_path, limit=spec.n_test or None)
        else:
            test = train
        return train, test
    train = data.subset(0, spec.n_train)
    test = data.subset(spec.n_train, total) if spec.n_test else train
    return train, test


# ====== Recettes ======

@dataclass
class RecipeResult:
    summary: Dict[str, Any]
    status: int = EXIT_OK


def _pretrain(model: GatedModel, train: Dataset, cfg: TrainConfig, iterations: int, label: str) -> None:
    """θ seul, portes ouvertes, avant l'entraînement principal"""
    if iterations:
        pre = cfg.model_copy(update={"mode": TrainMode.THETA_ONLY, "iterations": iterations,
                                     "regularizer_schedule": []})
        fit(model, train, pre, label=f"{label}/pré")


def _train_with_metrics(out: Path, model: GatedModel, train: Dataset, cfg: TrainConfig, label: str) -> History:
    names = [name for name, _ in model.gate_items()]
    with MetricsWriter(out / "metrics.csv", names) as metrics:
        return fit(model, train, cfg, metrics=metrics, label=label)


def run_sine_selection(config: ExperimentConfig, out: Path) -> RecipeResult:
    """Sélection d'un nœud caché unique pour apprendre sin(x)"""
    train, test = load_datasets(config.dataset, config.seed)
    model = build_model(config.architecture, config.seed)
    _pretrain(model, train, config.train, config.pretrain_iterations, "sine")
    history = _train_with_metrics(out, model, train, config.train, "sine")
    result = evaluate(model, test, config.train.task_loss)

    gates = dict(model.gate_items())
    active = {name: int(active_mask(tgl).sum()) for name, tgl in gates.items()}
    grid = np.linspace(config.dataset.x_range[0], config.dataset.x_range[1], 200).reshape(-1, 1)
    plot = {
        "experiment": ExperimentKind.SINE_SELECTION.value,
        "gates": _gate_bars(model),
        "curves": _curves(history),
        "fit": {"x": grid.reshape(-1).tolist(), "target": np.sin(grid).reshape(-1).tolist(),
                "prediction": model.predict(grid).reshape(-1).tolist()},
    }
    summary: Dict[str, Any] = {
        "test_mse": result.loss,
        "active": active,
        "selected": {name: np.flatnonzero(active_mask(tgl)).tolist() for name, tgl in gates.items()},
        "final_cost_ratio": history.last.cost_ratio if history.last else None,
    }

    if config.baseline == "softmax":
        arch = config.architecture.model_copy(deep=True)
        for layer in arch.layers:
            if layer.gate is not None:
                layer.gate.relaxation = Relaxation.SOFTMAX
        reg = config.train.regularizer.model_copy(update={"lam": 0.0})
        baseline_cfg = config.train.model_copy(update={"regularizer": reg, "regularizer_schedule": []})
        baseline = build_model(arch, config.seed)
        _pretrain(baseline, train, baseline_cfg, config.pretrain_iterations, "softmax")
        fit(baseline, train, baseline_cfg, label="softmax")
        probabilities = {
            name: ad.softmax(ad.as_tensor(tgl.weights.value)).data.tolist()
            for name, tgl in baseline.gate_items()
        }
        plot["softmax_baseline"] = {"probabilities": probabilities}
        summary["softmax_baseline"] = {
            "test_mse": evaluate(baseline, test, config.train.task_loss).loss,
            "max_probability": {name: max(p) for name, p in probabilities.items()},
        }

    _write_json(out / "plot_data.json", plot)
    write_model_artifacts(out, model, config.train.cost_kind, {"experiment": config.name})
    logger.info(f"🎯 Sinus: actifs={active}, MSE test={result.loss:.3e}")
    return RecipeResult(summary)


def run_planted_features(config: ExperimentConfig, out: Path) -> RecipeResult:
    """Sélection de variables comparée à l'oracle exhaustif"""
    train, test = load_datasets(config.dataset, config.seed)
    model = build_model(config.architecture, config.seed)
    _pretrain(model, train, config.train, config.pretrain_iterations, "planted")
    history = _train_with_metrics(out, model, train, config.train, "planted")

    selected = [int(i) for i in np.flatnonzero(active_mask(model.input_gate))]
    oracle = brute_force_select(train, config.dataset.k_relevant)
    tgf_loss = evaluate(model, train, config.train.task_loss).loss
    summary = {
        "relevant": train.meta["relevant"],
        "selected": selected,
        "oracle_subset": list(oracle.subset),
        "oracle_loss": oracle.loss,
        "tgf_loss": tgf_loss,
        "test_loss": evaluate(model, test, config.train.task_loss).loss,
        "matches_oracle": selected == list(oracle.subset),
        "loss_gap": (tgf_loss - oracle.loss) / oracle.loss if oracle.loss > 0 else None,
        "final_cost_ratio": history.last.cost_ratio if history.last else None,
    }
    _write_json(out / "plot_data.json", {
        "experiment": ExperimentKind.PLANTED_FEATURES.value,
        "gates": _gate_bars(model),
        "curves": _curves(history),
        "relevant": train.meta["relevant"],
    })
    write_model_artifacts(out, model, config.train.cost_kind, {"experiment": config.name})
    logger.info(f"🎯 Variables: choisies={selected}, oracle={list(oracle.subset)}")
    return RecipeResult(summary)


def _with_shape(config: ExperimentConfig, shape_kind: ShapeKind):
    arch = config.architecture.model_copy(deep=True)
    if arch.input_gate is not None:
        arch.input_gate.shape_kind = shape_kind
    for layer in arch.layers:
        if layer.gate is not None:
            layer.gate.shape_kind = shape_kind
    return arch


def _train_cnn(config: ExperimentConfig, train: Dataset, test: Dataset, rho: float,
               shape_kind: Optional[ShapeKind], out: Optional[Path], label: str) -> Tuple[GatedModel, History, Dict]:
    arch = config.architecture if shape_kind is None else _with_shape(config, shape_kind)
    model = build_model(arch, config.seed)
    train_cfg = config.train.model_copy(
        update={"regularizer": config.train.regularizer.model_copy(update={"rho": rho})}
    )
    _pretrain(model, train, train_cfg, config.pretrain_iterations, label)

    snapshot = {p.name: p.value.copy() for p in model.theta_parameters()}
    cost_model = CostModel.for_model(model, train_cfg.cost_kind)
    initial_ratio = cost_model.ratio(model)
    if out is not None:
        history = _train_with_metrics(out, model, train, train_cfg, label)
    else:
        history = fit(model, train, train_cfg, label=label)
    result = evaluate(model, test, train_cfg.task_loss)
    stats = {
        "rho": rho,
        "shape_kind": shape_kind.value if shape_kind else None,
        "initial_cost_ratio": initial_ratio,
        "cost_ratio": cost_model.ratio(model),
        "hard_cost_ratio": cost_model.ratio(model, hard=True),
        "accuracy": result.accuracy,
        "test_loss": result.loss,
        "theta_unchanged": all(np.array_equal(p.value, snapshot[p.name]) for p in model.theta_parameters()),
        "active": {name: int(active_mask(tgl).sum()) for name, tgl in model.gate_items()},
    }
    return model, history, stats


def run_cnn_budget(config: ExperimentConfig, out: Path) -> RecipeResult:
    """Contrôle du ratio de compression sur un petit réseau convolutif"""
    train, test = load_datasets(config.dataset, config.seed)
    kind = config.train.cost_kind
    model, history, stats = _train_cnn(config, train, test, config.train.regularizer.rho, None, out, "cnn")
    summary: Dict[str, Any] = dict(stats)

    try:
        pruned = hard_prune(model)
        summary["pruned"] = {
            "report": pruned.report,
            "static_cost": total_cost_static(pruned.model, kind),
            "hard_gated_cost": gated_cost_value(model, kind, hard=True),
            "accuracy": evaluate(pruned.model, test, config.train.task_loss).accuracy,
        }
    except (DegenerateModelError, UnprunableGateError) as e:
        logger.warning(f"⚠️ Élagage impossible: {e}")
        summary["pruned"] = None

    if config.baseline is True:
        reference = build_model(config.architecture, config.seed, with_gates=False)
        ref_cfg = config.train.model_copy(update={
            "mode": TrainMode.THETA_ONLY,
            "iterations": config.train.iterations + config.pretrain_iterations,
        })
        fit(reference, train, ref_cfg, label="référence")
        ref_acc = evaluate(reference, test, config.train.task_loss).accuracy
        summary["baseline_accuracy"] = ref_acc
        summary["accuracy_gap"] = ref_acc - stats["accuracy"]

    if config.sweep is not None:
        rhos = config.sweep.rho or [config.train.regularizer.rho]
        shapes = config.sweep.shape_kinds or [None]
        rows = []
        for rho in rhos:
            for shape in shapes:
                _, _, point = _train_cnn(config, train, test, rho, shape, None, f"balayage ρ={rho}")
                rows.append(point)
        with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["rho", "shape_kind", "cost_ratio", "hard_cost_ratio", "accuracy", "test_loss"])
            for row in rows:
                writer.writerow([repr(row["rho"]), row["shape_kind"] or "", repr(row["cost_ratio"]),
                                 repr(row["hard_cost_ratio"]), repr(row["accuracy"]), repr(row["test_loss"])])
        summary["sweep"] = rows

    _write_json(out / "plot_data.json", {
        "experiment": ExperimentKind.CNN_BUDGET.value,
        "gates": _gate_bars(model),
        "curves": _curves(history),
        "target": config.train.regularizer.rho,
        "sweep": summary.get("sweep"),
    })
    write_model_artifacts(out, model, kind, {"experiment": config.name})
    logger.info(f"🎯 CNN: ratio={stats['cost_ratio']:.4f} (cible {config.train.regularizer.rho}), "
                f"exactitude={stats['accuracy']}")
    return RecipeResult(summary)


def gate_math_checks(grid_points: int = 1_000_000, samples: int = 100_000, seed: int = 0) -> Dict[str, Any]:
    """
    Propriétés de la porte : borne de convergence uniforme sur [-2, 2] et contrat
    de la dérivée sur des points aléatoires
    """
    grid = np.linspace(-2.0, 2.0, grid_points)
    convergence = {}
    for kind in ShapeKind:
        shape = make_shape(kind)
        bound = float(np.max(np.abs(shape.g(grid))))
        for M in (10, 1000, 100000):
            spec = GateSpec(weights=Parameter("grid", np.zeros(1), ParamRole.GATE), M=M, shape_kind=kind)
            gap = float(np.max(np.abs(trainable_gate(grid, spec) - step_gate(grid))))
            # 1 + s − 1 peut dépasser s d'un ulp
            ok = bool(gap <= bound / M + 4 * np.finfo(np.float64).eps)
            convergence[f"{kind.value}/M={M}"] = {"gap": gap, "bound": bound / M, "ok": ok}

    rng = np.random.default_rng(seed)
    w = rng.uniform(-2.0, 2.0, size=samples)
    contract = {}
    for kind in ShapeKind:
        spec = GateSpec(weights=Parameter("w", w, ParamRole.GATE), shape_kind=kind)
        tape = Tape()
        leaf = tape.watch(spec.weights)
        backward(tape, ad.sum_all(gate_tensor(leaf, spec, tape)))
        shape = make_shape(kind)
        closed = shape.g(w) + grad_shaping(w, spec.M) * shape.g_prime(w)
        got = tape.grad(spec.weights)
        err = float(np.max(np.abs(got - closed) / np.maximum(np.abs(closed), 1e-300)))
        exact = bool(np.all(got == 1.0)) if kind is ShapeKind.CONSTANT_ONE else None
        contract[kind.value] = {"max_rel_error": err, "exact_one": exact, "ok": bool(err <= 1e-12)}
    return {"convergence": convergence, "derivative": contract}


def run_gradcheck_suite(config: ExperimentConfig, out: Path) -> RecipeResult:
    """Différences finies sur la perte totale d'un petit réseau à portes"""
    train, _ = load_datasets(config.dataset, config.seed)
    model = build_model(config.architecture, config.seed)
    settings = config.gradcheck
    batch = (train.x[:settings.batch_size], train.y[:settings.batch_size])
    cost_model = CostModel.for_model(model, config.train.cost_kind)

    def loss_fn(tape: Tape):
        return loss_total(model, batch, config.train.regularizer, cost_model, tape, config.train.task_loss)

    result = check_gradients(loss_fn, model.parameters(), eps=settings.eps,
                             gate_m=gate_granularities(model.gate_items()),
                             max_elements=settings.max_elements, seed=config.seed)
    math_checks = gate_math_checks(seed=config.seed)
    passed = (
        result.passed(settings.tolerance)
        and all(v["ok"] for v in math_checks["convergence"].values())
        and all(v["ok"] for v in math_checks["derivative"].values())
    )
    summary = {
        "max_rel_error": result.max_rel_error,
        "per_param": result.per_param,
        "checked": result.checked,
        "skipped": result.skipped,
        "tolerance": settings.tolerance,
        "gate_math": math_checks,
        "passed": passed,
    }
    write_model_artifacts(out, model, config.train.cost_kind, {"experiment": config.name})
    if not passed:
        logger.error(f"❌ Vérification des gradients échouée (erreur max {result.max_rel_error:.3e})")
    return RecipeResult(summary, EXIT_OK if passed else EXIT_FAILURE)


RECIPES = {
    ExperimentKind.SINE_SELECTION: run_sine_selection,
    ExperimentKind.PLANTED_FEATURES: run_planted_features,
    ExperimentKind.CNN_BUDGET: run_cnn_budget,
    ExperimentKind.GRADCHECK_SUITE: run_gradcheck_suite,
}


# ====== Point d'entrée ======

def execute(config: ExperimentConfig) -> int:
    """Exécute une configuration déjà validée dans son répertoire de sortie"""
    out = resolve_output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    with RunLock(out), run_log(out):
        set_default_dtype(config.precision)
        try:
            logger.info(f"▶️ Expérience '{config.name}' ({config.kind.value}) -> {out}")
            (out / "config.yaml").write_text(dump_config(config), encoding="utf-8")
            result = RECIPES[config.kind](config, out)
            _write_json(out / "summary.json", {
                "name": config.name,
                "kind": config.kind.value,
                "seed": config.seed,
                "status": result.status,
                **result.summary,
            })
            logger.info(f"✅ Expérience '{config.name}' terminée (statut {result.status})")
            return result.status
        finally:
            set_default_dtype(np.float64)


def exit_code(error: TGFError) -> int:
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(error, DivergenceError):
        return EXIT_DIVERGENCE
    return EXIT_FAILURE


def run_experiment(config_path: Union[str, Path]) -> int:
    """
    Charge, valide puis exécute une expérience

    Returns:
        0 succès, 2 configuration invalide (aucun fichier écrit), 3 divergence,
        1 toute autre erreur
    """
    try:
        config = load_experiment_config(config_path)
    except ConfigurationError as e:
        logger.error(f"❌ {e}")
        return EXIT_CONFIG
    try:
        return execute(config)
    except TGFError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return exit_code(e)
