#!/usr/bin/env python3
"""
🧮 Moteur de différentiation automatique
Tenseurs denses (backend NumPy) et bande de différentiation en mode inverse,
avec règles de rétropropagation personnalisées (custom_grad).
"""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float64


class TGFError(Exception):
    """Exception de base du paquet"""
    pass


class ArgumentError(TGFError, ValueError):
    """Argument invalide"""
    pass


class DimensionError(TGFError, ValueError):
    """Dimensions incompatibles"""
    pass


class GradientShapeError(TGFError):
    """Règle de rétropropagation qui ne respecte pas la forme des entrées"""
    pass


class NonFiniteError(ArgumentError):
    """Valeur NaN/Inf produite à partir d'entrées finies"""
    pass


def set_default_dtype(dtype) -> None:
    """Change la précision par défaut (float64 ou float32)"""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ArgumentError(f"Précision non supportée: {dtype}")
    _DEFAULT_DTYPE = dtype.type
    logger.debug(f"Précision par défaut: {dtype}")


class Tensor:
    """
    Tableau réel dense et immuable

    Un tenseur produit à partir d'entrées suivies porte un `node_id` qui le relie
    à la bande (`tape`) sur laquelle sa règle de rétropropagation est enregistrée.
    """

    __slots__ = ("_data", "node_id", "tape")

    def __init__(self, data, dtype=None, node_id: Optional[int] = None, tape: Optional["Tape"] = None):
        array = np.array(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        if any(extent <= 0 for extent in array.shape):
            raise DimensionError(f"Extents non positives: {array.shape}")
        array.setflags(write=False)
        self._data = array
        self.node_id = node_id
        self.tape = tape

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    def item(self) -> float:
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Copie modifiable des données"""
        return np.array(self._data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"


class ParamRole(Enum):
    """Rôle d'un paramètre dans l'optimisation"""
    THETA = "theta"
    GATE = "gate"


@dataclass(eq=False)
class Parameter:
    """Paramètre entraînable nommé (valeur remplacée par l'optimiseur)"""
    name: str
    value: np.ndarray
    role: ParamRole = ParamRole.THETA

    def __post_init__(self):
        self.value = np.array(self.value, dtype=_DEFAULT_DTYPE)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeNode:
    """Enregistrement (entrées, sortie, règle) de la bande"""
    node_id: int
    input_ids: List[Optional[int]]
    input_shapes: List[Tuple[int, ...]]
    output_shape: Tuple[int, ...]
    backward: Optional[BackwardFn] = None
    op: str = "leaf"


class Tape:
    """Bande de différentiation en mode inverse (ajout seulement)"""

    _serial = itertools.count()

    def __init__(self, frozen: Optional[Sequence[Parameter]] = None):
        self.serial = next(Tape._serial)
        self.nodes: List[TapeNode] = []
        self.gradients: Dict[int, np.ndarray] = {}
        self._leaves: Dict[int, Tuple[Parameter, Tensor]] = {}
        self._frozen = {id(p) for p in (frozen or [])}

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, param: Parameter) -> Tensor:
        """
        Retourne la feuille associée à un paramètre

        Un même paramètre surveillé plusieurs fois renvoie la même feuille, de sorte
        que les gradients de tous ses usages s'accumulent. Un paramètre gelé est
        renvoyé comme constante.
        """
        if id(param) in self._frozen:
            return Tensor(param.value)
        cached = self._leaves.get(id(param))
        if cached is not None:
            return cached[1]
        node_id = len(self.nodes)
        self.nodes.append(TapeNode(node_id, [], [], tuple(param.shape)))
        leaf = Tensor(param.value, node_id=node_id, tape=self)
        self._leaves[id(param)] = (param, leaf)
        return leaf

    def variable(self, data) -> Tensor:
        """Feuille anonyme (utile pour différentier par rapport à une entrée)"""
        node_id = len(self.nodes)
        tensor = Tensor(data, node_id=node_id, tape=self)
        self.nodes.append(TapeNode(node_id, [], [], tensor.shape))
        return tensor

    def record(self, value: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        node_id = len(self.nodes)
        self.nodes.append(TapeNode(
            node_id=node_id,
            input_ids=[t.node_id if t.tape is self else None for t in inputs],
            input_shapes=[t.shape for t in inputs],
            output_shape=tuple(np.shape(value)),
            backward=backward,
            op=op,
        ))
        return Tensor(value, dtype=value.dtype if isinstance(value, np.ndarray) else None,
                      node_id=node_id, tape=self)

    def grad(self, param: Parameter) -> np.ndarray:
        """Gradient accumulé d'un paramètre (zéros s'il est inatteignable)"""
        cached = self._leaves.get(id(param))
        if cached is None:
            return np.zeros_like(param.value)
        return self.gradients.get(cached[1].node_id, np.zeros_like(param.value))

    def watched(self) -> List[Parameter]:
        return [param for param, _ in self._leaves.values()]


def _active_tape(inputs: Sequence[Tensor]) -> Optional[Tape]:
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise ArgumentError("Opération mélangeant plusieurs bandes")
    return next(iter(tapes.values()), None)


def _check_finite(value: np.ndarray, inputs: Sequence[Tensor], op: str) -> None:
    if np.all(np.isfinite(value)):
        return
    if all(np.all(np.isfinite(t.data)) for t in inputs):
        raise NonFiniteError(f"Valeur non finie produite par '{op}' sur des entrées finies")


def _emit(value: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    value = np.asarray(value, dtype=_result_dtype(inputs))
    _check_finite(value, inputs, op)
    tape = _active_tape(inputs)
    if tape is None:
        return Tensor(value, dtype=value.dtype)
    return tape.record(value, inputs, backward, op)


def _result_dtype(inputs: Sequence[Tensor]):
    return np.result_type(*[t.data.dtype for t in inputs]) if inputs else _DEFAULT_DTYPE


def as_tensor(value: Union[Tensor, float, int, np.ndarray]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ====== Opérations élément par élément ======

class ElementwiseKind(Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    SIN = "sin"
    RELU = "relu"
    SQUARE = "square"


_BINARY = {ElementwiseKind.ADD, ElementwiseKind.SUB, ElementwiseKind.MUL}


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Ramène un gradient à la forme d'un scalaire diffusé"""
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def elementwise(op_kind: Union[ElementwiseKind, str], a, b=None) -> Tensor:
    """
    Applique une opération élément par élément

    Pour les opérations binaires, `b` a la forme de `a` ou est un scalaire
    (diffusion à tous les éléments uniquement).
    """
    kind = ElementwiseKind(op_kind)
    a = as_tensor(a)

    if kind in _BINARY:
        if b is None:
            raise ArgumentError(f"'{kind.value}' attend deux opérandes")
        b = as_tensor(b)
        if b.shape != a.shape and b.size != 1:
            raise DimensionError(f"'{kind.value}': formes {a.shape} et {b.shape} incompatibles")
        a_data, b_data = a.data, b.data.reshape(()) if b.shape != a.shape else b.data
        a_shape, b_shape = a.shape, b.shape

        if kind is ElementwiseKind.ADD:
            value = a_data + b_data
            backward = lambda up: [up, _reduce_to(up, b_shape)]
        elif kind is ElementwiseKind.SUB:
            value = a_data - b_data
            backward = lambda up: [up, _reduce_to(-up, b_shape)]
        else:
            value = a_data * b_data
            backward = lambda up: [up * b_data, _reduce_to(up * a_data, b_shape)]
        value = np.broadcast_to(value, a_shape).copy()
        return _emit(value, [a, b], backward, kind.value)

    if b is not None:
        raise ArgumentError(f"'{kind.value}' est unaire")
    x = a.data
    if kind is ElementwiseKind.SIN:
        return _emit(np.sin(x), [a], lambda up: [up * np.cos(x)], "sin")
    if kind is ElementwiseKind.RELU:
        return _emit(np.maximum(x, 0.0), [a], lambda up: [up * (x > 0)], "relu")
    return _emit(x * x, [a], lambda up: [2.0 * up * x], "square")


def add(a, b) -> Tensor:
    return elementwise(ElementwiseKind.ADD, a, b)


def sub(a, b) -> Tensor:
    return elementwise(ElementwiseKind.SUB, a, b)


def mul(a, b) -> Tensor:
    return elementwise(ElementwiseKind.MUL, a, b)


def sin(a) -> Tensor:
    return elementwise(ElementwiseKind.SIN, a)


def relu(a) -> Tensor:
    return elementwise(ElementwiseKind.RELU, a)


def square(a) -> Tensor:
    return elementwise(ElementwiseKind.SQUARE, a)


# ====== Algèbre linéaire et convolution ======

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Produit matriciel (m×k)·(k×n)"""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul attend des matrices, reçu {a.shape} et {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: dimensions internes {a.shape[1]} != {b.shape[0]}")
    a_data, b_data = a.data, b.data
    return _emit(a_data @ b_data, [a, b], lambda up: [up @ b_data.T, a_data.T @ up], "matmul")


class Padding(Enum):
    SAME = "same"
    VALID = "valid"


def conv_output_size(size: int, kernel: int, stride: int, padding: Union[Padding, str]) -> Tuple[int, int, int]:
    """Retourne (taille de sortie, marge avant, marge après) pour une dimension"""
    if stride <= 0:
        raise ArgumentError(f"Pas de convolution non positif: {stride}")
    padding = Padding(padding)
    if padding is Padding.VALID:
        if size < kernel:
            raise DimensionError(f"Entrée {size} plus petite que le noyau {kernel}")
        return (size - kernel) // stride + 1, 0, 0
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _im2col(x: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = x.shape[:2]
    col = np.zeros((n, c, k, k, out_h, out_w), dtype=x.dtype)
    for y in range(k):
        y_max = y + stride * out_h
        for z in range(k):
            z_max = z + stride * out_w
            col[:, :, y, z, :, :] = x[:, :, y:y_max:stride, z:z_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, -1)


def _col2im(col: np.ndarray, padded_shape: Tuple[int, ...], k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = padded_shape[:2]
    col = col.reshape(n, out_h, out_w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros(padded_shape, dtype=col.dtype)
    for y in range(k):
        y_max = y + stride * out_h
        for z in range(k):
            z_max = z + stride * out_w
            img[:, :, y:y_max:stride, z:z_max:stride] += col[:, :, y, z, :, :]
    return img


def conv2d(inputs: Tensor, kernel: Tensor, stride: int = 1, padding: Union[Padding, str] = Padding.SAME) -> Tensor:
    """
    Corrélation croisée NCHW × OIkk (im2col)

    Args:
        inputs: tenseur (N, C, H, W)
        kernel: noyau (O, C, k, k)
        stride: pas strictement positif
        padding: 'same' (sortie ceil(H/stride)) ou 'valid'
    """
    inputs, kernel = as_tensor(inputs), as_tensor(kernel)
    if stride <= 0:
        raise ArgumentError(f"Pas de convolution non positif: {stride}")
    if inputs.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d attend NCHW et OIkk, reçu {inputs.shape} et {kernel.shape}")
    n, c, h, w = inputs.shape
    o, i, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError(f"Noyau non carré: {kernel.shape}")
    if c != i:
        raise DimensionError(f"conv2d: {c} canaux d'entrée pour un noyau à {i} canaux")

    out_h, top, bottom = conv_output_size(h, k, stride, padding)
    out_w, left, right = conv_output_size(w, k, stride, padding)
    x = np.pad(inputs.data, [(0, 0), (0, 0), (top, bottom), (left, right)])
    col = _im2col(x, k, stride, out_h, out_w)
    k_flat = kernel.data.reshape(o, -1)
    value = (col @ k_flat.T).reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2)

    def backward(up: np.ndarray):
        d = up.transpose(0, 2, 3, 1).reshape(-1, o)
        grad_kernel = (d.T @ col).reshape(kernel.shape)
        grad_padded = _col2im(d @ k_flat, x.shape, k, stride, out_h, out_w)
        grad_input = grad_padded[:, :, top:top + h, left:left + w]
        return [grad_input, grad_kernel]

    return _emit(value, [inputs, kernel], backward, "conv2d")


# ====== Canaux, formes et réductions ======

def scale_channels(y: Tensor, gates: Tensor) -> Tensor:
    """Multiplie le canal i (axe 1) de `y` par gates[i]"""
    y, gates = as_tensor(y), as_tensor(gates)
    if y.data.ndim < 2 or gates.data.ndim != 1 or y.shape[1] != gates.shape[0]:
        raise DimensionError(f"scale_channels: {gates.shape} ne correspond pas aux canaux de {y.shape}")
    view = (1, -1) + (1,) * (y.data.ndim - 2)
    y_data, g_data = y.data, gates.data
    axes = tuple(a for a in range(y_data.ndim) if a != 1)

    def backward(up):
        return [up * g_data.reshape(view), (up * y_data).sum(axis=axes)]

    return _emit(y_data * g_data.reshape(view), [y, gates], backward, "scale_channels")


def add_bias(y: Tensor, bias: Tensor) -> Tensor:
    """Ajoute bias[i] au canal i (axe 1)"""
    y, bias = as_tensor(y), as_tensor(bias)
    if y.data.ndim < 2 or bias.data.ndim != 1 or y.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: {bias.shape} ne correspond pas aux canaux de {y.shape}")
    view = (1, -1) + (1,) * (y.data.ndim - 2)
    axes = tuple(a for a in range(y.data.ndim) if a != 1)
    return _emit(y.data + bias.data.reshape(view), [y, bias],
                 lambda up: [up, up.sum(axis=axes)], "add_bias")


def take_channels(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Sélectionne des canaux (axe 1)"""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=int)
    shape = x.shape

    def backward(up):
        grad = np.zeros(shape, dtype=up.dtype)
        grad[:, idx] = up
        return [grad]

    return _emit(np.take(x.data, idx, axis=1), [x], backward, "take_channels")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    try:
        value = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape {original} -> {tuple(shape)}: {e}")
    return _emit(value, [x], lambda up: [up.reshape(original)], "reshape")


def flatten(x: Tensor) -> Tensor:
    """(N, ...) -> (N, produit des autres extents)"""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), [x], lambda up: [np.full(shape, up, dtype=x.data.dtype)], "sum")


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape, count = x.shape, x.size
    return _emit(np.asarray(x.data.mean()), [x],
                 lambda up: [np.full(shape, up / count, dtype=x.data.dtype)], "mean")


def softmax(x: Tensor) -> Tensor:
    """Softmax d'un vecteur"""
    x = as_tensor(x)
    if x.data.ndim != 1:
        raise DimensionError(f"softmax attend un vecteur, reçu {x.shape}")
    e = np.exp(x.data - x.data.max())
    p = e / e.sum()
    return _emit(p, [x], lambda up: [p * (up - np.dot(up, p))], "softmax")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Entropie croisée moyenne (logits N×C, étiquettes entières)"""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"Logits {logits.shape} et étiquettes {labels.shape} incompatibles")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    value = -log_p[rows, labels].mean()

    def backward(up):
        grad = np.exp(log_p)
        grad[rows, labels] -= 1.0
        return [grad * (up / labels.shape[0])]

    return _emit(np.asarray(value), [logits], backward, "softmax_cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    """Erreur quadratique moyenne"""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prédictions {pred.shape} et cibles {target.shape} incompatibles")
    return mean_all(square(sub(pred, target)))


# ====== Règles personnalisées et rétropropagation ======

def custom_grad(forward_value, backward_fn: BackwardFn, inputs: Sequence[Tensor]) -> Tensor:
    """
    Valeur avant imposée, règle arrière fournie

    Le passage avant retourne `forward_value` tel quel ; la rétropropagation appelle
    `backward_fn(upstream)` qui doit renvoyer un gradient par entrée, de même forme.
    """
    inputs = [as_tensor(t) for t in inputs]
    value = forward_value.data if isinstance(forward_value, Tensor) else np.asarray(forward_value)
    tape = _active_tape(inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(np.array(value, dtype=_result_dtype(inputs)), inputs, backward_fn, "custom_grad")


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Rétropropage depuis une perte scalaire

    Les gradients sont sommés dans chaque nœud ; les feuilles inatteignables
    reçoivent un gradient nul.

    Returns:
        Carte node_id -> gradient accumulé
    """
    if loss.size != 1:
        raise ArgumentError(f"La perte doit être scalaire, reçu {loss.shape}")
    if loss.tape is not tape or loss.node_id is None:
        raise ArgumentError("La perte n'est pas atteignable depuis la bande")

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(tape.nodes[:loss.node_id + 1]):
        upstream = grads.get(node.node_id)
        if upstream is None or node.backward is None:
            continue
        input_grads = node.backward(upstream)
        if len(input_grads) != len(node.input_ids):
            raise GradientShapeError(
                f"'{node.op}': {len(input_grads)} gradients pour {len(node.input_ids)} entrées"
            )
        for input_id, shape, grad in zip(node.input_ids, node.input_shapes, input_grads):
            if input_id is None or grad is None:
                continue
            grad = np.asarray(grad)
            if grad.shape != shape:
                raise GradientShapeError(f"'{node.op}': gradient {grad.shape} pour une entrée {shape}")
            previous = grads.get(input_id)
            grads[input_id] = grad if previous is None else previous + grad

    for node in tape.nodes:
        if node.backward is None and node.node_id not in grads:
            grads[node.node_id] = np.zeros(node.output_shape, dtype=loss.data.dtype)
    tape.gradients = grads
    return grads
