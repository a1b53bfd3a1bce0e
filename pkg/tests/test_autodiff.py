#!/usr/bin/env python3
"""
🧮 Tests du moteur de différentiation automatique
"""

import math

import numpy as np
import pytest

from trainable_gates import autodiff as ad
from trainable_gates.autodiff import (
    ArgumentError, DimensionError, GradientShapeError, NonFiniteError, Parameter, Tape, Tensor,
)
from trainable_gates.gradcheck import check_gradients


# ====== Tenseurs et bandes ======

def test_tensor_rejects_empty_extent():
    """Une extent nulle est refusée"""
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 2)))


def test_tensor_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0
    copy = t.numpy()
    copy[0] = 5.0
    assert t.data[0] == 1.0


def test_default_dtype_switch():
    """La précision par défaut bascule en float32 puis revient en float64"""
    ad.set_default_dtype(np.float32)
    assert Tensor([1.0]).data.dtype == np.float32
    assert Parameter("p", [1.0]).value.dtype == np.float32
    ad.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64


def test_default_dtype_rejects_integers():
    with pytest.raises(ArgumentError):
        ad.set_default_dtype(np.int32)


def test_watch_returns_same_leaf():
    """Un paramètre surveillé deux fois donne la même feuille"""
    p = Parameter("p", [1.0, 2.0])
    tape = Tape()
    assert tape.watch(p) is tape.watch(p)
    assert tape.watched() == [p]


def test_frozen_parameter_is_constant():
    p = Parameter("p", [1.0, 2.0])
    tape = Tape(frozen=[p])
    leaf = tape.watch(p)
    assert leaf.tape is None
    np.testing.assert_array_equal(tape.grad(p), [0.0, 0.0])


def test_mixing_tapes_is_rejected():
    a = Tape().variable([1.0])
    b = Tape().variable([1.0])
    with pytest.raises(ArgumentError):
        ad.add(a, b)


# ====== Opérations élément par élément ======

def test_elementwise_values():
    x = Tensor([0.0, 1.0, -2.0])
    np.testing.assert_allclose(ad.add(x, 1.0).data, [1.0, 2.0, -1.0])
    np.testing.assert_allclose(ad.sub(x, x).data, [0.0, 0.0, 0.0])
    np.testing.assert_allclose(ad.mul(x, 3.0).data, [0.0, 3.0, -6.0])
    np.testing.assert_allclose(ad.sin(x).data, np.sin([0.0, 1.0, -2.0]))
    np.testing.assert_allclose(ad.relu(x).data, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(ad.square(x).data, [0.0, 1.0, 4.0])


def test_elementwise_shape_mismatch():
    """Seule la diffusion d'un scalaire est acceptée"""
    with pytest.raises(DimensionError):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_binary_op_requires_two_operands():
    with pytest.raises(ArgumentError):
        ad.elementwise("mul", Tensor([1.0]))
    with pytest.raises(ArgumentError):
        ad.elementwise("sin", Tensor([1.0]), Tensor([1.0]))


def test_scalar_broadcast_gradient():
    """Le gradient d'un scalaire diffusé est la somme des gradients amont"""
    tape = Tape()
    x = tape.variable([1.0, 2.0, 3.0])
    b = tape.variable(2.0)
    grads = ad.backward(tape, ad.sum_all(ad.mul(x, b)))
    np.testing.assert_allclose(grads[x.node_id], [2.0, 2.0, 2.0])
    assert grads[b.node_id].shape == ()
    assert float(grads[b.node_id]) == pytest.approx(6.0)


def test_non_finite_from_finite_inputs():
    with pytest.raises(NonFiniteError):
        ad.mul(Tensor([1e200]), Tensor([1e200]))


def test_non_finite_propagates_from_non_finite_inputs():
    """Une entrée déjà non finie ne lève pas d'erreur"""
    out = ad.add(Tensor([math.inf]), 1.0)
    assert math.isinf(out.item())


# ====== Algèbre linéaire ======

def test_matmul_value_and_gradients():
    tape = Tape()
    a = tape.variable([[1.0, 2.0]])
    b = tape.variable([[3.0], [4.0]])
    out = ad.matmul(a, b)
    assert out.item() == 11.0
    grads = ad.backward(tape, ad.sum_all(out))
    np.testing.assert_allclose(grads[a.node_id], [[3.0, 4.0]])
    np.testing.assert_allclose(grads[b.node_id], [[1.0], [2.0]])


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_output_size():
    """'same' donne ceil(H/stride), 'valid' (H − k)//stride + 1"""
    assert ad.conv_output_size(28, 3, 2, "same") == (14, 0, 1)
    assert ad.conv_output_size(5, 3, 2, "same") == (3, 1, 1)
    assert ad.conv_output_size(5, 3, 1, "valid") == (3, 0, 0)
    with pytest.raises(ArgumentError):
        ad.conv_output_size(5, 3, 0, "same")


def test_conv2d_valid_ones():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), stride=1, padding="valid")
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out.data, 4.0)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4, 4))
    kernel = np.eye(3).reshape(3, 3, 1, 1)
    out = ad.conv2d(Tensor(x), Tensor(kernel), stride=1, padding="same")
    np.testing.assert_allclose(out.data, x)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ArgumentError):
        ad.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), stride=0)


def test_conv2d_gradients_match_finite_differences():
    """Rétropropagation de la convolution à pas 2 contre les différences finies"""
    rng = np.random.default_rng(1)
    px = Parameter("x", rng.standard_normal((2, 2, 5, 5)))
    pk = Parameter("k", rng.standard_normal((3, 2, 3, 3)))

    def loss_fn(tape):
        y = ad.conv2d(tape.watch(px), tape.watch(pk), stride=2, padding="same")
        return ad.sum_all(ad.square(y))

    result = check_gradients(loss_fn, [px, pk])
    assert result.checked == px.size + pk.size
    assert result.passed(1e-4), result.per_param


# ====== Canaux, réductions et pertes ======

def test_scale_channels_gradients():
    tape = Tape()
    y = tape.variable([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    g = tape.variable([1.0, 0.0, 2.0])
    out = ad.scale_channels(y, g)
    np.testing.assert_allclose(out.data, [[1.0, 0.0, 6.0], [4.0, 0.0, 12.0]])
    grads = ad.backward(tape, ad.sum_all(out))
    np.testing.assert_allclose(grads[y.node_id], [[1.0, 0.0, 2.0], [1.0, 0.0, 2.0]])
    np.testing.assert_allclose(grads[g.node_id], [5.0, 7.0, 9.0])


def test_take_channels_scatters_gradient():
    tape = Tape()
    x = tape.variable([[1.0, 2.0, 3.0]])
    out = ad.take_channels(x, [2, 0])
    np.testing.assert_allclose(out.data, [[3.0, 1.0]])
    grads = ad.backward(tape, ad.sum_all(out))
    np.testing.assert_allclose(grads[x.node_id], [[1.0, 0.0, 1.0]])


def test_reshape_rejects_wrong_size():
    with pytest.raises(DimensionError):
        ad.reshape(Tensor(np.ones((2, 3))), (4,))


def test_mse_example():
    """MSE([1, 1], [0, 2]) = 1"""
    assert ad.mse(Tensor([1.0, 1.0]), [0.0, 2.0]).item() == 1.0


def test_softmax_cross_entropy_uniform_logits():
    tape = Tape()
    logits = tape.variable(np.zeros((2, 3)))
    loss = ad.softmax_cross_entropy(logits, np.array([0, 1]))
    assert loss.item() == pytest.approx(math.log(3.0))
    grads = ad.backward(tape, loss)
    expected = np.full((2, 3), 1.0 / 3.0)
    expected[0, 0] -= 1.0
    expected[1, 1] -= 1.0
    np.testing.assert_allclose(grads[logits.node_id], expected / 2.0)


def test_softmax_sums_to_one():
    p = ad.softmax(Tensor([1.0, 2.0, 3.0]))
    assert p.data.sum() == pytest.approx(1.0)
    with pytest.raises(DimensionError):
        ad.softmax(Tensor(np.ones((2, 2))))


# ====== Règles personnalisées et rétropropagation ======

def test_custom_grad_overrides_backward():
    """La valeur avant est imposée, la règle arrière est appelée telle quelle"""
    tape = Tape()
    x = tape.variable([1.0, 2.0])
    y = ad.custom_grad(np.zeros(2), lambda up: [up * 7.0], [x])
    np.testing.assert_array_equal(y.data, [0.0, 0.0])
    grads = ad.backward(tape, ad.sum_all(y))
    np.testing.assert_allclose(grads[x.node_id], [7.0, 7.0])


def test_custom_grad_wrong_shape_is_detected():
    tape = Tape()
    x = tape.variable([1.0, 2.0])
    y = ad.custom_grad(np.zeros(2), lambda up: [np.ones(3)], [x])
    with pytest.raises(GradientShapeError):
        ad.backward(tape, ad.sum_all(y))


def test_custom_grad_wrong_arity_is_detected():
    tape = Tape()
    x = tape.variable([1.0, 2.0])
    y = ad.custom_grad(np.zeros(2), lambda up: [up, up], [x])
    with pytest.raises(GradientShapeError):
        ad.backward(tape, ad.sum_all(y))


def test_gradients_accumulate_over_uses():
    """x utilisé deux fois : d(x·x)/dx = 2x"""
    p = Parameter("p", [1.0, -3.0])
    tape = Tape()
    x = tape.watch(p)
    ad.backward(tape, ad.sum_all(ad.mul(x, tape.watch(p))))
    np.testing.assert_allclose(tape.grad(p), [2.0, -6.0])


def test_unreachable_leaf_gets_zero_gradient():
    p = Parameter("p", [1.0, 2.0])
    q = Parameter("q", [5.0])
    tape = Tape()
    tape.watch(q)
    ad.backward(tape, ad.sum_all(ad.square(tape.watch(p))))
    np.testing.assert_array_equal(tape.grad(q), [0.0])
    np.testing.assert_allclose(tape.grad(p), [2.0, 4.0])


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.variable([1.0, 2.0])
    with pytest.raises(ArgumentError):
        ad.backward(tape, ad.square(x))
    with pytest.raises(ArgumentError):
        ad.backward(Tape(), ad.sum_all(x))


def test_forward_is_deterministic(sine_model):
    """Deux évaluations identiques sont égales au bit près"""
    x = np.linspace(-1.0, 1.0, 7).reshape(-1, 1)
    np.testing.assert_array_equal(sine_model.predict(x), sine_model.predict(x))
