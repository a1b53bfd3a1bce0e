#!/usr/bin/env python3
"""
🧱 Tests des couches, des TGL et de l'élagage structurel
"""

import numpy as np
import pytest

from trainable_gates import autodiff as ad
from trainable_gates.autodiff import ArgumentError, DimensionError, ParamRole, Tape
from trainable_gates.gradcheck import check_gradients, gate_granularities
from trainable_gates.layers import (
    INPUT_KEY, Activation, Conv2D, DegenerateModelError, Dense, Flatten, GatedModel, Granularity,
    Relaxation, TrainableGateLayer, UnprunableGateError, active_mask, gate_values, hard_prune, share_gates,
    tgl_forward, weight_gate_forward,
)


def _open_close(tgl: TrainableGateLayer, keep) -> None:
    """Poids ±0.5 : TG vaut exactement 1 ou 0 pour M = 10^5"""
    w = np.full(tgl.count, -0.5)
    w[list(keep)] = 0.5
    tgl.weights.value = w


# ====== Couches ======

def test_dense_init_and_shapes(rng):
    layer = Dense("d", 3, 5, rng=rng, init_range=0.2)
    assert layer.weight.shape == (3, 5)
    assert layer.weight.name == "d.weight"
    assert layer.bias.name == "d.bias"
    assert np.all(np.abs(layer.weight.value) <= 0.2)
    assert layer.build((3,)) == (5,)
    with pytest.raises(DimensionError):
        layer.build((4,))


def test_dense_rejects_wrong_weight_shape():
    with pytest.raises(DimensionError):
        Dense("d", 3, 5, weight=np.zeros((5, 3)))


def test_conv_output_shape(rng):
    conv = Conv2D("c", 1, 8, kernel_size=3, stride=2, padding="same", rng=rng)
    assert conv.build((1, 28, 28)) == (8, 14, 14)
    assert conv.out_spatial == 196
    assert conv.weight.shape == (8, 1, 3, 3)
    with pytest.raises(ArgumentError):
        Conv2D("c", 1, 8, stride=0)


def test_model_validation(rng):
    with pytest.raises(ArgumentError):
        GatedModel((1,), [])
    with pytest.raises(ArgumentError):
        GatedModel((1,), [Dense("d", 1, 2, rng=rng), Dense("d", 2, 1, rng=rng)])
    with pytest.raises(DimensionError):
        GatedModel((2,), [Dense("d", 1, 2, rng=rng)])


def test_forward_rejects_wrong_batch(sine_model):
    with pytest.raises(DimensionError):
        sine_model.forward(np.ones((4, 2)))


def test_describe_reports_prunable(sine_model):
    layers = sine_model.describe()["layers"]
    assert layers[0]["prunable"] is True
    assert layers[2]["prunable"] is False
    assert layers[1]["fn"] == "sin"


# ====== TGL ======

def test_tgl_create_initialises_open_gates(rng):
    tgl = TrainableGateLayer.create("conv1", 16, rng=rng)
    assert tgl.weights.name == "conv1.gate"
    assert tgl.weights.role is ParamRole.GATE
    assert np.all((tgl.weights.value >= 0.01) & (tgl.weights.value <= 0.1))
    assert active_mask(tgl).sum() == 16


def test_tgl_forward_masks_channels():
    """Canal i de la sortie = TG(w_i)·y_i"""
    tgl = TrainableGateLayer.create("g", 3)
    _open_close(tgl, [0, 2])
    y = np.arange(12.0).reshape(2, 3, 2) + 1.0
    out = tgl_forward(ad.as_tensor(y), tgl, Tape(frozen=[tgl.weights]))
    expected = y.copy()
    expected[:, 1] = 0.0
    np.testing.assert_array_equal(out.data, expected)


def test_tgl_gradient_reaches_gates_and_inputs():
    tgl = TrainableGateLayer.create("g", 2)
    _open_close(tgl, [0])
    tape = Tape()
    y = tape.variable([[2.0, 3.0], [4.0, 5.0]])
    ad.backward(tape, ad.sum_all(tgl_forward(y, tgl, tape)))
    # g = 1 : dL/dw_i = Σ y_i
    np.testing.assert_allclose(tape.grad(tgl.weights), [6.0, 8.0])
    np.testing.assert_allclose(tape.gradients[y.node_id], [[1.0, 0.0], [1.0, 0.0]])


def test_tgl_forward_shape_mismatch():
    tgl = TrainableGateLayer.create("g", 3)
    with pytest.raises(DimensionError):
        tgl_forward(ad.as_tensor(np.ones((2, 4))), tgl, Tape())


def test_softmax_relaxation_is_channel_only():
    with pytest.raises(ArgumentError):
        TrainableGateLayer.create("g", 1, granularity="block", relaxation="softmax")


def test_softmax_relaxation_values_and_mask():
    tgl = TrainableGateLayer.create("g", 3, relaxation=Relaxation.SOFTMAX)
    tgl.weights.value = np.array([0.0, 2.0, 1.0])
    p = gate_values(tgl, Tape(frozen=[tgl.weights])).data
    assert p.sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(active_mask(tgl), [0, 1, 0])


def test_attach_gate_validation(sine_model, rng):
    with pytest.raises(ArgumentError):
        sine_model.attach_gate(1, TrainableGateLayer.create("act", 20, rng=rng))
    with pytest.raises(DimensionError):
        sine_model.attach_gate(2, TrainableGateLayer.create("output", 3, rng=rng))
    with pytest.raises(DimensionError):
        sine_model.attach_gate(0, TrainableGateLayer.create("hidden", 3, granularity="weight", rng=rng))


def test_weight_granularity_masks_kernel(rng):
    """Une porte par poids annule les éléments correspondants du noyau"""
    dense = Dense("d", 2, 2, bias=False, weight=np.array([[1.0, 2.0], [3.0, 4.0]]))
    model = GatedModel((2,), [dense, Dense("out", 2, 1, bias=False, rng=rng)])
    tgl = TrainableGateLayer.create("d", 4, granularity=Granularity.WEIGHT, rng=rng)
    model.attach_gate(0, tgl)
    assert dense.prunable is False
    _open_close(tgl, [0, 3])

    x = np.array([[1.0, 1.0]])
    masked = GatedModel((2,), [
        Dense("d", 2, 2, bias=False, weight=np.array([[1.0, 0.0], [0.0, 4.0]])),
        Dense("out", 2, 1, bias=False, weight=model.layers[1].weight.value),
    ])
    np.testing.assert_allclose(model.predict(x), masked.predict(x))


def test_weight_gate_on_conv_matches_masked_kernel(rng):
    """TG(w)⊙K sur une convolution = convolution par le noyau masqué à la main"""
    conv = Conv2D("c", 2, 3, kernel_size=3, rng=rng)
    conv.bias.value = rng.uniform(-0.5, 0.5, size=3)
    model = GatedModel((2, 5, 5), [conv])
    tgl = TrainableGateLayer.create("c", conv.weight.size, granularity="weight", rng=rng)
    model.attach_gate(0, tgl)
    _open_close(tgl, np.flatnonzero(rng.random(tgl.count) < 0.5))
    mask = active_mask(tgl).reshape(conv.weight.shape)

    tape = Tape()
    kernel = weight_gate_forward(tape.watch(conv.weight), tgl, tape)
    np.testing.assert_allclose(kernel.data, conv.weight.value * mask, rtol=0.0, atol=1e-10)

    masked = GatedModel((2, 5, 5), [
        Conv2D("c", 2, 3, kernel_size=3, weight=conv.weight.value * mask, bias_value=conv.bias.value),
    ])
    x = rng.standard_normal((4, 2, 5, 5))
    np.testing.assert_allclose(model.predict(x), masked.predict(x), rtol=0.0, atol=1e-10)


def test_block_gate_scales_whole_output(rng):
    model = GatedModel((2,), [Dense("d", 2, 3, rng=rng), Dense("out", 3, 1, rng=rng)])
    tgl = TrainableGateLayer.create("d", 1, granularity=Granularity.BLOCK, rng=rng)
    model.attach_gate(0, tgl)
    assert model.layers[0].prunable is True
    tgl.weights.value = np.array([-0.5])
    x = np.ones((2, 2))
    expected = np.tile(model.layers[1].bias.value, (2, 1))
    np.testing.assert_allclose(model.predict(x), expected)


# ====== Portes partagées ======

def _shared_model(rng) -> GatedModel:
    model = GatedModel((2,), [
        Dense("d1", 2, 3, rng=rng), Activation("a1", "sin"),
        Dense("d2", 3, 3, rng=rng), Activation("a2", "sin"),
        Dense("d3", 3, 1, rng=rng),
    ])
    model.attach_gate(0, TrainableGateLayer.create("d1", 3, rng=rng))
    model.attach_gate(2, TrainableGateLayer.create("d2", 3, rng=rng))
    share_gates([model.gates[0], model.gates[2]], "pair")
    return model


def test_share_gates_aliases_one_parameter(rng):
    model = _shared_model(rng)
    assert model.gates[0].weights is model.gates[2].weights
    assert len(model.gate_parameters()) == 1
    assert model.gates[2].share_group == "pair"


def test_share_gates_rejects_different_counts(rng):
    with pytest.raises(DimensionError):
        share_gates([TrainableGateLayer.create("a", 2, rng=rng), TrainableGateLayer.create("b", 3, rng=rng)], "g")


def test_shared_gate_gradient_accumulates(rng):
    """Le gradient d'une porte partagée somme les contributions de chaque usage"""
    model = _shared_model(rng)
    x = rng.standard_normal((5, 2))
    y = rng.standard_normal((5, 1))

    def loss_fn(tape):
        return ad.mse(model.forward(x, tape), y)

    result = check_gradients(loss_fn, model.parameters(), gate_m=gate_granularities(model.gate_items()))
    assert result.checked > 0
    assert result.passed(1e-4), result.per_param


# ====== Élagage structurel ======

def test_hard_prune_dense_matches_gated(sine_model):
    _open_close(sine_model.gates[0], [2, 7, 11])
    result = hard_prune(sine_model)
    compact = result.model
    assert compact.layers[0].n_out == 3
    assert compact.layers[2].n_in == 3
    assert not compact.gate_items()
    assert result.report[0]["channels_after"] == 3
    x = np.linspace(-3.0, 3.0, 11).reshape(-1, 1)
    np.testing.assert_allclose(compact.predict(x), sine_model.predict(x), rtol=1e-12, atol=1e-15)


def test_hard_prune_conv_across_flatten(cnn_model, rng):
    """Les lignes de la tête dense suivent la disposition c·HW + t après Flatten"""
    for _, layer in cnn_model.weighted_layers():
        layer.bias.value = rng.uniform(-0.5, 0.5, size=layer.n_out)
    _open_close(cnn_model.gates[0], [0, 2, 3])
    _open_close(cnn_model.gates[2], [1, 4])
    compact = hard_prune(cnn_model).model

    conv1, conv2, head = compact.layers[0], compact.layers[2], compact.layers[5]
    assert (conv1.n_in, conv1.n_out) == (1, 3)
    assert (conv2.n_in, conv2.n_out) == (3, 2)
    assert head.n_in == 2 * 4
    assert conv2.bias.shape == (2,)

    x = rng.uniform(0.0, 1.0, size=(4, 1, 8, 8))
    np.testing.assert_allclose(compact.predict(x), cnn_model.predict(x), rtol=1e-10, atol=1e-12)


def test_hard_prune_input_gate(rng):
    model = GatedModel((5,), [Dense("out", 5, 1, rng=rng)])
    gate = TrainableGateLayer.create(INPUT_KEY, 5, rng=rng)
    model.attach_input_gate(gate)
    _open_close(gate, [0, 2, 4])
    compact = hard_prune(model).model
    assert compact.input_selection == [0, 2, 4]
    assert compact.layers[0].n_in == 3
    x = rng.standard_normal((6, 5))
    np.testing.assert_allclose(compact.predict(x), model.predict(x), rtol=1e-12, atol=1e-15)


def test_hard_prune_rejects_weight_gates(rng):
    """Une porte par poids n'a pas de canal à retirer : l'élagage est refusé"""
    model = GatedModel((2,), [Dense("d", 2, 2, bias=False, rng=rng), Dense("out", 2, 1, rng=rng)])
    tgl = TrainableGateLayer.create("d", 4, granularity="weight", rng=rng)
    model.attach_gate(0, tgl)
    _open_close(tgl, [1, 2])
    with pytest.raises(UnprunableGateError) as exc:
        hard_prune(model)
    assert "d" in str(exc.value)
    np.testing.assert_array_equal(active_mask(tgl), [0, 1, 1, 0])


def test_hard_prune_degenerate(sine_model, rng):
    _open_close(sine_model.gates[0], [])
    with pytest.raises(DegenerateModelError):
        hard_prune(sine_model)

    model = GatedModel((2,), [Dense("d", 2, 3, rng=rng), Dense("out", 3, 1, rng=rng)])
    block = TrainableGateLayer.create("d", 1, granularity="block", rng=rng)
    model.attach_gate(0, block)
    block.weights.value = np.array([-0.5])
    with pytest.raises(DegenerateModelError):
        hard_prune(model)


def test_hard_prune_open_block_disappears(rng):
    model = GatedModel((2,), [Dense("d", 2, 3, rng=rng), Flatten("f"), Dense("out", 3, 1, rng=rng)])
    model.attach_gate(0, TrainableGateLayer.create("d", 1, granularity="block", rng=rng))
    compact = hard_prune(model).model
    assert compact.layers[0].n_out == 3
    assert not compact.gates
