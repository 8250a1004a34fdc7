"""LSTM, time reduction and attention layers."""

import copy

import numpy as np
import pytest

from modules.autodiff import Tensor, backward, mul, no_grad, sum_
from modules.errors import ShapeError
from modules.layers import (LstmLayer, MultiHeadAttention, TimeReduction, bilstm_forward, lstm_forward,
                            mha_attend, reverse_time, time_reduce)
from modules.verify import numeric_grad, relative_error


def test_lstm_forward_matches_stepwise_run(rng):
    layer = LstmLayer(3, 4, rng, projection_dim=2, init_scale=0.5)
    seq = Tensor(rng.normal(size=(5, 3)))
    outputs, (h_final, _) = lstm_forward(layer, seq)
    state = None
    for t in range(5):
        out, state = layer.step(Tensor(seq.data[t:t + 1]), state)
        assert np.allclose(out.data, outputs.data[t:t + 1])
    assert outputs.shape == (5, 2)
    assert np.allclose(h_final.data, state[0].data)


def test_lstm_gradient_matches_finite_differences(rng):
    layer = LstmLayer(2, 3, rng, projection_dim=2, init_scale=0.5)
    seq = Tensor(rng.normal(size=(4, 2)))
    weights = Tensor(rng.normal(size=(4, 2)))

    def loss_value():
        with no_grad():
            return float(sum_(mul(lstm_forward(layer, seq)[0], weights)).item())

    grads = backward(sum_(mul(lstm_forward(layer, seq)[0], weights)))
    for param in layer.params():
        index = tuple(int(rng.integers(0, s)) for s in param.shape)
        assert relative_error(grads.get(param)[index], numeric_grad(loss_value, param, index)) < 1e-4


def test_lstm_rejects_wrong_input_width(rng):
    layer = LstmLayer(3, 4, rng)
    with pytest.raises(ShapeError):
        lstm_forward(layer, Tensor(np.zeros((2, 5))))


def test_bilstm_concatenates_directions(rng):
    fwd, bwd = LstmLayer(3, 4, rng, projection_dim=2), LstmLayer(3, 4, rng, projection_dim=3)
    out = bilstm_forward(fwd, bwd, Tensor(rng.normal(size=(6, 3))))
    assert out.shape == (6, 5)


def test_bilstm_backward_half_sees_future_frames(rng):
    fwd, bwd = LstmLayer(2, 3, rng, init_scale=0.5), LstmLayer(2, 3, rng, init_scale=0.5)
    seq = rng.normal(size=(4, 2))
    changed = seq.copy()
    changed[3] += 1.0
    a = bilstm_forward(fwd, bwd, Tensor(seq)).data
    b = bilstm_forward(fwd, bwd, Tensor(changed)).data
    assert np.allclose(a[0, :3], b[0, :3])
    assert not np.allclose(a[0, 3:], b[0, 3:])


@pytest.mark.parametrize("length,expected", [(1, 1), (4, 2), (5, 3)])
def test_time_reduction_length(length, expected):
    out = time_reduce(TimeReduction(2), Tensor(np.ones((length, 3))))
    assert out.shape == (expected, 6)


def test_time_reduction_zero_pads_trailing_frame():
    seq = Tensor(np.arange(6, dtype=float).reshape(3, 2))
    out = time_reduce(TimeReduction(2), seq).data
    assert np.array_equal(out[1], [4.0, 5.0, 0.0, 0.0])


def test_time_reduction_needs_a_frame():
    with pytest.raises(ShapeError):
        time_reduce(TimeReduction(2), Tensor(np.zeros((0, 3))))


def test_attention_weights_are_distributions(rng):
    attn = MultiHeadAttention(3, 4, 6, 2, rng, init_scale=0.5)
    memory = attn.project_memory(Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(5, 4))))
    context, weights = attn.attend(Tensor(rng.normal(size=(1, 3))), memory)
    assert context.shape == (1, 6)
    assert len(weights) == 2
    for w in weights:
        assert w.shape == (5,)
        assert w.sum() == pytest.approx(1.0)


def test_attention_over_single_position_returns_projected_value(rng):
    attn = MultiHeadAttention(2, 2, 2, 1, rng, init_scale=0.5)
    value = Tensor(rng.normal(size=(1, 2)))
    context = mha_attend(attn, Tensor(rng.normal(size=(1, 2))), value, value)
    assert np.allclose(context.data, value.data @ attn.w_value.data @ attn.w_output.data)


def test_attention_empty_source_raises(rng):
    attn = MultiHeadAttention(2, 2, 2, 1, rng)
    with pytest.raises(ShapeError):
        mha_attend(attn, Tensor(np.zeros((1, 2))), Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))))


def test_heads_must_divide_model_dim(rng):
    with pytest.raises(ShapeError):
        MultiHeadAttention(2, 2, 5, 2, rng)


@pytest.mark.parametrize("position", [0, 2, 5])
def test_lstm_is_causal(rng, position):
    layer = LstmLayer(3, 4, rng, projection_dim=2, init_scale=0.5)
    seq = rng.normal(size=(6, 3))
    changed = seq.copy()
    changed[position] += rng.normal(size=3)
    a = lstm_forward(layer, Tensor(seq))[0].data
    b = lstm_forward(layer, Tensor(changed))[0].data
    assert np.array_equal(a[:position], b[:position])
    assert not np.allclose(a[position:], b[position:])


def test_lstm_with_zero_weights_outputs_zeros(rng):
    layer = LstmLayer(3, 4, rng, projection_dim=2)
    for param in layer.params():
        param.data = np.zeros_like(param.data)
    outputs, _ = lstm_forward(layer, Tensor(rng.normal(size=(4, 3))))
    assert np.array_equal(outputs.data, np.zeros((4, 2)))


def test_lstm_single_frame_equals_one_step(rng):
    layer = LstmLayer(3, 4, rng, init_scale=0.5)
    frame = Tensor(rng.normal(size=(1, 3)))
    outputs, _ = lstm_forward(layer, frame)
    assert np.array_equal(outputs.data, layer.step(frame)[0].data)


def test_bilstm_is_forward_plus_reversed_backward(rng):
    fwd, bwd = LstmLayer(2, 3, rng, init_scale=0.5), LstmLayer(2, 3, rng, init_scale=0.5)
    seq = Tensor(rng.normal(size=(5, 2)))
    expected = np.concatenate([lstm_forward(fwd, seq)[0].data,
                               reverse_time(lstm_forward(bwd, reverse_time(seq))[0]).data], axis=1)
    assert np.allclose(bilstm_forward(fwd, bwd, seq).data, expected, rtol=0, atol=1e-15)


def test_bilstm_on_palindrome_mirrors_halves(rng):
    fwd = LstmLayer(2, 3, rng, init_scale=0.5)
    bwd = copy.deepcopy(fwd)
    half = rng.normal(size=(2, 2))
    seq = np.concatenate([half, rng.normal(size=(1, 2)), half[::-1]])
    out = bilstm_forward(fwd, bwd, Tensor(seq)).data
    assert np.allclose(out[:, 3:], out[::-1, :3], rtol=0, atol=1e-15)


def test_attention_is_permutation_equivariant_over_memory(rng):
    attn = MultiHeadAttention(3, 4, 6, 2, rng, init_scale=0.5)
    query = Tensor(rng.normal(size=(1, 3)))
    keys, values = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    order = rng.permutation(5)
    a = mha_attend(attn, query, Tensor(keys), Tensor(values)).data
    b = mha_attend(attn, query, Tensor(keys[order]), Tensor(values[order])).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_identical_keys_give_uniform_weights(rng):
    attn = MultiHeadAttention(3, 4, 4, 2, rng, init_scale=0.5)
    keys = Tensor(np.tile(rng.normal(size=(1, 4)), (4, 1)))
    values = Tensor(rng.normal(size=(4, 4)))
    context, weights = attn.attend(Tensor(rng.normal(size=(1, 3))), attn.project_memory(keys, values))
    for w in weights:
        np.testing.assert_allclose(w, np.full(4, 0.25), rtol=0, atol=1e-12)
    expected = values.data.mean(axis=0, keepdims=True) @ attn.w_value.data @ attn.w_output.data
    np.testing.assert_allclose(context.data, expected, rtol=0, atol=1e-12)


def test_attention_with_zero_weights_outputs_zeros(rng):
    attn = MultiHeadAttention(2, 2, 2, 1, rng)
    for param in attn.params():
        param.data = np.zeros_like(param.data)
    context = mha_attend(attn, Tensor(rng.normal(size=(1, 2))), Tensor(rng.normal(size=(3, 2))),
                         Tensor(rng.normal(size=(3, 2))))
    assert np.array_equal(context.data, np.zeros((1, 2)))
