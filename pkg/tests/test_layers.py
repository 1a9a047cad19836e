import numpy as np
import pytest
from hypothesis import given, strategies as st

from mse2e import numerics as nx
from mse2e.layers import (Conv2d, InputTooShortError, Linear, LstmCell, LstmLayer, LstmStack,
                          VggFrontEnd, conv2d_same, lstm_cell_numpy, lstm_sequence, maxpool2x2)
from mse2e.numerics import DimensionError, Tensor


def _scale(module, k):
    for p in module.parameters():
        p.data *= k


def _cell_reference(x, w_ih, w_hh, b, reverse):
    """Unrolled per-step LSTM written directly from the gate equations."""
    H = w_hh.shape[1]
    sig = lambda v: 1 / (1 + np.exp(-v))
    h, c = np.zeros(H), np.zeros(H)
    out = np.zeros((len(x), H))
    order = range(len(x) - 1, -1, -1) if reverse else range(len(x))
    for t in order:
        z = w_ih @ x[t] + w_hh @ h + b
        i, f, g, o = sig(z[:H]), sig(z[H:2 * H]), np.tanh(z[2 * H:3 * H]), sig(z[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out[t] = h
    return out


@pytest.mark.parametrize("reverse", [False, True])
def test_fused_lstm_matches_unrolled_reference(reverse, rng):
    x = rng.normal(size=(7, 3))
    w_ih, w_hh, b = rng.normal(size=(16, 3)), rng.normal(size=(16, 4)), rng.normal(size=16)
    y = lstm_sequence(Tensor(x), Tensor(w_ih), Tensor(w_hh), Tensor(b), reverse=reverse).data
    assert np.allclose(y, _cell_reference(x, w_ih, w_hh, b, reverse), atol=1e-14)


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_sequence_gradients(reverse, rng):
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w_ih = Tensor(rng.normal(size=(8, 3)) * 0.5, requires_grad=True)
    w_hh = Tensor(rng.normal(size=(8, 2)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=8) * 0.5, requires_grad=True)
    wt = Tensor(rng.normal(size=(5, 2)))
    errs = nx.gradient_check(lambda: nx.sum_(lstm_sequence(x, w_ih, w_hh, b, reverse) * wt),
                             [("x", x), ("w_ih", w_ih), ("w_hh", w_hh), ("b", b)])
    assert max(errs.values()) < 1e-6, errs


def test_lstm_cell_matches_batched_numpy_step(rng):
    cell = LstmCell(3, 4, rng)
    _scale(cell, 5)
    x, h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    hn, cn = lstm_cell_numpy(cell, x, h, c)
    for b in range(2):
        ht, ct = cell(Tensor(x[b]), (Tensor(h[b]), Tensor(c[b])))
        assert np.allclose(ht.data, hn[b], atol=1e-14) and np.allclose(ct.data, cn[b], atol=1e-14)


def test_blstm_layer_shapes_and_projection(rng):
    layer = LstmLayer(5, 6, rng, bidirectional=True, proj_dim=3)
    y = layer(Tensor(rng.normal(size=(9, 5))))
    assert y.shape == (9, 3) and np.all(np.abs(y.data) < 1)
    assert LstmLayer(5, 6, rng, bidirectional=False).out_dim == 6
    assert LstmLayer(5, 6, rng).out_dim == 12


@given(st.integers(1, 40), st.lists(st.sampled_from([1, 2]), min_size=1, max_size=3))
def test_stack_output_length_is_floor_of_decimation(T, decs):
    stack = LstmStack(2, 2, len(decs), np.random.default_rng(0), proj_dim=2, decimations=decs)
    expect = T
    for d in decs:
        expect //= d
    assert stack.output_length(T) == expect
    if expect > 0:
        assert stack(Tensor(np.ones((T, 2)))).shape == (expect, 2)


def test_stack_errors(rng):
    stack = LstmStack(3, 2, 1, rng)
    with pytest.raises(InputTooShortError):
        stack(Tensor(np.zeros((0, 3))))
    with pytest.raises(DimensionError):
        stack(Tensor(np.zeros((4, 2))))


def test_stack_gradients_through_projection_and_decimation(rng):
    stack = LstmStack(3, 3, 2, rng, proj_dim=2, decimations=[2, 1])
    _scale(stack, 5)
    x = Tensor(rng.normal(size=(6, 3)))
    w = Tensor(rng.normal(size=(3, 2)))
    errs = nx.gradient_check(lambda: nx.sum_(stack(x) * w), list(stack.named_parameters()))
    assert max(errs.values()) < 1e-6, errs


def test_conv2d_matches_direct_correlation(rng):
    x, w, b = rng.normal(size=(2, 5, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    y = conv2d_same(Tensor(x), Tensor(w), Tensor(b)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 5, 4))
    for o in range(3):
        for i in range(5):
            for j in range(4):
                ref[o, i, j] = np.sum(w[o] * xp[:, i:i + 3, j:j + 3]) + b[o]
    assert np.allclose(y, ref, atol=1e-12)


def test_conv_and_pool_gradients(rng):
    conv = Conv2d(2, 3, rng)
    _scale(conv, 5)
    x = Tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)
    wt = Tensor(rng.normal(size=(3, 2, 3)))
    errs = nx.gradient_check(lambda: nx.sum_(maxpool2x2(nx.tanh(conv(x))) * wt),
                             [("x", x), *conv.named_parameters()])
    assert max(errs.values()) < 1e-6, errs


def test_maxpool_floor_semantics():
    x = np.arange(2 * 5 * 3, dtype=float).reshape(2, 5, 3)
    y = maxpool2x2(Tensor(x)).data
    assert y.shape == (2, 2, 1)
    assert y[0, 0, 0] == x[0, :2, :2].max() and y[1, 1, 0] == x[1, 2:4, :2].max()


@pytest.mark.parametrize("T,D", [(4, 4), (9, 7), (17, 20)])
def test_vgg_output_geometry(T, D, rng):
    fe = VggFrontEnd(D, rng, channels=(2, 2, 3, 3))
    y = fe(Tensor(rng.normal(size=(T, D))))
    assert y.shape == (T // 4, 3 * (D // 4)) == (fe.output_length(T), fe.out_dim)


def test_vgg_rejects_short_input(rng):
    fe = VggFrontEnd(8, rng, channels=(2, 2, 2, 2))
    with pytest.raises(InputTooShortError):
        fe(Tensor(np.zeros((3, 8))))


def test_vgg_gradients(rng):
    fe = VggFrontEnd(4, rng, channels=(2, 2, 2, 2))
    _scale(fe, 8)
    x = Tensor(rng.normal(size=(5, 4)))
    errs = nx.gradient_check(lambda: nx.sum_(nx.tanh(fe(x))), list(fe.named_parameters()))
    assert max(errs.values()) < 1e-6, errs


def test_default_vgg_channels_match_table(rng):
    fe = VggFrontEnd(20, rng)
    shapes = [c.weight.shape for c in fe.convs]
    assert shapes == [(64, 1, 3, 3), (64, 64, 3, 3), (128, 64, 3, 3), (128, 128, 3, 3)]
    assert fe.out_dim == 128 * 5


def test_parameter_discovery_names(rng):
    lin = Linear(3, 2, rng)
    assert [n for n, _ in lin.named_parameters()] == ["weight", "bias"]
    assert lin.num_parameters() == 8
    stack = LstmStack(3, 2, 2, rng, proj_dim=2)
    names = [n for n, _ in stack.named_parameters()]
    assert "layers.1.bwd.w_hh" in names and "layers.0.proj.weight" in names
