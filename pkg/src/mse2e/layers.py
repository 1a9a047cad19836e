"""Linear, LSTM and VGG building blocks.

The recurrent and convolutional kernels are single fused tape operations with
hand-written backward passes; per-time-step graph recording would dominate the
cost of training at any useful size.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ContractError, DimensionError, Tensor, _make, _sigmoid


class InputTooShortError(ValueError):
    pass


class Module:
    """Minimal parameter container; attributes that are parameters or
    sub-modules (or lists of them) are discovered by :meth:`named_parameters`."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(value, name: str):
    if isinstance(value, Tensor) and value.requires_grad:
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def uniform_param(rng: np.random.Generator, shape, scale: float = 0.1) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


class Linear(Module):
    """y = x W^T (+ b); ``bias=False`` is the bias-free variant."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_param(rng, (out_dim, in_dim))
        self.bias = uniform_param(rng, (out_dim,)) if bias else None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias)


# ---------------------------------------------------------------- LSTM kernel

def lstm_sequence(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over ``x`` (T x D); returns hidden states (T x H).

    Gate layout along the 4H axis is input, forget, cell, output.  Initial
    hidden and cell states are zero.
    """
    T = x.shape[0]
    H = w_hh.shape[1]
    if x.data.ndim != 2 or x.shape[1] != w_ih.shape[1]:
        raise DimensionError(f"lstm input {x.shape} does not match weight {w_ih.shape}")
    if T == 0:
        return _make(np.zeros((0, H)), (x, w_ih, w_hh, bias), lambda g: (None, None, None, None))
    xs = x.data[::-1] if reverse else x.data
    pre = xs @ w_ih.data.T + bias.data
    Whh = w_hh.data
    hs = np.zeros((T + 1, H))
    cs = np.zeros((T + 1, H))
    gates = np.empty((T, 4 * H))
    for t in range(T):
        z = pre[t] + hs[t] @ Whh.T
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H:2 * H])
        g = np.tanh(z[2 * H:3 * H])
        o = _sigmoid(z[3 * H:])
        cs[t + 1] = f * cs[t] + i * g
        hs[t + 1] = o * np.tanh(cs[t + 1])
        gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H], gates[t, 3 * H:] = i, f, g, o
    out = hs[1:][::-1].copy() if reverse else hs[1:].copy()

    def bw(gout):
        gh_seq = gout[::-1] if reverse else gout
        dpre = np.empty((T, 4 * H))
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in range(T - 1, -1, -1):
            i, f, g, o = gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H], gates[t, 3 * H:]
            tc = np.tanh(cs[t + 1])
            dh = gh_seq[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dpre[t]
            dz[:H] = dc * g * i * (1.0 - i)
            dz[H:2 * H] = dc * cs[t] * f * (1.0 - f)
            dz[2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ Whh
        dWhh = dpre.T @ hs[:T]
        dWih = dpre.T @ xs
        db = dpre.sum(axis=0)
        dx = dpre @ w_ih.data
        if reverse:
            dx = dx[::-1]
        return dx, dWih, dWhh, db

    return _make(out, (x, w_ih, w_hh, bias), bw)


class LstmDirection(Module):
    def __init__(self, in_dim: int, cells: int, rng: np.random.Generator):
        self.w_ih = uniform_param(rng, (4 * cells, in_dim))
        self.w_hh = uniform_param(rng, (4 * cells, cells))
        self.bias = uniform_param(rng, (4 * cells,))

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        return lstm_sequence(x, self.w_ih, self.w_hh, self.bias, reverse=reverse)


class LstmLayer(Module):
    def __init__(self, in_dim: int, cells: int, rng: np.random.Generator,
                 bidirectional: bool = True, proj_dim: int | None = None, decimation: int = 1):
        if decimation < 1:
            raise ContractError(f"decimation must be >= 1, got {decimation}")
        self.fwd = LstmDirection(in_dim, cells, rng)
        self.bwd = LstmDirection(in_dim, cells, rng) if bidirectional else None
        raw = cells * (2 if bidirectional else 1)
        self.proj = Linear(raw, proj_dim, rng) if proj_dim else None
        self.decimation = decimation

    @property
    def out_dim(self) -> int:
        if self.proj is not None:
            return self.proj.out_dim
        return self.fwd.w_hh.shape[1] * (2 if self.bwd is not None else 1)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fwd(x)
        if self.bwd is not None:
            h = nx.concat([h, self.bwd(x, reverse=True)], axis=1)
        if self.proj is not None:
            h = nx.tanh(self.proj(h))
        d = self.decimation
        if d > 1:
            keep = (h.shape[0] // d) * d
            h = h[0:keep:d]
        return h


class LstmStack(Module):
    """Stacked (B)LSTM with optional per-layer projection and frame dropping."""

    def __init__(self, in_dim: int, cells: int, n_layers: int, rng: np.random.Generator,
                 bidirectional: bool = True, proj_dim: int | None = None,
                 decimations: Sequence[int] | None = None):
        decimations = list(decimations) if decimations is not None else [1] * n_layers
        if len(decimations) != n_layers:
            raise ContractError("one decimation factor per layer is required")
        self.layers = []
        dim = in_dim
        for d in decimations:
            layer = LstmLayer(dim, cells, rng, bidirectional, proj_dim, d)
            self.layers.append(layer)
            dim = layer.out_dim
        self.in_dim = in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else self.in_dim

    @property
    def decimations(self) -> list[int]:
        return [layer.decimation for layer in self.layers]

    def output_length(self, T: int) -> int:
        for d in self.decimations:
            T //= d
        return T

    def __call__(self, x: Tensor) -> Tensor:
        return lstm_forward(self, x)


def lstm_forward(stack: LstmStack, x: Tensor) -> Tensor:
    if x.shape[0] == 0:
        raise InputTooShortError("LSTM input has no frames")
    if x.shape[1] != stack.in_dim:
        raise DimensionError(f"LSTM stack expects {stack.in_dim}-dim input, got {x.shape[1]}")
    h = x
    for layer in stack.layers:
        h = layer(h)
    return h


class LstmCell(Module):
    """Single-step LSTM used by the label-synchronous decoder and the LM."""

    def __init__(self, in_dim: int, cells: int, rng: np.random.Generator):
        self.w_ih = uniform_param(rng, (4 * cells, in_dim))
        self.w_hh = uniform_param(rng, (4 * cells, cells))
        self.bias = uniform_param(rng, (4 * cells,))
        self.cells = cells

    def zero_state(self) -> tuple[Tensor, Tensor]:
        return Tensor(np.zeros(self.cells)), Tensor(np.zeros(self.cells))

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h, c = state
        H = self.cells
        z = nx.linear(x, self.w_ih, self.bias) + nx.linear(h, self.w_hh)
        i = nx.sigmoid(z[:H])
        f = nx.sigmoid(z[H:2 * H])
        g = nx.tanh(z[2 * H:3 * H])
        o = nx.sigmoid(z[3 * H:])
        c_new = f * c + i * g
        h_new = o * nx.tanh(c_new)
        return h_new, c_new


def lstm_cell_numpy(cell: LstmCell, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    """Graph-free batched step; rows of ``x``, ``h``, ``c`` are independent."""
    H = cell.cells
    z = x @ cell.w_ih.data.T + cell.bias.data + h @ cell.w_hh.data.T
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


# ------------------------------------------------------------------ VGG parts

def conv2d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution with one-pixel zero padding; x is (C, H, W)."""
    C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise DimensionError(f"conv expects {Ci} input channels, got {C}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * kh * kw, H * W)
    w2 = weight.data.reshape(O, -1)
    y = (w2 @ cols + bias.data[:, None]).reshape(O, H, W)

    def bw(g):
        G = g.reshape(O, H * W)
        dw = (G @ cols.T).reshape(weight.shape)
        db = G.sum(axis=1)
        dcols = (w2.T @ G).reshape(C, kh, kw, H, W)
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                dxp[:, a:a + H, b:b + W] += dcols[:, a, b]
        return dxp[:, ph:ph + H, pw:pw + W], dw, db

    return _make(y, (x, weight, bias), bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped."""
    C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    blocks = x.data[:, :2 * H2, :2 * W2].reshape(C, H2, 2, W2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H2, W2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((C, H2, W2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((C, H, W))
        gx[:, :2 * H2, :2 * W2] = gb.reshape(C, H2, W2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, 2 * H2, 2 * W2)
        return (gx,)

    return _make(y, (x,), bw)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, kernel: int = 3):
        self.weight = uniform_param(rng, (out_ch, in_ch, kernel, kernel))
        self.bias = uniform_param(rng, (out_ch,))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_same(x, self.weight, self.bias)


VGG_CHANNELS = (64, 64, 128, 128)


class VggFrontEnd(Module):
    """conv-conv-pool-conv-conv-pool over the (time, feature) plane.

    Each stride-2 pool halves both axes (floor), so T frames of D features
    become floor(T/4) frames of channels[-1] * floor(D/4) features.
    """

    def __init__(self, in_dim: int, rng: np.random.Generator, channels: Sequence[int] = VGG_CHANNELS):
        c1, c2, c3, c4 = channels
        self.convs = [Conv2d(1, c1, rng), Conv2d(c1, c2, rng), Conv2d(c2, c3, rng), Conv2d(c3, c4, rng)]
        self.in_dim = in_dim
        self.out_channels = c4

    @property
    def out_dim(self) -> int:
        return self.out_channels * ((self.in_dim // 2) // 2)

    @staticmethod
    def output_length(T: int) -> int:
        return (T // 2) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return vgg_forward(self, x)


def vgg_forward(fe: VggFrontEnd, x: Tensor) -> Tensor:
    T, D = x.shape
    if T < 4:
        raise InputTooShortError(f"VGG front end needs at least 4 frames, got {T}")
    if D < 4:
        raise InputTooShortError(f"VGG front end needs at least 4 feature dims, got {D}")
    if D != fe.in_dim:
        raise DimensionError(f"VGG front end expects {fe.in_dim}-dim input, got {D}")
    h = nx.reshape(x, (1, T, D))
    c1, c2, c3, c4 = fe.convs
    h = nx.relu(c2(nx.relu(c1(h))))
    h = maxpool2x2(h)
    h = nx.relu(c4(nx.relu(c3(h))))
    h = maxpool2x2(h)
    C, T4, D4 = h.shape
    h = nx.transpose(h, (1, 0, 2))
    return nx.reshape(h, (T4, C * D4))
