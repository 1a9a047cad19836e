"""Multi-stream joint CTC/attention model.

``N`` encoders (BLSTM or VGG+BLSTM) feed per-stream frame attention; a
stream-level attention fuses the per-stream context vectors for a one-layer
LSTM decoder.  Each stream owns a CTC head unless ``ctc_mode='shared'``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .attention import ContentAttention, StreamAttention, attend, han_fuse
from .ctc import LabelAlphabet, ctc_loss, multi_ctc_loss
from .layers import (InputTooShortError, Linear, LstmCell, LstmStack, Module, VggFrontEnd,
                     VGG_CHANNELS, _sigmoid, uniform_param)
from .numerics import ContractError, Tensor, _lse


class ConfigError(ValueError):
    pass


ENCODER_KINDS = ("blstm", "vggblstm")


@dataclass(frozen=True)
class StreamSpec:
    kind: str = "blstm"
    subsampling: int = 1
    layers: int = 2

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}")
        if self.subsampling not in (1, 2, 4):
            raise ConfigError(f"subsampling must be 1, 2 or 4, got {self.subsampling}")
        if self.kind == "vggblstm" and self.subsampling != 4:
            raise ConfigError("a vggblstm encoder always subsamples by 4")
        if self.layers < 0:
            raise ConfigError("layer count must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    n_symbols: int = 8
    feat_dim: int = 20
    streams: tuple[StreamSpec, ...] = (StreamSpec("blstm", 1, 2), StreamSpec("vggblstm", 4, 1))
    mode: str = "mem-res"
    enc_cells: int = 32
    enc_proj: int = 32
    att_dim: int = 32
    dec_cells: int = 32
    emb_dim: int = 16
    ctc_mode: str = "per-encoder"
    stream_attention: str = "han"
    vgg_channels: tuple[int, ...] = VGG_CHANNELS
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("mem-res", "mem-array"):
            raise ConfigError(f"mode must be mem-res or mem-array, got {self.mode!r}")
        if self.ctc_mode not in ("per-encoder", "shared"):
            raise ConfigError(f"ctc_mode must be per-encoder or shared, got {self.ctc_mode!r}")
        if self.stream_attention not in ("han", "fixed"):
            raise ConfigError(f"stream_attention must be han or fixed, got {self.stream_attention!r}")
        if not self.streams:
            raise ConfigError("at least one stream is required")
        if len(self.vgg_channels) != 4:
            raise ConfigError("vgg_channels needs four widths")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be positive")

    @property
    def n_streams(self) -> int:
        return len(self.streams)


def _decimation_schedule(s: int, layers: int) -> list[int]:
    steps = int(round(math.log2(s)))
    if layers >= steps:
        return [2] * steps + [1] * (layers - steps)
    return [1] * (layers - 1) + [s]


class Encoder(Module):
    """One stream's encoder; ``layers == 0`` yields an all-zero output of the
    stream's nominal length (the "no encoder" ablation)."""

    def __init__(self, spec: StreamSpec, cfg: ModelConfig, rng: np.random.Generator):
        self.spec = spec
        self.out_dim = cfg.enc_proj
        self.vgg = None
        self.rnn = None
        if spec.layers == 0:
            return
        if spec.kind == "vggblstm":
            self.vgg = VggFrontEnd(cfg.feat_dim, rng, cfg.vgg_channels)
            self.rnn = LstmStack(self.vgg.out_dim, cfg.enc_cells, spec.layers, rng,
                                 proj_dim=cfg.enc_proj)
        else:
            self.rnn = LstmStack(cfg.feat_dim, cfg.enc_cells, spec.layers, rng,
                                 proj_dim=cfg.enc_proj,
                                 decimations=_decimation_schedule(spec.subsampling, spec.layers))

    def output_length(self, T: int) -> int:
        if self.spec.kind == "vggblstm":
            return VggFrontEnd.output_length(T)
        if self.rnn is None:
            return T // self.spec.subsampling
        return self.rnn.output_length(T)

    def min_frames(self) -> int:
        return 4 if self.spec.kind == "vggblstm" else self.spec.subsampling

    def __call__(self, x: Tensor) -> Tensor:
        if self.rnn is None:
            return Tensor(np.zeros((self.output_length(x.shape[0]), self.out_dim)))
        h = self.vgg(x) if self.vgg is not None else x
        return self.rnn(h)


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    prev: int


class MultiStreamModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.alphabet = LabelAlphabet.letters(cfg.n_symbols)
        V = cfg.n_symbols
        K = self.alphabet.num_classes
        self.encoders = [Encoder(spec, cfg, rng) for spec in cfg.streams]
        n_heads = 1 if cfg.ctc_mode == "shared" else cfg.n_streams
        self.ctc_heads = [Linear(cfg.enc_proj, V + 1, rng) for _ in range(n_heads)]
        self.frame_att = [ContentAttention(cfg.dec_cells, cfg.enc_proj, cfg.att_dim, rng)
                          for _ in cfg.streams]
        self.stream_att = StreamAttention(cfg.dec_cells, cfg.enc_proj, cfg.att_dim, rng,
                                          fixed=cfg.stream_attention == "fixed")
        self.embed = uniform_param(rng, (K, cfg.emb_dim))
        self.decoder = LstmCell(cfg.emb_dim + cfg.enc_proj, cfg.dec_cells, rng)
        self.output = Linear(cfg.dec_cells, K, rng)
        if cfg.init_scale != 0.1:
            # U(-0.1, 0.1) * k is U(-0.1k, 0.1k): same draws, wider range
            for p in self.parameters():
                p.data *= cfg.init_scale / 0.1
        # unigram prior for label smoothing (blank never a target)
        prior = np.zeros(K)
        prior[1:] = 1.0 / (K - 1)
        self.unigram = prior

    # ------------------------------------------------------------- encoding

    @property
    def n_streams(self) -> int:
        return self.cfg.n_streams

    def ctc_head(self, i: int) -> Linear:
        return self.ctc_heads[0 if len(self.ctc_heads) == 1 else i]

    def set_unigram(self, transcripts: Sequence[Sequence[int]]) -> None:
        """Estimate the smoothing prior from training label counts (eos included)."""
        K = self.alphabet.num_classes
        counts = np.zeros(K)
        for seq in transcripts:
            for c in seq:
                counts[c] += 1
            counts[self.alphabet.eos_id] += 1
        if counts.sum() == 0:
            raise ContractError("cannot estimate a unigram prior from empty transcripts")
        self.unigram = counts / counts.sum()

    def _stream_inputs(self, inputs) -> list:
        if isinstance(inputs, (np.ndarray, Tensor)):
            inputs = [inputs]
        inputs = list(inputs)
        if len(inputs) == 1 and self.n_streams > 1:
            if self.cfg.mode == "mem-array":
                raise ContractError(f"mem-array model needs {self.n_streams} input streams, got 1")
            inputs = inputs * self.n_streams
        if len(inputs) != self.n_streams:
            raise ContractError(f"model has {self.n_streams} streams, got {len(inputs)} inputs")
        return [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]

    def encode(self, inputs) -> list[Tensor]:
        """Per-stream encoder outputs; stream i has output_length(T_i) frames."""
        xs = self._stream_inputs(inputs)
        out = []
        for i, (enc, x) in enumerate(zip(self.encoders, xs)):
            T = x.shape[0]
            if T < enc.min_frames() or enc.output_length(T) < 1:
                raise InputTooShortError(f"stream {i + 1}: {T} frames is too short for its encoder")
            out.append(enc(x))
        return out

    def encoded_lengths(self, frame_counts: Sequence[int]) -> list[int]:
        if len(frame_counts) == 1 and self.n_streams > 1:
            frame_counts = list(frame_counts) * self.n_streams
        return [enc.output_length(T) for enc, T in zip(self.encoders, frame_counts)]

    def ctc_logits(self, streams: Sequence[Tensor]) -> list[Tensor]:
        return [self.ctc_head(i)(H) for i, H in enumerate(streams)]

    # -------------------------------------------------------------- decoder

    def initial_state(self) -> DecoderState:
        h, c = self.decoder.zero_state()
        return DecoderState(h, c, self.alphabet.sos_id)

    def decoder_step(self, state: DecoderState, streams: Sequence[Tensor], keys: Sequence[Tensor]):
        """One label-synchronous step.

        Returns ``(logits, new_state_without_prev, frame_weights, stream_weights)``;
        callers set ``prev`` on the returned state once the emitted label is known.
        """
        contexts, weights = [], []
        for att, H, k in zip(self.frame_att, streams, keys):
            r, a = attend(att, state.h, H, k)
            contexts.append(r)
            weights.append(a)
        fused, beta = han_fuse(self.stream_att, state.h, contexts)
        x = nx.concat([self.embed[state.prev], fused])
        h, c = self.decoder(x, (state.h, state.c))
        return self.output(h), DecoderState(h, c, -1), weights, beta

    def attention_sequence_loss(self, streams: Sequence[Tensor], target: Sequence[int],
                                smoothing: float = 0.0, return_trace: bool = False):
        """Teacher-forced -log p_att(target + eos), summed over output steps."""
        eos = self.alphabet.eos_id
        ys_in = [self.alphabet.sos_id, *target]
        ys_out = [*target, eos]
        keys = [att.project_keys(H) for att, H in zip(self.frame_att, streams)]
        state = self.initial_state()
        logits, trace = [], []
        for prev in ys_in:
            state.prev = prev
            lo, state, a, beta = self.decoder_step(state, streams, keys)
            logits.append(lo)
            if return_trace:
                trace.append((a, beta))
        logp = nx.log_softmax(nx.stack(logits))
        nll = -nx.sum_(logp[np.arange(len(ys_out)), np.asarray(ys_out)])
        if smoothing > 0.0:
            prior_term = -nx.sum_(nx.matmul(logp, Tensor(self.unigram)))
            loss = nll * (1.0 - smoothing) + prior_term * smoothing
        else:
            loss = nll
        if return_trace:
            return loss, logp, trace
        return loss

    def step_log_probs(self, inputs, target: Sequence[int]) -> np.ndarray:
        """Teacher-forced per-step output log-distributions, (L+1) x K."""
        streams = self.encode(inputs)
        _, logp, _ = self.attention_sequence_loss(streams, target, return_trace=True)
        return logp.data

    # ------------------------------------------------------ batched decoding

    def decode_step_numpy(self, h: np.ndarray, c: np.ndarray, prev: np.ndarray,
                          streams: Sequence[np.ndarray], keys: Sequence[np.ndarray]):
        """Graph-free decoder step for B hypotheses at once.

        Returns ``(log_probs (B,K), h, c, [a_i (B,T_i)], beta (B,N))``.
        """
        contexts, weights = [], []
        for att, H, k in zip(self.frame_att, streams, keys):
            e = np.tanh(k[None, :, :] + (h @ att.query.weight.data.T)[:, None, :]) @ att.g.data
            a = _softmax_rows(e)
            contexts.append(a @ H)
            weights.append(a)
        N = len(contexts)
        if N == 1:
            beta = np.ones((h.shape[0], 1))
            fused = contexts[0]
        else:
            R = np.stack(contexts, axis=1)  # B x N x P
            if self.stream_att.fixed:
                beta = np.full((h.shape[0], N), 1.0 / N)
            else:
                sa = self.stream_att.att
                kk = R @ sa.key.weight.data.T + sa.key.bias.data
                e = np.tanh(kk + (h @ sa.query.weight.data.T)[:, None, :]) @ sa.g.data
                beta = _softmax_rows(e)
            fused = np.einsum("bn,bnp->bp", beta, R)
        x = np.concatenate([self.embed.data[prev], fused], axis=1)
        cell = self.decoder
        Hd = cell.cells
        z = x @ cell.w_ih.data.T + cell.bias.data + h @ cell.w_hh.data.T
        i = _sigmoid(z[:, :Hd])
        f = _sigmoid(z[:, Hd:2 * Hd])
        g = np.tanh(z[:, 2 * Hd:3 * Hd])
        o = _sigmoid(z[:, 3 * Hd:])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        logits = h_new @ self.output.weight.data.T + self.output.bias.data
        return logits - _lse(logits, axis=1, keepdims=True), h_new, c_new, weights, beta


def _softmax_rows(e: np.ndarray) -> np.ndarray:
    z = np.exp(e - e.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def encode(model: MultiStreamModel, inputs) -> list[Tensor]:
    return model.encode(inputs)


def attention_sequence_loss(model: MultiStreamModel, streams, target, smoothing: float = 0.0):
    return model.attention_sequence_loss(streams, target, smoothing)


def mtl_loss(model: MultiStreamModel, inputs, target: Sequence[int], ctc_weight: float,
             smoothing: float = 0.0) -> Tensor:
    """ctc_weight * mean_i CTC_i + (1 - ctc_weight) * attention loss.

    An infeasible CTC target gives +inf (unrecorded) unless ``ctc_weight == 0``.
    """
    if not 0.0 <= ctc_weight <= 1.0:
        raise ConfigError(f"CTC weight must lie in [0, 1], got {ctc_weight}")
    streams = model.encode(inputs)
    terms = []
    if ctc_weight > 0.0:
        ctc = multi_ctc_loss([ctc_loss(lo, target) for lo in model.ctc_logits(streams)])
        if not np.isfinite(ctc.data):
            return Tensor(np.inf)
        terms.append(ctc * ctc_weight)
    if ctc_weight < 1.0:
        terms.append(model.attention_sequence_loss(streams, target, smoothing) * (1.0 - ctc_weight))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def tie_streams(model: MultiStreamModel, source: int = 0) -> None:
    """Copy stream ``source``'s encoder, frame attention and CTC head into every stream."""
    src_params = dict(model.encoders[source].named_parameters())
    att_params = dict(model.frame_att[source].named_parameters())
    for i in range(model.n_streams):
        if i == source:
            continue
        for name, p in model.encoders[i].named_parameters():
            p.data[...] = src_params[name].data
        for name, p in model.frame_att[i].named_parameters():
            p.data[...] = att_params[name].data
    if len(model.ctc_heads) > 1:
        for i in range(len(model.ctc_heads)):
            model.ctc_heads[i].weight.data[...] = model.ctc_heads[source].weight.data
            model.ctc_heads[i].bias.data[...] = model.ctc_heads[source].bias.data


def single_stream_config(cfg: ModelConfig, stream: int) -> ModelConfig:
    return replace(cfg, streams=(cfg.streams[stream],), mode="mem-res")
