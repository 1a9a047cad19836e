"""Character-level recurrent LM supplying the shallow-fusion term in decoding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .ctc import AlphabetError, LabelAlphabet
from .layers import Linear, LstmCell, Module, lstm_cell_numpy, uniform_param
from .numerics import Tensor, _lse

log = logging.getLogger(__name__)


class LmConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LmConfig:
    n_symbols: int = 8
    emb_dim: int = 16
    cells: int = 32
    seed: int = 0


@dataclass
class LmState:
    h: np.ndarray
    c: np.ndarray
    log_probs: np.ndarray  # next-symbol distribution over U + eos


class CharLm(Module):
    """Embedding -> one LSTM layer -> softmax over the alphabet plus eos.

    Input ids follow the shared alphabet layout (sos == eos == V+1); output
    index ``k-1`` is symbol ``k`` and index ``V`` is eos.
    """

    def __init__(self, cfg: LmConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.alphabet = LabelAlphabet.letters(cfg.n_symbols)
        self.embed = uniform_param(rng, (self.alphabet.num_classes, cfg.emb_dim))
        self.cell = LstmCell(cfg.emb_dim, cfg.cells, rng)
        self.output = Linear(cfg.cells, cfg.n_symbols + 1, rng)

    @classmethod
    def uniform(cls, n_symbols: int, **kw) -> "CharLm":
        lm = cls(LmConfig(n_symbols=n_symbols, **kw))
        lm.output.weight.data[...] = 0.0
        lm.output.bias.data[...] = 0.0
        return lm

    def out_index(self, c: int) -> int:
        V = self.cfg.n_symbols
        if c == self.alphabet.eos_id:
            return V
        if not 1 <= c <= V:
            raise AlphabetError(f"LM cannot score id {c}")
        return c - 1

    # ---------------------------------------------------------- incremental

    def step_batch(self, h: np.ndarray, c: np.ndarray, tokens: np.ndarray):
        """Consume ``tokens`` (B,) for B states; returns ``(h, c, log_probs (B, V+1))``."""
        h, c = lstm_cell_numpy(self.cell, self.embed.data[tokens], h, c)
        logits = h @ self.output.weight.data.T + self.output.bias.data
        return h, c, logits - _lse(logits, axis=-1, keepdims=True)

    def initial_state(self) -> LmState:
        H = self.cfg.cells
        h, c, lp = self.step_batch(np.zeros((1, H)), np.zeros((1, H)),
                                   np.array([self.alphabet.sos_id]))
        return LmState(h[0], c[0], lp[0])

    # ---------------------------------------------------------- whole-sequence

    def sequence_log_probs(self, labels: Sequence[int]) -> Tensor:
        """Per-position log p(next | prefix) for labels + eos, as one graph."""
        eos = self.alphabet.eos_id
        inputs = [self.alphabet.sos_id, *labels]
        targets = [self.out_index(c) for c in [*labels, eos]]
        state = self.cell.zero_state()
        outs = []
        for tok in inputs:
            state = self.cell(self.embed[tok], state)
            outs.append(self.output(state[0]))
        logp = nx.log_softmax(nx.stack(outs))
        return logp[np.arange(len(targets)), np.asarray(targets)]

    def score(self, labels: Sequence[int]) -> float:
        """log p_lm(labels + eos) in one pass."""
        return float(np.sum(self.sequence_log_probs(labels).data))


def lm_score_extend(lm: CharLm, state: LmState, c: int) -> tuple[LmState, float]:
    """Score ``c`` after the prefix summarised by ``state``; eos leaves the state as is."""
    lp = float(state.log_probs[lm.out_index(c)])
    if c == lm.alphabet.eos_id:
        return state, lp
    h, cc, dist = lm.step_batch(state.h[None], state.c[None], np.array([c]))
    return LmState(h[0], cc[0], dist[0]), lp


def perplexity(lm: CharLm, transcripts: Sequence[Sequence[int]]) -> float:
    nll, n = 0.0, 0
    for seq in transcripts:
        nll -= lm.score(seq)
        n += len(seq) + 1
    return math.exp(nll / max(n, 1))


def lm_train(lm: CharLm, transcripts: Sequence[Sequence[int]], epochs: int = 10,
             lr: float = 0.5, batch_size: int = 16, clip: float = 5.0,
             held_out: Sequence[Sequence[int]] | None = None, seed: int = 0) -> dict:
    """Plain SGD on next-symbol cross entropy (mean per token within a batch).

    Returns ``{"perplexity_before", "perplexity_after", "history"}`` measured on
    ``held_out`` (falls back to the training transcripts).
    """
    from .training import clip_grad_norm

    transcripts = [list(t) for t in transcripts]
    if not transcripts:
        raise LmConfigError("LM training needs a non-empty transcript corpus")
    held_out = [list(t) for t in held_out] if held_out else transcripts
    params = lm.parameters()
    rng = np.random.default_rng(seed)
    before = perplexity(lm, held_out)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(transcripts))
        for start in range(0, len(order), batch_size):
            batch = [transcripts[i] for i in order[start:start + batch_size]]
            n_tok = sum(len(s) + 1 for s in batch)
            nx.zero_grad(params)
            for seq in batch:
                with nx.Tape() as tape:
                    loss = -nx.sum_(lm.sequence_log_probs(seq)) * (1.0 / n_tok)
                    nx.backward(loss, tape)
            clip_grad_norm(params, clip)
            for p in params:
                if p.grad is not None:
                    p.data -= lr * p.grad
        ppl = perplexity(lm, held_out)
        history.append(ppl)
        log.info("lm epoch %d held-out perplexity %.3f", epoch + 1, ppl)
    return {"perplexity_before": before, "perplexity_after": history[-1] if history else before,
            "history": history}
