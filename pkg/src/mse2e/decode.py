"""Label-synchronous joint CTC/attention beam search with LM shallow fusion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ctc import CtcPrefixState, collapse, ctc_prefix_extend_all, ctc_prefix_init
from .lm import CharLm
from .model import ConfigError, MultiStreamModel
from .numerics import _lse

log = logging.getLogger(__name__)

NEG_INF = float("-inf")


@dataclass(frozen=True)
class BeamConfig:
    width: int = 20
    ctc_weight: float = 0.3
    lm_weight: float = 1.0
    maxlen_ratio: float = 1.0
    max_len: int | None = None  # absolute cap, overrides the ratio when set
    nbest: int = 1
    length_bonus: float = 0.0

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError(f"beam width must be >= 1, got {self.width}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc weight must lie in [0, 1], got {self.ctc_weight}")
        if self.lm_weight < 0:
            raise ConfigError(f"lm weight must be >= 0, got {self.lm_weight}")
        if self.maxlen_ratio <= 0:
            raise ConfigError("maxlen_ratio must be positive")
        if self.max_len is not None and self.max_len < 0:
            raise ConfigError("max_len must be >= 0")
        if self.nbest < 1:
            raise ConfigError("nbest must be >= 1")


def joint_score(ctc_scores: Sequence[float], att: float, lm: float,
                ctc_weight: float, lm_weight: float) -> float:
    """lambda * mean_i ctc_i + (1 - lambda) * att + gamma * lm.

    A zero weight drops its term entirely, so -inf parts under weight 0 do not
    turn into nan.
    """
    total = 0.0
    if ctc_weight > 0.0:
        total += ctc_weight * (math.fsum(ctc_scores) / len(ctc_scores))
    if ctc_weight < 1.0:
        total += (1.0 - ctc_weight) * att
    if lm_weight > 0.0:
        total += lm_weight * lm
    return total


@dataclass
class Hypothesis:
    labels: tuple[int, ...]
    score: float
    att: float
    ctc: list[float]
    lm: float
    h: np.ndarray
    c: np.ndarray
    ctc_states: list[CtcPrefixState] | None
    lm_state: tuple[np.ndarray, np.ndarray, np.ndarray] | None
    finished: bool = False
    frame_weights: list[list[np.ndarray]] = field(default_factory=list)
    stream_weights: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> tuple[int, ...]:
        """Labels without the trailing eos."""
        return self.labels[:-1] if self.finished else self.labels


@dataclass
class BeamResult:
    best: Hypothesis
    nbest: list[Hypothesis]
    unfinished: bool  # no hypothesis reached eos within the length bound
    max_len: int


def ctc_greedy_decode(log_posteriors: np.ndarray) -> list[int]:
    """Frame-wise argmax, then merge repeats and drop blanks."""
    return collapse(list(np.argmax(log_posteriors, axis=1)))


def _sort_key(score: float, labels: tuple[int, ...]):
    return (-score, labels)


@dataclass
class EncodedUtterance:
    """Everything the search reads from the encoder side, as plain arrays."""

    streams: list[np.ndarray]
    keys: list[np.ndarray]
    ctc_logp: list[np.ndarray]


def encode_utterance(model: MultiStreamModel, inputs) -> EncodedUtterance:
    hs = model.encode(inputs)
    streams = [H.data for H in hs]
    keys = [H @ att.key.weight.data.T + att.key.bias.data for att, H in zip(model.frame_att, streams)]
    ctc_logp = []
    for i, H in enumerate(streams):
        head = model.ctc_head(i)
        z = H @ head.weight.data.T + head.bias.data
        ctc_logp.append(z - _lse(z, axis=1, keepdims=True))
    return EncodedUtterance(streams, keys, ctc_logp)


Probe = Callable[[str, np.ndarray], None]


def beam_search(model: MultiStreamModel, lm: CharLm | None, inputs, cfg: BeamConfig,
                probe: Probe | None = None, encoded: EncodedUtterance | None = None) -> BeamResult:
    """Search for argmax over finished hypotheses of the joint score.

    ``probe(kind, rows)`` is called with every distribution the search
    computes ("att", "frame_att", "stream_att", "lm", "ctc").
    """
    alphabet = model.alphabet
    V, eos, sos = alphabet.size, alphabet.eos_id, alphabet.sos_id
    use_ctc = cfg.ctc_weight > 0.0
    use_lm = lm is not None and cfg.lm_weight > 0.0
    if use_lm and lm.alphabet != alphabet:
        raise ConfigError("model and LM use different alphabets")
    enc = encoded if encoded is not None else encode_utterance(model, inputs)
    if cfg.max_len is not None:
        max_len = cfg.max_len
    else:
        max_len = int(math.floor(cfg.maxlen_ratio * max(H.shape[0] for H in enc.streams)))
    if probe is not None:
        for lp in enc.ctc_logp:
            probe("ctc", np.exp(lp))

    Hd = model.decoder.cells
    root_lm = None
    if use_lm:
        st = lm.initial_state()
        root_lm = (st.h, st.c, st.log_probs)
        if probe is not None:
            probe("lm", np.exp(st.log_probs)[None])
    root = Hypothesis(labels=(), score=0.0, att=0.0, ctc=[0.0] * model.n_streams, lm=0.0,
                      h=np.zeros(Hd), c=np.zeros(Hd),
                      ctc_states=[ctc_prefix_init(lp, check=False) for lp in enc.ctc_logp] if use_ctc else None,
                      lm_state=root_lm)
    live = [root]
    finished: list[Hypothesis] = []
    symbols = list(range(1, V + 1))

    for step in range(max_len + 1):
        prev = np.array([hy.labels[-1] if hy.labels else sos for hy in live])
        att_lp, h_new, c_new, weights, beta = model.decode_step_numpy(
            np.stack([hy.h for hy in live]), np.stack([hy.c for hy in live]), prev,
            enc.streams, enc.keys)
        if probe is not None:
            probe("att", np.exp(att_lp))
            for a in weights:
                probe("frame_att", a)
            probe("stream_att", beta)

        allow_symbols = step < max_len
        candidates = []
        ctc_ext = []
        for b, hy in enumerate(live):
            ctc_sym = ctc_eos = None
            ext = None
            if use_ctc:
                ext = [ctc_prefix_extend_all(s, lp, symbols) if allow_symbols else None
                       for s, lp in zip(hy.ctc_states, enc.ctc_logp)]
                ctc_eos = [s.complete_score() for s in hy.ctc_states]
                if allow_symbols:
                    ctc_sym = np.stack([e[2] for e in ext])  # N x V
            ctc_ext.append(ext)
            lm_dist = hy.lm_state[2] if use_lm else None
            labels = symbols + [eos] if allow_symbols else [eos]
            for c in labels:
                att = hy.att + float(att_lp[b, c])
                if use_ctc:
                    parts = ctc_eos if c == eos else [float(v) for v in ctc_sym[:, c - 1]]
                else:
                    parts = hy.ctc
                lm_part = hy.lm + float(lm_dist[lm.out_index(c)]) if use_lm else 0.0
                score = joint_score(parts, att, lm_part, cfg.ctc_weight, cfg.lm_weight)
                new_labels = hy.labels + (c,)
                if cfg.length_bonus:
                    score += cfg.length_bonus * (len(hy.labels) + (c != eos))
                if not np.isfinite(score):
                    continue  # infeasible under CTC: pruned before ranking
                candidates.append((score, new_labels, b, c, att, list(parts), lm_part))

        candidates.sort(key=lambda t: _sort_key(t[0], t[1]))
        kept = candidates[:cfg.width]

        # advance LM states for the surviving non-eos extensions in one batch
        lm_rows = [k for k in kept if k[3] != eos] if use_lm else []
        lm_next = {}
        if lm_rows:
            hh = np.stack([live[k[2]].lm_state[0] for k in lm_rows])
            cc = np.stack([live[k[2]].lm_state[1] for k in lm_rows])
            toks = np.array([k[3] for k in lm_rows])
            lh, lc, ld = lm.step_batch(hh, cc, toks)
            if probe is not None:
                probe("lm", np.exp(ld))
            for j, k in enumerate(lm_rows):
                lm_next[k[1]] = (lh[j], lc[j], ld[j])

        new_live = []
        for score, labels, b, c, att, parts, lm_part in kept:
            parent = live[b]
            fw = parent.frame_weights + [[a[b] for a in weights]]
            sw = parent.stream_weights + [beta[b]]
            if c == eos:
                finished.append(Hypothesis(labels, score, att, parts, lm_part, h_new[b], c_new[b],
                                           parent.ctc_states, parent.lm_state, True, fw, sw))
                continue
            states = None
            if use_ctc:
                states = []
                for ext in ctc_ext[b]:
                    r_n, r_b, _ = ext
                    states.append(CtcPrefixState(r_n[:, c - 1].copy(), r_b[:, c - 1].copy(), c))
            new_live.append(Hypothesis(labels, score, att, parts, lm_part, h_new[b], c_new[b],
                                       states, lm_next.get(labels), False, fw, sw))
        if not new_live:
            break
        live = new_live
        # extensions never raise the score (unless a length bonus is on), so once
        # the n-best finished set beats every live hypothesis nothing can change
        if cfg.length_bonus == 0.0 and len(finished) >= cfg.nbest:
            finished.sort(key=lambda hy: _sort_key(hy.score, hy.labels))
            if finished[cfg.nbest - 1].score > max(hy.score for hy in live):
                break

    finished.sort(key=lambda hy: _sort_key(hy.score, hy.labels))
    if finished:
        return BeamResult(finished[0], finished[:cfg.nbest], False, max_len)
    # nothing reached eos: fall back to the deepest surviving frontier
    live.sort(key=lambda hy: _sort_key(hy.score, hy.labels))
    log.warning("no hypothesis reached eos within %d labels; returning best unfinished", max_len)
    return BeamResult(live[0], live[:cfg.nbest], True, max_len)


def hypothesis_text(model: MultiStreamModel, hy: Hypothesis) -> str:
    return model.alphabet.decode(list(hy.output))


def format_nbest(utt_id: str, model: MultiStreamModel, result: BeamResult) -> list[str]:
    """Tab-separated n-best lines: utt-id, rank, score, ctc, att, lm, labels."""
    lines = []
    for rank, hy in enumerate(result.nbest, 1):
        ctc = math.fsum(hy.ctc) / len(hy.ctc)
        lines.append(f"{utt_id}\t{rank}\t{hy.score:.6f}\t{ctc:.6f}\t{hy.att:.6f}\t{hy.lm:.6f}\t"
                     f"{hypothesis_text(model, hy)}")
    return lines


def parse_nbest(text: str) -> dict[str, list[tuple[int, float, str]]]:
    """Inverse of :func:`format_nbest`; returns ``{utt: [(rank, score, labels)]}``."""
    out: dict[str, list[tuple[int, float, str]]] = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise ValueError(f"n-best line {n}: expected 7 tab-separated fields, got {len(parts)}")
        out.setdefault(parts[0], []).append((int(parts[1]), float(parts[2]), parts[6]))
    return out
