"""CTC likelihood, path collapse and incremental prefix scoring.

Index layout shared by every module: ``0`` is blank, ``1..V`` are the
alphabet symbols and ``V+1`` doubles as sos and eos for the decoder.  CTC
heads emit ``V+1`` classes (blank plus symbols).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import ContractError, Tensor, _lse, _make

NEG_INF = -np.inf


class AlphabetError(ValueError):
    pass


@dataclass(frozen=True)
class LabelAlphabet:
    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise AlphabetError("alphabet symbols must be distinct")
        if any(len(s) != 1 for s in self.symbols):
            raise AlphabetError("alphabet symbols must be single characters")

    blank_id = 0

    @property
    def size(self) -> int:
        """|U|, excluding blank and sos/eos."""
        return len(self.symbols)

    @property
    def eos_id(self) -> int:
        return len(self.symbols) + 1

    @property
    def sos_id(self) -> int:
        return self.eos_id

    @property
    def num_classes(self) -> int:
        """blank + symbols + sos/eos"""
        return len(self.symbols) + 2

    @property
    def label_ids(self) -> range:
        return range(1, len(self.symbols) + 1)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.symbols.index(ch) + 1 for ch in text]
        except ValueError:
            bad = [ch for ch in text if ch not in self.symbols]
            raise AlphabetError(f"unknown symbol(s) {bad!r}") from None

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if not 1 <= i <= len(self.symbols):
                raise AlphabetError(f"id {i} is not an alphabet symbol")
            out.append(self.symbols[i - 1])
        return "".join(out)

    @classmethod
    def letters(cls, n: int) -> "LabelAlphabet":
        letters = "abcdefghijklmnopqrstuvwxyz"
        if not 1 <= n <= len(letters):
            raise AlphabetError(f"alphabet size must be in 1..{len(letters)}, got {n}")
        return cls(tuple(letters[:n]))


def collapse(path: Sequence[int], n_symbols: int | None = None, blank: int = 0) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for z in path:
        if n_symbols is not None and not 0 <= z <= n_symbols:
            raise AlphabetError(f"frame label {z} outside blank/alphabet range 0..{n_symbols}")
        if z != prev and z != blank:
            out.append(z)
        prev = z
    return out


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    return x - _lse(x, axis=-1, keepdims=True)


def is_feasible(target: Sequence[int], n_frames: int) -> bool:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return n_frames >= len(target) + repeats


def _ctc_alpha_beta(logp: np.ndarray, target: Sequence[int]):
    """Forward/backward variables over the blank-interleaved target (log domain)."""
    T = logp.shape[0]
    ext = [0]
    for c in target:
        ext += [c, 0]
    S = len(ext)
    ext = np.asarray(ext)
    # transitions from s-2 are allowed into non-blank s whose label differs from s-2
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    lp = logp[:, ext]  # T x S
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, S - 2]
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_next[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + lp[t]
    ends = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return alpha, beta, ext, float(ends)


def ctc_log_likelihood(logp: np.ndarray, target: Sequence[int]) -> float:
    """log p_ctc(target | X) from per-frame log posteriors (T x (V+1))."""
    if not is_feasible(target, logp.shape[0]):
        return NEG_INF
    return _ctc_alpha_beta(logp, target)[3]


def ctc_loss(logits: Tensor, target: Sequence[int]) -> Tensor:
    """-log p_ctc(target | X); logits are unnormalised rows (T' x (V+1)).

    An infeasible target (too few frames) yields a non-differentiable +inf
    loss instead of raising, so callers can mask it out.
    """
    target = list(target)
    if any(c <= 0 or c >= logits.shape[1] for c in target):
        raise AlphabetError(f"CTC target ids must lie in 1..{logits.shape[1] - 1}")
    T = logits.shape[0]
    if T == 0 or not is_feasible(target, T):
        return Tensor(np.inf)
    logp = _log_softmax_np(logits.data)
    alpha, beta, ext, ll = _ctc_alpha_beta(logp, target)

    def bw(g):
        # d(-ll)/d logits = softmax - occupancy
        post = np.exp(alpha + beta - logp[:, ext] - ll)
        occ = np.zeros_like(logp)
        for s, k in enumerate(ext):
            occ[:, k] += post[:, s]
        return (float(g) * (np.exp(logp) - occ),)

    return _make(np.asarray(-ll), (logits,), bw)


def multi_ctc_loss(per_stream: Sequence, n: int | None = None):
    """Arithmetic mean of per-stream CTC losses (tensors or floats)."""
    if len(per_stream) == 0:
        raise ContractError("multi_ctc_loss needs at least one stream")
    n = len(per_stream) if n is None else n
    if n != len(per_stream):
        raise ContractError(f"expected {n} per-stream losses, got {len(per_stream)}")
    if all(not isinstance(x, Tensor) for x in per_stream):
        return float(sum(per_stream)) / n
    if any(isinstance(x, Tensor) and not np.isfinite(x.data) for x in per_stream):
        return Tensor(np.inf)
    total = per_stream[0]
    for x in per_stream[1:]:
        total = total + x
    return total * (1.0 / n)


def multi_ctc_prefix_score(per_stream: Sequence[float], n: int | None = None) -> float:
    if len(per_stream) == 0:
        raise ContractError("multi_ctc_prefix_score needs at least one stream")
    n = len(per_stream) if n is None else n
    return float(np.sum(per_stream)) / n


# -------------------------------------------------------------- prefix scores

@dataclass
class CtcPrefixState:
    """Log-probabilities over frames of the prefix ending in a non-blank
    (``r_n``) or a blank (``r_b``) emission, plus the prefix's last label."""

    r_n: np.ndarray
    r_b: np.ndarray
    last: int | None = None

    def complete_score(self) -> float:
        """log p(prefix is the whole sequence) at the last frame."""
        return float(np.logaddexp(self.r_n[-1], self.r_b[-1]))


def _check_normalized(logp: np.ndarray) -> None:
    sums = np.exp(logp).sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("posterior rows must sum to 1")


def ctc_prefix_init(log_posteriors: np.ndarray, check: bool = True) -> CtcPrefixState:
    """State of the empty prefix; ``log_posteriors`` is (T' x (V+1)) log-probs."""
    logp = np.asarray(log_posteriors, dtype=np.float64)
    if check:
        _check_normalized(logp)
    r_b = np.cumsum(logp[:, 0])
    return CtcPrefixState(np.full_like(r_b, NEG_INF), r_b, None)


def ctc_prefix_extend_all(state: CtcPrefixState, log_posteriors: np.ndarray, labels: Sequence[int]):
    """Extend one prefix by each of ``labels`` (symbols only, no eos) at once.

    Returns ``(r_n, r_b, scores)`` with r_n/r_b shaped (T', K) and the K prefix
    scores log sum_{C : prefix+c is a prefix of C} p(C|X).
    """
    logp = log_posteriors
    T = logp.shape[0]
    labels = np.asarray(labels, dtype=int)
    K = labels.size
    x = logp[:, labels]  # T x K
    r_n = np.full((T, K), NEG_INF)
    r_b = np.full((T, K), NEG_INF)
    if state.last is None:
        r_n[0] = x[0]
    phi = np.logaddexp(state.r_n, state.r_b)[:, None].repeat(K, axis=1)
    if state.last is not None:
        same = labels == state.last
        phi[:, same] = state.r_b[:, None]
    blank = logp[:, 0]
    for t in range(1, T):
        r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + x[t]
        r_b[t] = np.logaddexp(r_n[t - 1], r_b[t - 1]) + blank[t]
    if T > 1:
        psi = _lse(np.vstack([r_n[:1], phi[:-1] + x[1:]]), axis=0)
    else:
        psi = r_n[0].copy()
    return r_n, r_b, psi


def ctc_prefix_extend(state: CtcPrefixState, c: int, log_posteriors: np.ndarray, eos_id: int):
    """Extend the prefix by ``c``; returns ``(new_state, score)``.

    For ``c == eos_id`` the score is the probability that the prefix itself is
    the complete label sequence and the state is returned unchanged.
    """
    if c == eos_id:
        return state, state.complete_score()
    r_n, r_b, psi = ctc_prefix_extend_all(state, log_posteriors, [c])
    return CtcPrefixState(r_n[:, 0], r_b[:, 0], c), float(psi[0])
