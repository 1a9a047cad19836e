"""Error rates and attention diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class JoinError(KeyError):
    pass


@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Unit-cost Levenshtein distance with an S/I/D breakdown.

    Among minimum-cost alignments, the backtrace prefers substitutions, then
    deletions, then insertions.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j, s, ins, dels = n, m, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(d[n, m]), int(s), ins, dels)


def error_rate(refs: Mapping[str, Sequence], hyps: Mapping[str, Sequence]) -> float:
    """100 * total edit distance / total reference length, joined on utt-id."""
    missing = sorted(set(refs) ^ set(hyps))
    if missing:
        raise JoinError(f"references and hypotheses do not share utterance ids (e.g. {missing[:5]})")
    dist = sum(edit_distance(refs[u], hyps[u]).distance for u in refs)
    n = sum(len(refs[u]) for u in refs)
    if n == 0:
        return 0.0 if dist == 0 else float("inf")
    return 100.0 * dist / n


@dataclass
class AlignmentEntry:
    """One utterance: per-stream frame attention (L x T_i) and stream attention (L x N)."""

    utt_id: str
    labels: str
    frame: list[np.ndarray]
    stream: np.ndarray

    def check(self, tol: float = 1e-6) -> None:
        for m in [*self.frame, self.stream]:
            if m.size and np.any(np.abs(m.sum(axis=1) - 1.0) > tol):
                raise ValueError(f"{self.utt_id}: attention rows do not sum to 1")


AlignmentDump = dict  # utt_id -> AlignmentEntry


def _block(name: str, m: np.ndarray) -> list[str]:
    rows = [f"{name} {m.shape[0]} {m.shape[1]}"]
    rows += [" ".join(f"{v:.6f}" for v in row) for row in m]
    return rows


def format_dump(dump: Mapping[str, AlignmentEntry]) -> str:
    """Plain-text dump, one block per utterance in utt-id order::

        utt <id> <n_streams> <labels>
        frame <i> <L> <T_i>   then L rows
        stream <L> <N>        then L rows
    """
    lines = []
    for utt in sorted(dump):
        e = dump[utt]
        lines.append(f"utt {utt} {len(e.frame)} {e.labels or '-'}")
        for i, m in enumerate(e.frame, 1):
            lines += _block(f"frame {i}", m)
        lines += _block("stream", e.stream)
    return "\n".join(lines) + "\n"


def parse_dump(text: str) -> dict[str, AlignmentEntry]:
    lines = text.splitlines()
    out: dict[str, AlignmentEntry] = {}
    pos = 0

    def matrix(header_words: int):
        nonlocal pos
        head = lines[pos].split()
        r, c = int(head[header_words]), int(head[header_words + 1])
        pos += 1
        rows = [list(map(float, lines[pos + k].split())) for k in range(r)]
        pos += r
        return np.array(rows, dtype=np.float64).reshape(r, c)

    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        head = lines[pos].split()
        if head[0] != "utt" or len(head) != 4:
            raise ValueError(f"dump line {pos + 1}: expected 'utt <id> <n> <labels>'")
        utt, n, labels = head[1], int(head[2]), head[3]
        pos += 1
        frames = [matrix(2) for _ in range(n)]
        stream = matrix(1)
        out[utt] = AlignmentEntry(utt, "" if labels == "-" else labels, frames, stream)
    return out


def write_dump(path: str | Path, dump: Mapping[str, AlignmentEntry]) -> None:
    Path(path).write_text(format_dump(dump), encoding="utf-8")


def read_dump(path: str | Path) -> dict[str, AlignmentEntry]:
    return parse_dump(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class ShiftResult:
    mean_shift: float
    n_labels: int
    truncated: list[str]  # utterances whose label counts differed


def stream_attention_shift(clean: Mapping[str, AlignmentEntry], corrupt: Mapping[str, AlignmentEntry],
                           stream: int) -> ShiftResult:
    """Mean over labels and utterances of beta_corrupt[stream] - beta_clean[stream].

    ``stream`` is 0-based.  Rows are paired by output position; when the two
    decodes emit different lengths the longer one is truncated and the
    utterance is listed in ``truncated``.
    """
    missing = sorted(set(clean) ^ set(corrupt))
    if missing:
        raise JoinError(f"dumps cover different utterances (e.g. {missing[:5]})")
    diffs = []
    truncated = []
    for utt in sorted(clean):
        a, b = clean[utt].stream, corrupt[utt].stream
        L = min(a.shape[0], b.shape[0])
        if a.shape[0] != b.shape[0]:
            truncated.append(utt)
        diffs.extend(b[:L, stream] - a[:L, stream])
    if truncated:
        log.warning("%d utterance(s) decoded to different lengths; truncated", len(truncated))
    mean = float(np.mean(diffs)) if diffs else 0.0
    return ShiftResult(mean, len(diffs), truncated)


def mean_stream_weight(dump: Mapping[str, AlignmentEntry], stream: int) -> float:
    rows = [e.stream[:, stream] for e in dump.values() if e.stream.size]
    return float(np.mean(np.concatenate(rows))) if rows else float("nan")
