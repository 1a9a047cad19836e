"""Synthetic two-stream corpus, feature/transcript files, stream corruption.

Feature file layout (little-endian)::

    b"MSE2E"  u32 version  u32 n_records
    per record: u32 id_len, id (UTF-8), u32 T, u32 D, T*D float32 (row-major)

Transcripts are UTF-8 lines ``utt-id<TAB>label characters``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .ctc import LabelAlphabet

MAGIC = b"MSE2E"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


class DataConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 8
    feat_dim: int = 20
    frames_per_label: int = 8
    jitter: int = 2
    emit_noise: float = 0.1
    seed: int = 17


@dataclass
class Utterance:
    utt_id: str
    text: str
    streams: list[np.ndarray]
    frame_labels: list[np.ndarray] | None = None


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    alphabet: LabelAlphabet
    prototypes: np.ndarray
    transform: np.ndarray
    offset: np.ndarray


def make_task(spec: SyntheticTaskSpec) -> SyntheticTask:
    """Draw label prototypes and the stream-2 channel map from ``spec.seed``."""
    if spec.vocab_size > 26 or spec.vocab_size < 2:
        raise DataConfigError(f"vocab_size must be in 2..26, got {spec.vocab_size}")
    if spec.frames_per_label - spec.jitter < 1:
        raise DataConfigError("frames_per_label - jitter must be >= 1")
    rng = np.random.default_rng(spec.seed)
    V, D = spec.vocab_size, spec.feat_dim
    for _ in range(1000):
        protos = rng.normal(size=(V, D))
        dist = np.linalg.norm(protos[:, None] - protos[None], axis=-1)
        if np.min(dist[~np.eye(V, dtype=bool)]) >= 4 * spec.emit_noise:
            break
    else:
        raise DataConfigError("could not draw well-separated prototypes")
    q, r = np.linalg.qr(rng.normal(size=(D, D)))
    transform = q * np.sign(np.diag(r))
    offset = rng.normal(scale=0.5, size=D)
    return SyntheticTask(spec, LabelAlphabet.letters(V), protos, transform, offset)


def _label_sequence(rng: np.random.Generator, V: int, length: int) -> list[int]:
    # no immediate repeats: a doubled label would be indistinguishable from a long one
    seq = [int(rng.integers(V))]
    while len(seq) < length:
        nxt = int(rng.integers(V - 1))
        seq.append(nxt if nxt < seq[-1] else nxt + 1)
    return seq


def _render(task: SyntheticTask, labels: list[int], rng: np.random.Generator):
    s = task.spec
    durations = s.frames_per_label + rng.integers(-s.jitter, s.jitter + 1, size=len(labels))
    truth = np.repeat(labels, durations)
    frames = task.prototypes[truth]
    if s.emit_noise > 0:
        frames = frames + rng.normal(scale=s.emit_noise, size=frames.shape)
    return frames, truth


def generate_utterances(task: SyntheticTask, n_utts: int, len_range: tuple[int, int],
                        seed: int, prefix: str = "utt") -> list[Utterance]:
    """Both streams share the label sequence; durations and noise are drawn independently."""
    if n_utts < 1:
        raise DataConfigError("n_utts must be >= 1")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise DataConfigError(f"bad label length range {len_range}")
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_utts):
        labels = _label_sequence(rng, task.spec.vocab_size, int(rng.integers(lo, hi + 1)))
        x1, z1 = _render(task, labels, rng)
        x2, z2 = _render(task, labels, rng)
        x2 = x2 @ task.transform.T + task.offset
        text = "".join(task.alphabet.symbols[i] for i in labels)
        out.append(Utterance(f"{prefix}{k:05d}", text, [x1, x2], [z1, z2]))
    return out


def generate_corpus(spec: SyntheticTaskSpec, n_utts: int, len_range: tuple[int, int],
                    out_dir: str | Path, seed_offset: int = 0, prefix: str = "utt") -> list[Utterance]:
    """Write ``stream1.feats``, ``stream2.feats`` and ``text`` into ``out_dir``."""
    task = make_task(spec)
    utts = generate_utterances(task, n_utts, len_range, spec.seed * 1000 + 1 + seed_offset, prefix)
    write_split(out_dir, utts)
    return utts


def write_split(out_dir: str | Path, utts: list[Utterance]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_streams = len(utts[0].streams)
    for i in range(n_streams):
        write_features(out_dir / f"stream{i + 1}.feats", [(u.utt_id, u.streams[i]) for u in utts])
    write_transcripts(out_dir / "text", [(u.utt_id, u.text) for u in utts])


def write_features(path: str | Path, records: Iterable[tuple[str, np.ndarray]]) -> None:
    records = list(records)
    ids = [r[0] for r in records]
    if len(set(ids)) != len(ids):
        raise FormatError("utterance ids must be unique")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
    for utt_id, x in records:
        x = np.asarray(x)
        if x.ndim != 2:
            raise FormatError(f"{utt_id}: features must be T x D")
        raw = utt_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *x.shape))
        parts.append(np.ascontiguousarray(x, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path: str | Path) -> dict[str, np.ndarray]:
    """Return ``{utt_id: float64 array}`` in file order."""
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise FormatError(f"{path}: not a feature file (bad magic)")
    version, n = struct.unpack_from("<II", buf, 5)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    pos = 13
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            utt_id = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            T, D = struct.unpack_from("<II", buf, pos)
            pos += 8
            nbytes = 4 * T * D
            if pos + nbytes > len(buf):
                raise FormatError(f"{path}: record {utt_id} declares {T}x{D} but the payload is short")
            out[utt_id] = np.frombuffer(buf, dtype="<f4", count=T * D, offset=pos).reshape(T, D).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated file") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def write_transcripts(path: str | Path, items: Iterable[tuple[str, str]]) -> None:
    Path(path).write_text("".join(f"{u}\t{t}\n" for u, t in items), encoding="utf-8")


def read_transcripts(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        utt_id, sep, text = line.partition("\t")
        if not sep:
            raise FormatError(f"{path}:{n}: expected 'utt-id<TAB>labels'")
        if utt_id in out:
            raise FormatError(f"{path}:{n}: duplicate utterance id {utt_id}")
        out[utt_id] = text
    return out


def load_split(split_dir: str | Path) -> list[Utterance]:
    """Read every ``stream*.feats`` plus ``text`` and check the id join."""
    split_dir = Path(split_dir)
    files = sorted(split_dir.glob("stream*.feats"), key=lambda p: int(p.stem[6:]))
    if not files:
        raise FileNotFoundError(f"no stream*.feats files in {split_dir}")
    streams = [read_features(f) for f in files]
    text = read_transcripts(split_dir / "text")
    ids = list(streams[0])
    for f, s in zip(files, streams):
        if set(s) != set(ids):
            raise FormatError(f"{f}: utterance ids differ from {files[0].name}")
    if set(text) != set(ids):
        missing = sorted(set(ids) ^ set(text))[:5]
        raise FormatError(f"{split_dir}: transcript/feature ids do not join (e.g. {missing})")
    return [Utterance(u, text[u], [s[u] for s in streams]) for u in ids]


def corrupt_stream(features: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise with std ``sigma``."""
    if sigma < 0:
        raise DataConfigError("sigma must be >= 0")
    if sigma == 0:
        return np.array(features, copy=True)
    rng = np.random.default_rng(seed)
    return features + rng.normal(scale=sigma, size=np.shape(features))


def nearest_prototype_accuracy(task: SyntheticTask, utts: list[Utterance], stream: int = 0) -> float:
    """Frame accuracy of a nearest-prototype classifier; stream 2 is mapped
    back through the inverse channel transform first."""
    correct = total = 0
    for u in utts:
        if u.frame_labels is None:
            raise DataConfigError(f"{u.utt_id}: no frame-level truth (not a generated utterance)")
        x = u.streams[stream]
        if stream == 1:
            x = (x - task.offset) @ task.transform
        pred = np.argmin(((x[:, None, :] - task.prototypes[None]) ** 2).sum(-1), axis=1)
        truth = u.frame_labels[stream]
        correct += int(np.sum(pred == truth))
        total += truth.size
    return correct / max(total, 1)
