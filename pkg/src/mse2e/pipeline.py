"""Training and decoding loops shared by the CLI and the experiments."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import Utterance, corrupt_stream, generate_utterances, make_task
from .decode import BeamConfig, BeamResult, beam_search, ctc_greedy_decode, encode_utterance
from .evaluate import AlignmentEntry, error_rate
from .lm import CharLm, lm_train
from .model import MultiStreamModel
from .training import AdaDelta, TrainStats, train_step

log = logging.getLogger(__name__)


def make_splits(cfg: RunConfig) -> tuple[list[Utterance], list[Utterance]]:
    """Deterministic train/test corpora drawn from ``cfg``'s task seed."""
    task = make_task(cfg.task_spec())
    base = cfg.data_seed * 1000 + 1
    lr = (cfg.len_min, cfg.len_max)
    train = generate_utterances(task, cfg.train_utts, lr, base, prefix="train")
    test = generate_utterances(task, cfg.test_utts, lr, base + 1, prefix="test")
    return train, test


def utterance_seed(utt_id: str, seed: int) -> int:
    return (zlib.crc32(utt_id.encode("utf-8")) + 1_000_003 * seed) % (2 ** 32)


@dataclass(frozen=True)
class Corruption:
    stream: int  # 0-based feature stream
    sigma: float
    seed: int = 0


def model_inputs(utt: Utterance, input_map: Sequence[int], corruption: Corruption | None = None):
    feats = list(utt.streams)
    if corruption is not None and corruption.sigma > 0:
        k = corruption.stream
        feats[k] = corrupt_stream(feats[k], corruption.sigma, utterance_seed(utt.utt_id, corruption.seed))
    return [feats[i] for i in input_map]


@dataclass
class TrainResult:
    model: MultiStreamModel
    optimizer: AdaDelta
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    stats: TrainStats = field(default_factory=TrainStats)
    seconds: float = 0.0


def train_model(cfg: RunConfig, utts: Sequence[Utterance],
                on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train a fresh model from ``cfg`` on ``utts``; batch order comes from ``cfg.seed``."""
    model = MultiStreamModel(cfg.model_config())
    alphabet = model.alphabet
    input_map = cfg.input_map()
    data = [(model_inputs(u, input_map), alphabet.encode(u.text)) for u in utts]
    model.set_unigram([t for _, t in data])
    opt = AdaDelta(model.parameters(), rho=cfg.adadelta_rho, eps=cfg.adadelta_eps)
    res = TrainResult(model, opt)
    rng = np.random.default_rng(cfg.seed)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start:start + cfg.batch_size]]
            loss = train_step(model, batch, opt, ctc_weight=cfg.ctc_weight_train,
                              smoothing=cfg.smoothing, clip=cfg.clip, stats=res.stats)
            if np.isfinite(loss):
                losses.append(loss)
                res.step_losses.append(loss)
        mean = float(np.mean(losses)) if losses else float("nan")
        res.epoch_losses.append(mean)
        log.info("epoch %d mean loss %.4f", epoch + 1, mean)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean)
    res.seconds = time.perf_counter() - t0
    return res


def train_char_lm(cfg: RunConfig, utts: Sequence[Utterance], held_out: Sequence[Utterance] | None = None):
    lm = CharLm(cfg.lm_config())
    enc = lm.alphabet.encode
    report = lm_train(lm, [enc(u.text) for u in utts], epochs=cfg.lm_epochs, lr=cfg.lm_lr,
                      batch_size=cfg.lm_batch_size,
                      held_out=[enc(u.text) for u in held_out] if held_out else None, seed=cfg.seed)
    return lm, report


@dataclass
class DecodeOutput:
    results: dict[str, BeamResult]
    greedy: dict[str, list[str]]  # per-stream CTC greedy transcripts

    def texts(self, model: MultiStreamModel) -> dict[str, str]:
        return {u: model.alphabet.decode(list(r.best.output)) for u, r in self.results.items()}


def decode_utterances(model: MultiStreamModel, lm: CharLm | None, utts: Sequence[Utterance],
                      beam: BeamConfig, input_map: Sequence[int],
                      corruption: Corruption | None = None, probe=None) -> DecodeOutput:
    results, greedy = {}, {}
    for u in utts:
        enc = encode_utterance(model, model_inputs(u, input_map, corruption))
        results[u.utt_id] = beam_search(model, lm, None, beam, probe=probe, encoded=enc)
        greedy[u.utt_id] = [model.alphabet.decode(ctc_greedy_decode(lp)) for lp in enc.ctc_logp]
    return DecodeOutput(results, greedy)


def alignment_entry(model: MultiStreamModel, utt_id: str, result: BeamResult) -> AlignmentEntry:
    hy = result.best
    frame = [np.array([step[i] for step in hy.frame_weights]) for i in range(model.n_streams)]
    stream = np.array(hy.stream_weights)
    return AlignmentEntry(utt_id, model.alphabet.decode(list(hy.output)), frame, stream)


def alignment_dump(model: MultiStreamModel, out: DecodeOutput) -> dict[str, AlignmentEntry]:
    return {u: alignment_entry(model, u, r) for u, r in out.results.items()}


def cer(utts: Sequence[Utterance], hyps: dict[str, str]) -> float:
    return error_rate({u.utt_id: u.text for u in utts}, hyps)
