"""Toy-scale versions of the multi-resolution, corruption and encoder-weakening studies."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .config import RunConfig
from .data import Utterance
from .evaluate import AlignmentEntry, mean_stream_weight, stream_attention_shift
from .lm import CharLm
from .model import MultiStreamModel
from .pipeline import (Corruption, TrainResult, alignment_dump, cer, decode_utterances, make_splits,
                       train_model)

log = logging.getLogger(__name__)

# settings used by the acceptance runs; see the README for why they differ from
# the RunConfig defaults
TOY_OVERRIDES = dict(init_scale=0.5, adadelta_eps=1e-6, batch_size=5, vgg_channels="16,16,32,32",
                     beam=5, lm_weight=0.0)


def toy_config(**changes) -> RunConfig:
    return RunConfig(**{**TOY_OVERRIDES, **changes})


def single_stream_variants(cfg: RunConfig) -> dict[str, RunConfig]:
    """One config per encoder of ``cfg``, each reading that encoder's input stream."""
    specs = [s.strip() for s in cfg.streams.split(",")]
    inputs = cfg.input_map()
    return {f"stream{i + 1}": cfg.replace(streams=spec, stream_inputs=str(inputs[i] + 1))
            for i, spec in enumerate(specs)}


@dataclass
class SystemResult:
    name: str
    config: RunConfig
    train: TrainResult
    cer: float
    cer_corrupt: float | None = None


@dataclass
class TrendReport:
    systems: dict[str, SystemResult]
    test: list[Utterance]
    seconds: float

    @property
    def multi(self) -> SystemResult:
        return self.systems["multi"]

    def rows(self) -> list[tuple[str, str]]:
        out = []
        for name, s in self.systems.items():
            out.append((f"{name}.cer", f"{s.cer:.2f}"))
            out.append((f"{name}.final_loss", f"{s.train.epoch_losses[-1]:.4f}"))
        return out


def mem_res_trend(cfg: RunConfig, lm: CharLm | None = None,
                  splits: tuple[list[Utterance], list[Utterance]] | None = None) -> TrendReport:
    """Train the multi-stream model of ``cfg`` and each single-stream baseline; CER on test."""
    t0 = time.perf_counter()
    train, test = splits if splits is not None else make_splits(cfg)
    systems = {}
    for name, c in [("multi", cfg), *single_stream_variants(cfg).items()]:
        res = train_model(c, train)
        out = decode_utterances(res.model, lm, test, c.beam_config(), c.input_map())
        systems[name] = SystemResult(name, c, res, cer(test, out.texts(res.model)))
        log.info("%s: CER %.2f after %.0f s of training", name, systems[name].cer, res.seconds)
    return TrendReport(systems, test, time.perf_counter() - t0)


@dataclass
class ShiftReport:
    sigma: float
    delta_beta: float
    n_labels: int
    truncated: list[str]
    cer_clean: float
    cer_corrupt: float
    clean: dict[str, AlignmentEntry]
    corrupt: dict[str, AlignmentEntry]

    def rows(self) -> list[tuple[str, str]]:
        return [("sigma", f"{self.sigma:g}"), ("delta_beta2", f"{self.delta_beta:.6f}"),
                ("labels", str(self.n_labels)), ("truncated_utts", str(len(self.truncated))),
                ("cer_clean", f"{self.cer_clean:.2f}"), ("cer_corrupt", f"{self.cer_corrupt:.2f}")]


def corruption_shift(model: MultiStreamModel, cfg: RunConfig, lm: CharLm | None,
                     test: Sequence[Utterance], sigma: float = 1.0, noise_seed: int = 0,
                     corrupt_stream: int = 0, watch_stream: int = 1) -> ShiftReport:
    """Decode clean and with feature stream ``corrupt_stream`` noised; report the
    mean change of stream ``watch_stream``'s attention weight."""
    beam = cfg.beam_config()
    imap = cfg.input_map()
    clean = decode_utterances(model, lm, test, beam, imap)
    noisy = decode_utterances(model, lm, test, beam, imap, Corruption(corrupt_stream, sigma, noise_seed))
    d_clean, d_noisy = alignment_dump(model, clean), alignment_dump(model, noisy)
    shift = stream_attention_shift(d_clean, d_noisy, watch_stream)
    return ShiftReport(sigma, shift.mean_shift, shift.n_labels, shift.truncated,
                       cer(test, clean.texts(model)), cer(test, noisy.texts(model)), d_clean, d_noisy)


def corrupted_cer(model: MultiStreamModel, cfg: RunConfig, lm: CharLm | None, test: Sequence[Utterance],
                  sigma: float, noise_seed: int = 0, corrupt_stream: int = 0) -> float:
    out = decode_utterances(model, lm, test, cfg.beam_config(), cfg.input_map(),
                            Corruption(corrupt_stream, sigma, noise_seed))
    return cer(test, out.texts(model))


def with_encoder_layers(cfg: RunConfig, stream: int, layers: int) -> RunConfig:
    specs = [s.strip() for s in cfg.streams.split(",")]
    kind, s, _ = specs[stream].split(":")
    specs[stream] = f"{kind}:{s}:{layers}"
    return cfg.replace(streams=", ".join(specs))


@dataclass
class WeakenReport:
    settings: list[int]
    seeds: list[int]
    beta2: list[list[float]]  # [setting][seed]
    spearman: float
    spearman_means: float
    cer: list[list[float]] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str]]:
        out = []
        for L, ys, cs in zip(self.settings, self.beta2, self.cer):
            out.append((f"layers{L}.beta2", " ".join(f"{y:.4f}" for y in ys)))
            out.append((f"layers{L}.beta2_mean", f"{np.mean(ys):.4f}"))
            out.append((f"layers{L}.cer", " ".join(f"{c:.2f}" for c in cs)))
        out.append(("spearman", f"{self.spearman:.4f}"))
        out.append(("spearman_of_means", f"{self.spearman_means:.4f}"))
        return out


def weaken_sweep(cfg: RunConfig, train: Sequence[Utterance], test: Sequence[Utterance],
                 settings: Sequence[int] = (0, 1, 2), seeds: Sequence[int] = (0, 1, 2),
                 stream: int = 1) -> WeakenReport:
    """Retrain with encoder ``stream`` at each layer count (0 zeroes its output)
    and record the mean stream weight it receives on the test set."""
    beta, cers = [], []
    for L in settings:
        row, crow = [], []
        for seed in seeds:
            c = with_encoder_layers(cfg, stream, L).replace(seed=seed)
            res = train_model(c, train)
            out = decode_utterances(res.model, None, test, c.beam_config(), c.input_map())
            row.append(mean_stream_weight(alignment_dump(res.model, out), stream))
            crow.append(cer(test, out.texts(res.model)))
            log.info("layers=%d seed=%d: mean beta%d %.4f, CER %.2f", L, seed, stream + 1, row[-1], crow[-1])
        beta.append(row)
        cers.append(crow)
    xs = [L for L, row in zip(settings, beta) for _ in row]
    ys = [y for row in beta for y in row]
    rho = float(spearmanr(xs, ys).statistic)
    rho_means = float(spearmanr(list(settings), [np.mean(r) for r in beta]).statistic)
    return WeakenReport(list(settings), list(seeds), beta, rho, rho_means, cers)
