"""Command line: gen, train, decode, score, analyze."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import lm_checkpoint, load_lm, load_model, model_checkpoint, save_checkpoint
from .config import RunConfig, format_config, load_config
from .data import DataConfigError, FormatError, load_split, read_transcripts, write_split
from .decode import format_nbest, parse_nbest
from .evaluate import JoinError, edit_distance, mean_stream_weight, write_dump
from .layers import InputTooShortError
from .lm import LmConfigError
from .model import ConfigError
from .numerics import ContractError
from .pipeline import (Corruption, alignment_dump, decode_utterances, make_splits, train_char_lm,
                       train_model)

log = logging.getLogger("mse2e")

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class NumericFailure(RuntimeError):
    pass


def _write_tsv(path: Path, rows) -> None:
    path.write_text("".join(f"{k}\t{v}\n" for k, v in rows), encoding="utf-8")


def _echo_config(out: Path, cfg: RunConfig) -> None:
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")


def _split_dir(data: Path, name: str) -> Path:
    """Accept either a split directory or a corpus root holding ``name/``."""
    if (data / "stream1.feats").exists():
        return data
    return data / name


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir or "data")
    train, test = make_splits(cfg)
    write_split(out / "train", train)
    write_split(out / "test", test)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, cfg)
    print(f"wrote {len(train)} train and {len(test)} test utterances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    data = Path(args.data or cfg.data_dir or "data")
    out = Path(args.out or cfg.out_dir or "exp")
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, cfg)
    train = load_split(_split_dir(data, "train"))
    held = load_split(data / "test") if (data / "test" / "text").exists() else None

    lines = ["epoch\tloss\n"]

    def on_epoch(epoch, loss):
        lines.append(f"{epoch}\t{loss:.6f}\n")
        print(f"epoch {epoch}\tloss {loss:.4f}", flush=True)

    res = train_model(cfg, train, on_epoch)
    (out / "train_log.tsv").write_text("".join(lines), encoding="utf-8")
    if not all(np.all(np.isfinite(p.data)) for p in res.model.parameters()):
        raise NumericFailure("training produced non-finite parameters")
    if not res.step_losses and res.stats.skipped_steps:
        raise NumericFailure("every training step was skipped (non-finite loss)")
    save_checkpoint(out / "model.ckpt", model_checkpoint(res.model, cfg, len(res.step_losses), res.optimizer))

    lm, report = train_char_lm(cfg, train, held)
    save_checkpoint(out / "lm.ckpt", lm_checkpoint(lm, cfg, {"perplexity": report["perplexity_after"]}))
    _write_tsv(out / "lm_report.tsv", [("perplexity_before", f"{report['perplexity_before']:.4f}"),
                                       ("perplexity_after", f"{report['perplexity_after']:.4f}")])
    if res.epoch_losses:
        from .plotting import plot_loss_curves
        plot_loss_curves({"train": res.epoch_losses}, out / "loss.png")
    print(f"model: {out / 'model.ckpt'}  lm: {out / 'lm.ckpt'} (held-out perplexity "
          f"{report['perplexity_after']:.3f})")
    return 0


def cmd_decode(args) -> int:
    model, ckpt = load_model(args.model)
    cfg = ckpt.config
    lm = load_lm(args.lm) if args.lm else None
    beam = cfg.beam_config(width=args.beam, ctc_weight=args.ctc_weight, lm_weight=args.lm_weight,
                           nbest=args.nbest)
    if lm is None and beam.lm_weight > 0:
        log.warning("no --lm given; decoding without the LM term")
    data = Path(args.data or cfg.data_dir or "data")
    utts = load_split(_split_dir(data, "test"))
    corruption = None
    if args.sigma:
        corruption = Corruption(args.corrupt_stream - 1, args.sigma, args.noise_seed)
        if corruption.stream >= len(utts[0].streams):
            raise ConfigError(f"--corrupt-stream {args.corrupt_stream}: data has {len(utts[0].streams)} streams")
    out = Path(args.out or cfg.out_dir or "decode")
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, cfg.replace(beam=beam.width, ctc_weight_decode=beam.ctc_weight,
                                  lm_weight=beam.lm_weight, nbest=beam.nbest))
    res = decode_utterances(model, lm, utts, beam, cfg.input_map(), corruption)
    lines = []
    for utt in sorted(res.results):
        lines += format_nbest(utt, model, res.results[utt])
    (out / "nbest.txt").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    texts = res.texts(model)
    (out / "hyp.txt").write_text("".join(f"{u}\t{texts[u]}\n" for u in sorted(texts)), encoding="utf-8")
    unfinished = sorted(u for u, r in res.results.items() if r.unfinished)
    if unfinished:
        log.warning("%d utterance(s) hit the length bound without eos", len(unfinished))
    if args.dump_attention:
        dump = alignment_dump(model, res)
        write_dump(out / "attention.txt", dump)
        from .plotting import plot_alignment
        for utt in sorted(dump)[:args.plots]:
            plot_alignment(dump[utt], out / f"align_{utt}.png")
    print(f"decoded {len(utts)} utterances -> {out / 'nbest.txt'}")
    return 0


def _read_hyps(path: Path) -> dict[str, str]:
    text = path.read_text(encoding="utf-8")
    first = next((l for l in text.splitlines() if l.strip()), "")
    if first.count("\t") == 6:
        return {u: next(lab for rank, _, lab in items if rank == 1) for u, items in parse_nbest(text).items()}
    return read_transcripts(path)


def score_rows(refs: dict[str, str], hyps: dict[str, str]) -> list[tuple[str, str]]:
    missing = sorted(set(refs) ^ set(hyps))
    if missing:
        raise JoinError(f"reference and hypothesis ids do not join (e.g. {missing[:5]})")
    s = i = d = n = 0
    for u in sorted(refs):
        e = edit_distance(refs[u], hyps[u])
        s, i, d, n = s + e.substitutions, i + e.insertions, d + e.deletions, n + len(refs[u])
    rate = 100.0 * (s + i + d) / n if n else 0.0
    return [("utterances", str(len(refs))), ("ref_labels", str(n)), ("substitutions", str(s)),
            ("insertions", str(i)), ("deletions", str(d)), ("errors", str(s + i + d)),
            ("CER", f"{rate:.2f}"), ("WER", f"{rate:.2f}")]


def cmd_score(args) -> int:
    rows = score_rows(read_transcripts(Path(args.ref)), _read_hyps(Path(args.hyp)))
    if args.out:
        _write_tsv(Path(args.out), rows)
    for k, v in rows:
        print(f"{k}\t{v}")
    return 0


def cmd_analyze(args) -> int:
    from .experiments import corruption_shift, weaken_sweep
    from .plotting import plot_alignment, plot_beta_shift, plot_weaken

    model, ckpt = load_model(args.model)
    cfg = ckpt.config
    data = Path(args.data or cfg.data_dir or "data")
    out = Path(args.out or "analysis")
    out.mkdir(parents=True, exist_ok=True)
    test = load_split(_split_dir(data, "test"))
    if args.what == "shift":
        if model.n_streams < 2:
            raise ConfigError("the shift analysis needs a multi-stream model")
        lm = load_lm(args.lm) if args.lm else None
        rep = corruption_shift(model, cfg, lm, test, args.sigma, args.noise_seed)
        _write_tsv(out / "shift.tsv", rep.rows())
        write_dump(out / "attention_clean.txt", rep.clean)
        write_dump(out / "attention_corrupt.txt", rep.corrupt)
        plot_beta_shift(rep.clean, rep.corrupt, 1, out / "beta_shift.png")
        first = sorted(rep.clean)[0]
        plot_alignment(rep.clean[first], out / f"align_clean_{first}.png")
        plot_alignment(rep.corrupt[first], out / f"align_corrupt_{first}.png")
        for k, v in rep.rows():
            print(f"{k}\t{v}")
        return 0
    # weaken: retrain from the checkpoint's config with encoder 2 at 0/1/2 layers
    train = load_split(_split_dir(data, "train"))
    if args.train_utts:
        train = train[:args.train_utts]
    wcfg = cfg.replace(epochs=args.epochs) if args.epochs is not None else cfg
    if len(wcfg.stream_specs()) < 2:
        raise ConfigError("the weaken sweep needs a multi-stream model")
    seeds = list(range(args.seeds))
    rep = weaken_sweep(wcfg, train, test, seeds=seeds)
    _write_tsv(out / "weaken.tsv", rep.rows())
    plot_weaken(rep.settings, rep.beta2, out / "weaken.png")
    for k, v in rep.rows():
        print(f"{k}\t{v}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mse2e", description="Multi-stream joint CTC/attention toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic two-stream corpus")
    g.add_argument("--config")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and a character LM")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="joint CTC/attention beam search")
    d.add_argument("--model", required=True)
    d.add_argument("--lm")
    d.add_argument("--data")
    d.add_argument("--out")
    d.add_argument("--beam", type=int)
    d.add_argument("--ctc-weight", type=float)
    d.add_argument("--lm-weight", type=float)
    d.add_argument("--nbest", type=int)
    d.add_argument("--dump-attention", action="store_true")
    d.add_argument("--plots", type=int, default=3, help="alignment figures to draw with --dump-attention")
    d.add_argument("--sigma", type=float, default=0.0, help="Gaussian noise added to one feature stream")
    d.add_argument("--corrupt-stream", type=int, default=1)
    d.add_argument("--noise-seed", type=int, default=0)
    d.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", help="error rate of hypotheses against references")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True, help="transcript file or n-best file (rank 1 is scored)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)

    a = sub.add_parser("analyze", help="stream-attention analyses")
    a.add_argument("what", choices=("shift", "weaken"))
    a.add_argument("--model", required=True)
    a.add_argument("--lm")
    a.add_argument("--data")
    a.add_argument("--out")
    a.add_argument("--sigma", type=float, default=1.0)
    a.add_argument("--noise-seed", type=int, default=0)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--epochs", type=int)
    a.add_argument("--train-utts", type=int)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataConfigError, LmConfigError, InputTooShortError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, JoinError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericFailure, FloatingPointError, ContractError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
