"""Matplotlib figures for the report paths (written to files, never shown)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import AlignmentEntry  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(curves: Mapping[str, Sequence[float]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in curves.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, marker="o", ms=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_alignment(entry: AlignmentEntry, path: str | Path) -> Path:
    """Frame-attention heatmap per stream plus the stream weights per output step."""
    n = len(entry.frame)
    fig, axes = plt.subplots(1, n + 1, figsize=(4 * n + 2.5, 3.2),
                             gridspec_kw={"width_ratios": [4] * n + [1.2]})
    labels = list(entry.labels) + ["<eos>"]
    for i, (ax, m) in enumerate(zip(axes, entry.frame)):
        ax.imshow(m, aspect="auto", origin="upper", cmap="viridis", vmin=0, vmax=1)
        ax.set_title(f"stream {i + 1} frame attention")
        ax.set_xlabel("encoded frame")
        ax.set_yticks(range(len(labels)))
        ax.set_yticklabels(labels[:m.shape[0]])
    ax = axes[-1]
    ax.imshow(entry.stream, aspect="auto", origin="upper", cmap="magma", vmin=0, vmax=1)
    ax.set_title("beta")
    ax.set_xticks(range(entry.stream.shape[1]))
    ax.set_xticklabels([f"s{i + 1}" for i in range(entry.stream.shape[1])])
    ax.set_yticks([])
    fig.suptitle(entry.utt_id)
    return _save(fig, path)


def plot_beta_shift(clean: Mapping[str, AlignmentEntry], corrupt: Mapping[str, AlignmentEntry],
                    stream: int, path: str | Path) -> Path:
    """Per-utterance mean stream weight, clean against corrupted decoding."""
    utts = sorted(set(clean) & set(corrupt))
    a = np.array([clean[u].stream[:, stream].mean() for u in utts])
    b = np.array([corrupt[u].stream[:, stream].mean() for u in utts])
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(a, b, s=14)
    ax.plot([0, 1], [0, 1], color="grey", lw=1, ls="--")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel(f"mean beta{stream + 1}, clean")
    ax.set_ylabel(f"mean beta{stream + 1}, stream 1 corrupted")
    ax.set_title(f"mean shift {np.mean(b - a):+.3f}")
    return _save(fig, path)


def plot_weaken(settings: Sequence[int], per_seed: Sequence[Sequence[float]], path: str | Path) -> Path:
    """Mean beta2 against encoder-2 layer count, one point per seed."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for x, ys in zip(settings, per_seed):
        ax.scatter([x] * len(ys), ys, color="tab:blue", s=16)
    ax.plot(settings, [np.mean(ys) for ys in per_seed], color="tab:orange", marker="s", label="mean")
    ax.set_xticks(list(settings))
    ax.set_xlabel("encoder-2 LSTM layers (0 = context zeroed)")
    ax.set_ylabel("mean beta2")
    ax.legend()
    return _save(fig, path)
