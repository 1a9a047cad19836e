"""AdaDelta with global-norm clipping and the mini-batch training step."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import MultiStreamModel, mtl_loss
from .numerics import Tensor

log = logging.getLogger(__name__)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale grads in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class AdaDelta:
    """x -= sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g, running averages with rho."""

    def __init__(self, params: Sequence[Tensor], rho: float = 0.95, eps: float = 1e-8):
        self.params = list(params)
        self.rho = rho
        self.eps = eps
        self.sq_grad = [np.zeros_like(p.data) for p in self.params]
        self.sq_delta = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self) -> None:
        rho, eps = self.rho, self.eps
        for p, eg, ed in zip(self.params, self.sq_grad, self.sq_delta):
            if p.grad is None:
                continue
            g = p.grad
            eg *= rho
            eg += (1.0 - rho) * g * g
            delta = np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
            ed *= rho
            ed += (1.0 - rho) * delta * delta
            p.data -= delta
        self.steps += 1

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (eg, ed) in enumerate(zip(self.sq_grad, self.sq_delta)):
            out[f"sq_grad.{i}"] = eg
            out[f"sq_delta.{i}"] = ed
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], steps: int = 0) -> None:
        for i in range(len(self.params)):
            self.sq_grad[i][...] = arrays[f"sq_grad.{i}"]
            self.sq_delta[i][...] = arrays[f"sq_delta.{i}"]
        self.steps = steps


@dataclass
class TrainStats:
    skipped_utterances: int = 0
    skipped_steps: int = 0
    losses: list[float] = field(default_factory=list)


def train_step(model: MultiStreamModel, batch, optimizer: AdaDelta, ctc_weight: float = 0.2,
               smoothing: float = 0.05, clip: float = 5.0, stats: TrainStats | None = None) -> float:
    """One optimizer update on the mean MTL loss of ``batch``.

    ``batch`` holds ``(inputs, target)`` pairs.  Utterances whose loss is not
    finite are masked out; if none remain the update is skipped.  Returns the
    mean loss over the kept utterances (``nan`` for a skipped step).
    """
    stats = stats if stats is not None else TrainStats()
    params = optimizer.params
    nx.zero_grad(params)
    kept, total = 0, 0.0
    scale = 1.0 / max(len(batch), 1)
    for inputs, target in batch:
        with nx.Tape() as tape:
            loss = mtl_loss(model, inputs, target, ctc_weight, smoothing)
            value = float(loss.data)
            if not np.isfinite(value):
                stats.skipped_utterances += 1
                continue
            nx.backward(loss * scale, tape)
        kept += 1
        total += value
    if kept == 0:
        stats.skipped_steps += 1
        log.warning("skipping update: no finite loss in batch")
        return float("nan")
    if kept < len(batch):
        # rescale to a mean over the utterances that contributed
        for p in params:
            if p.grad is not None:
                p.grad *= len(batch) / kept
    grads_ok = all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params)
    if not grads_ok:
        stats.skipped_steps += 1
        log.warning("skipping update: non-finite gradient")
        nx.zero_grad(params)
        return float("nan")
    clip_grad_norm(params, clip)
    optimizer.step()
    mean = total / kept
    stats.losses.append(mean)
    return mean
