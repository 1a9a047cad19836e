"""Content-based frame attention and stream-level (hierarchical) fusion."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .layers import Linear, Module, uniform_param
from .numerics import ContractError, Tensor


class ContentAttention(Module):
    """e_t = g . tanh(W q + V h_t + b);  weights = softmax(e)."""

    def __init__(self, query_dim: int, key_dim: int, att_dim: int, rng: np.random.Generator):
        self.query = Linear(query_dim, att_dim, rng, bias=False)
        self.key = Linear(key_dim, att_dim, rng, bias=True)
        self.g = uniform_param(rng, (att_dim,))

    def project_keys(self, H: Tensor) -> Tensor:
        return self.key(H)

    def scores(self, q_prev: Tensor, keys: Tensor) -> Tensor:
        return nx.matmul(nx.tanh(keys + self.query(q_prev)), self.g)


def attend(att: ContentAttention, q_prev: Tensor, H: Tensor, keys: Tensor | None = None):
    """Return ``(context, weights)`` for one decoder step over frames ``H``.

    ``keys`` may carry a cached ``att.project_keys(H)``.
    """
    if H.shape[0] == 0:
        raise ContractError("attention over an empty encoded stream")
    if keys is None:
        keys = att.project_keys(H)
    a = nx.softmax(att.scores(q_prev, keys))
    return nx.matmul(a, H), a


class StreamAttention(Module):
    """Stream-level attention over per-stream context vectors.

    With ``fixed=True`` the weights are pinned to 1/N and no parameters are
    used.
    """

    def __init__(self, query_dim: int, context_dim: int, att_dim: int,
                 rng: np.random.Generator, fixed: bool = False):
        self.fixed = fixed
        self.att = ContentAttention(query_dim, context_dim, att_dim, rng)

    def named_parameters(self, prefix: str = ""):
        # parameters of a pinned-weight fusion never influence the output
        if self.fixed:
            return iter(())
        return super().named_parameters(prefix)


def han_fuse(sa: StreamAttention, q_prev: Tensor, contexts: Sequence[Tensor]):
    """Convex combination of stream contexts; returns ``(fused, beta)``."""
    n = len(contexts)
    if n == 0:
        raise ContractError("han_fuse needs at least one stream context")
    dims = {c.shape for c in contexts}
    if len(dims) != 1:
        raise ContractError(f"stream contexts differ in shape: {sorted(dims)}")
    if n == 1:
        return contexts[0], Tensor(np.ones(1))
    R = nx.stack(list(contexts))
    if sa.fixed:
        beta = Tensor(np.full(n, 1.0 / n))
    else:
        beta = nx.softmax(sa.att.scores(q_prev, sa.att.project_keys(R)))
    return nx.matmul(beta, R), beta
