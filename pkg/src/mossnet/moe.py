"""Expert routing: softmax router, top-k selection, weighted combination, balance loss.

Mixture weights are the full-softmax probabilities of the selected experts
(no renormalisation over the top-k unless asked for), so a token's output is
``sum_{i in top-k} p_i(x) E_i(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import Tensor, as_tensor, getitem, matmul, reshape, softmax, take_rows
from . import numerics as nx


@dataclass
class Router:
    weight: Tensor  # [d_model, n_experts]
    k: int

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if not 1 <= self.k <= self.n_experts:
            raise ContractError(f"k={self.k} must lie in [1, {self.n_experts}]")

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class RouterOutput:
    probs: np.ndarray     # [..., n_experts], full softmax
    selected: np.ndarray  # [..., k], descending by prob, ties to the lower index


@dataclass(frozen=True)
class ExpertBank:
    experts: tuple

    def __post_init__(self):
        shapes = {_expert_shape(e) for e in self.experts}
        if len(shapes) > 1:
            raise DimensionError(f"experts disagree in shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.experts)

    def __getitem__(self, i):
        return self.experts[i]


def _expert_shape(e):
    if isinstance(e, (tuple, list)):
        return tuple(_expert_shape(x) for x in e)
    return tuple(e.shape)


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; equal values keep index order."""
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def route(x, router: Router, k: int | None = None) -> RouterOutput:
    """Route one token (``x [d_model]``) or a batch (``x [n, d_model]``)."""
    k = router.k if k is None else k
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x.shape[-1] != router.weight.shape[0]:
        raise DimensionError(f"router expects {router.weight.shape[0]} features, got {x.shape}")
    probs = softmax(nx.Tensor(x @ router.weight.data)).data
    return RouterOutput(probs, topk_indices(probs, k))


def moe_combine(x, bank: ExpertBank, out: RouterOutput, apply: Callable, renormalize: bool = False):
    """Single-token mixture ``sum_{i in selected} p_i * apply(E_i, x)``."""
    sel = np.asarray(out.selected).reshape(-1)
    if sel.size == 0:
        raise ContractError("no experts selected")
    weights = out.probs[sel]
    if renormalize:
        weights = weights / weights.sum()
    total = None
    for w, i in zip(weights, sel):
        term = apply(bank[int(i)], x) * float(w)
        total = term if total is None else total + term
    return total


@dataclass
class ExpertCounter:
    """Counts (token, expert) evaluations per MoE site."""
    calls: dict = field(default_factory=dict)

    def add(self, site: str, n: int) -> None:
        self.calls[site] = self.calls.get(site, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.calls.values())


@dataclass
class Dispatch:
    """One routing decision over ``n_tokens`` tokens, reusable by several expert banks."""
    probs: Tensor          # [n_tokens, n_experts]
    selected: np.ndarray   # [n_tokens, k]
    rows: list             # per expert: token rows routed to it
    weights: list          # per expert: Tensor [n_e, 1] of mixture weights

    @property
    def n_tokens(self) -> int:
        return self.selected.shape[0]

    @property
    def n_experts(self) -> int:
        return len(self.rows)

    def combine(self, x: Tensor, experts: Sequence, apply: Callable,
                counter: ExpertCounter | None = None, site: str = "") -> Tensor:
        """Batched mixture: experts only see the rows routed to them."""
        parts, rows = [], []
        for e, idx in enumerate(self.rows):
            if idx.size == 0:
                continue
            ye = apply(experts[e], take_rows(x, idx, unique=True))
            parts.append(ye * self.weights[e])
            rows.append(idx)
            if counter is not None:
                counter.add(site, idx.size)
        if not parts:
            raise ContractError("dispatch has no routed tokens")
        return nx.scatter_groups(parts, rows, self.n_tokens)


def make_dispatch(probs: Tensor, k: int, renormalize: bool = False) -> Dispatch:
    selected = topk_indices(probs.data, k)
    n, n_experts = probs.shape
    weights_src = probs
    if renormalize:
        picked = getitem(probs, (np.arange(n)[:, None], selected))
        weights_src = probs / picked.sum(axis=1, keepdims=True)
    rows, weights = [], []
    for e in range(n_experts):
        idx = np.nonzero((selected == e).any(axis=1))[0]
        rows.append(idx)
        weights.append(getitem(take_rows(weights_src, idx, unique=True), (slice(None), slice(e, e + 1))))
    return Dispatch(probs, selected, rows, weights)


def route_tokens(x: Tensor, router_weight: Tensor, k: int, renormalize: bool = False) -> Dispatch:
    """Graph-attached routing of ``x [n, d_model]``."""
    return make_dispatch(softmax(matmul(x, router_weight), axis=-1), k, renormalize)


def expert_fractions(selected: np.ndarray, n_experts: int, mode: str = "top1") -> np.ndarray:
    selected = np.asarray(selected)
    if mode == "top1":
        counts = np.bincount(selected[:, 0], minlength=n_experts)
        return counts / selected.shape[0]
    if mode == "topk":
        counts = np.bincount(selected.reshape(-1), minlength=n_experts)
        return counts / selected.size
    raise ValueError(f"unknown balance mode {mode!r}")


def load_balance_loss(batch_probs, batch_selected, alpha: float, mode: str = "top1") -> Tensor:
    """``alpha * N * sum_i f_i * P_i``.

    ``f_i`` is the fraction of tokens whose top-1 expert is ``i`` (all top-k
    picks in ``"topk"`` mode) and is a constant; ``P_i`` is the mean router
    probability and carries the gradient.
    """
    probs = as_tensor(batch_probs)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise DimensionError(f"batch_probs must be [tokens, experts], got {probs.shape}")
    n_experts = probs.shape[1]
    f = expert_fractions(batch_selected, n_experts, mode)
    P = probs.mean(axis=0)
    return (P * f).sum() * (alpha * n_experts)


def topk_schedule(step: int, n_high: int = 900, n_low: int = 100, k_high: int = 3, k_low: int = 2) -> int:
    """Cyclic top-k: ``k_high`` for ``n_high`` steps, then ``k_low`` for ``n_low``, repeating."""
    if n_high <= 0 or n_low <= 0:
        raise ContractError("both schedule phases need a positive length")
    if step < 0:
        raise ContractError("step must be nonnegative")
    return k_high if step % (n_high + n_low) < n_high else k_low
