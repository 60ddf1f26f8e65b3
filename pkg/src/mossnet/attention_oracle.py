"""Brute-force check that a mixture-of-experts SSM is a weighted linear multi-head attention.

With a shared diagonal transition ``A_bar_t`` and expert mixtures on ``B`` and
``C`` only, the SSM output expands as::

    y_t = sum_{m,n} sum_{i<=t} <q^m_t, k^n_i> v_i
    q^m_t = p_m(x_t) C^m_t prod_{j<=t} A_bar_j
    k^n_i = p_n(x_i) (prod_{j<=i} A_bar_j)^-1 B_bar^n_i
    v_i   = x_i

Here ``m, n`` range over experts (the "heads"), and the query of head ``m``
meets the keys of every head ``n``. ``q^m_t k^n_i`` telescopes to
``p_m p_n C^m_t (prod_{j=i+1..t} A_bar_j) B_bar^n_i``. Because ``A_bar`` is
diagonal every product is elementwise. This module evaluates both sides
independently and reports their difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SingularityError
from .block import block_forward
from .moe import Router, route
from .numerics import Rng, Tensor, no_grad
from . import ssm_kernel

ABAR_MIN = 1e-3
ABAR_MAX = 1.0 - 1e-3
PASS_TOL = 1e-8


@dataclass(frozen=True)
class TheoremInstance:
    A_bar: np.ndarray  # [T, P], shared by all experts
    B_bar: np.ndarray  # [M_e, T, P, N]
    C: np.ndarray      # [M_e, T, M, P]
    x: np.ndarray      # [T, N]
    probs: np.ndarray  # [T, M_e], mixture weight of each expert per token

    def __post_init__(self):
        T, P = self.A_bar.shape
        Me = self.probs.shape[1]
        N = self.x.shape[1]
        if (self.B_bar.shape[:3] != (Me, T, P) or self.B_bar.shape[3] != N
                or self.C.shape[:2] != (Me, T) or self.C.shape[3] != P
                or self.x.shape[0] != T or self.probs.shape[0] != T):
            raise DimensionError(
                f"inconsistent instance shapes: A_bar{self.A_bar.shape} B_bar{self.B_bar.shape} "
                f"C{self.C.shape} x{self.x.shape} probs{self.probs.shape}")
        if np.any(self.probs < 0) or np.any(self.probs.sum(axis=1) > 1.0 + 1e-12):
            raise ValueError("mixture weights must be nonnegative with row sums at most 1")

    @property
    def T(self) -> int:
        return self.A_bar.shape[0]

    @property
    def P(self) -> int:
        return self.A_bar.shape[1]

    @property
    def N(self) -> int:
        return self.x.shape[1]

    @property
    def M(self) -> int:
        return self.C.shape[2]

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class HeadVectors:
    q: np.ndarray  # [M_e, T, M, P]
    k: np.ndarray  # [M_e, T, P, N]
    v: np.ndarray  # [T, N]


def cumulative_transitions(A_bar: np.ndarray) -> np.ndarray:
    """``prod_{j<=t} A_bar_j`` accumulated left to right."""
    out = np.empty_like(A_bar)
    acc = np.ones(A_bar.shape[1:])
    for t in range(A_bar.shape[0]):
        acc = acc * A_bar[t]
        out[t] = acc
    return out


def build_heads(inst: TheoremInstance, check_range: bool = True) -> HeadVectors:
    if check_range and (inst.A_bar.min() < ABAR_MIN or inst.A_bar.max() > ABAR_MAX):
        raise SingularityError(f"A_bar outside [{ABAR_MIN}, {ABAR_MAX}]")
    cum = cumulative_transitions(inst.A_bar)                               # [T, P]
    p = inst.probs.T                                                       # [M_e, T]
    q = p[:, :, None, None] * inst.C * cum[None, :, None, :]
    k = p[:, :, None, None] * inst.B_bar / cum[None, :, :, None]
    return HeadVectors(q, k, inst.x.copy())


def mha_moa_forward(h: HeadVectors, include_cross: bool = True, term_counts: np.ndarray | None = None):
    """Sum of all head pairs' causal linear attention; returns ``y [T, M]``.

    ``term_counts`` (``[T, T]`` ints) is incremented once per ``(m, n)`` pair
    contributing to each ``(t, i)`` entry.
    """
    Me, T, M, _ = h.q.shape
    y = np.zeros((T, M))
    for m in range(Me):
        for n in range(Me):
            if m != n and not include_cross:
                continue
            for t in range(T):
                # <q^m_t, k^n_i> v_i for every i <= t
                kv = np.einsum("ipn,in->ip", h.k[n, :t + 1], h.v[:t + 1])
                y[t] += h.q[m, t] @ kv.sum(axis=0)
                if term_counts is not None:
                    term_counts[t, :t + 1] += 1
    return y


def ssm_output(inst: TheoremInstance, method: str = "sequential") -> np.ndarray:
    """The recurrence side: mix ``B_bar``/``C`` per token, then run the SSM."""
    B_mix = np.einsum("tm,mtpn->tpn", inst.probs, inst.B_bar)
    C_mix = np.einsum("tm,mtop->top", inst.probs, inst.C)
    b = np.einsum("tpn,tn->tp", B_mix, inst.x)
    if method == "sequential":
        s = ssm_kernel.sequential_scan(inst.A_bar, b, axis=0)
    else:
        s = ssm_kernel.scan(inst.A_bar, b, axis=0)
    return np.einsum("top,tp->to", C_mix, s)


def verify_equivalence(inst: TheoremInstance, include_cross: bool = True) -> float:
    y_ssm = ssm_output(inst)
    y_att = mha_moa_forward(build_heads(inst), include_cross=include_cross)
    return float(np.max(np.abs(y_ssm - y_att)))


def random_instance(seed: int, T: int | None = None, P: int | None = None, N: int | None = None,
                    n_experts: int | None = None, M: int | None = None,
                    k: int | None = None) -> TheoremInstance:
    """Seeded instance built through the same discretization and router code as the block.

    Unspecified sizes are drawn from T in [1, 16], P in {2, 4, 8}, N in {1, 2, 3},
    M_e in {1, ..., 4} and M in {1, 2}. Every expert is active unless ``k`` is given.
    """
    rng = Rng(seed)
    T = int(rng.integers(1, 17)) if T is None else T
    P = (2, 4, 8)[int(rng.integers(0, 3))] if P is None else P
    N = int(rng.integers(1, 4)) if N is None else N
    n_experts = int(rng.integers(1, 5)) if n_experts is None else n_experts
    M = int(rng.integers(1, 3)) if M is None else M
    k = n_experts if k is None else k

    x = rng.normal((T, N))
    router = Router(Tensor(rng.normal((N, n_experts))), k=k)
    out = route(x, router)
    probs = np.zeros_like(out.probs)
    rows = np.arange(T)[:, None]
    probs[rows, out.selected] = out.probs[rows, out.selected]

    # one delta path shared by every expert; A_bar = exp(delta a) stays in [2.5e-3, 0.998]
    a = -rng.uniform((1, P), 0.1, 4.0)
    delta = rng.uniform((T, 1), 0.02, 1.5)
    B = rng.normal((n_experts, T, P, N))
    B_bar = np.empty_like(B)
    A_bar = None
    for m in range(n_experts):
        for col in range(N):
            d = ssm_kernel.discretize(ssm_kernel.SsmParams(a, delta, B[m, :, :, col], np.zeros((T, P))))
            A_bar = d.A_bar[:, 0, :]
            B_bar[m, :, :, col] = d.B_bar[:, 0, :]
    C = rng.normal((n_experts, T, M, P))
    return TheoremInstance(A_bar, B_bar, C, x, probs)


def instance_from_block(params, x, channel: int = 0) -> TheoremInstance:
    """Theorem instance for one channel of a theorem-mode block run on ``x [T, d_model]``.

    The block's own routing weights, shared ``A_bar`` and per-expert ``B``/``C``
    projections of the block input ``u`` define the instance; ``v_i = u_i[channel]``.
    """
    if not params.cfg.theorem_mode:
        raise ValueError("instance_from_block needs a theorem-mode block")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    trace = {}
    with no_grad():
        block_forward(x, params, trace=trace)
    disp = trace["dispatch"]["B"]
    T = x.shape[0]
    E = params.cfg.n_experts
    probs = np.zeros((T, E))
    for e, idx in enumerate(disp.rows):
        probs[idx, e] = disp.weights[e].data[:, 0]
    u = trace["u"][0]                             # [T, d_inner]
    delta = trace["delta"][0, :, channel]         # [T]
    A_c = -np.exp(params.A_log.data[channel])     # [P]
    A_bar = trace["A_bar"][0, :, channel, :]      # [T, P]
    z = delta[:, None] * A_c[None]
    factor = delta[:, None] * ssm_kernel._phi(z)
    B_bar = np.stack([(factor * (u @ params.B_proj[e].data))[:, :, None] for e in range(E)])
    C = np.stack([(u @ params.C_proj[e].data)[:, None, :] for e in range(E)])
    return TheoremInstance(A_bar, B_bar, C, u[:, channel:channel + 1], probs)
