"""Selective SSM core: ZOH discretization, recurrence, parallel scan, unrolled sum.

Shapes follow the Mamba convention: a diagonal transition per channel,
``A[d_inner, d_state]``, and input/output vectors ``B_t, C_t`` of length
``d_state`` shared by every channel. With diagonal ``A`` every discretized
quantity is elementwise.

The linear recurrence ``s_t = a_t * s_{t-1} + b_t`` is the fold of the
associative operator ``(a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2)`` whose
identity is ``(1, 0)``; :func:`associative_scan` evaluates it with a
Blelloch up-sweep/down-sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _fused
from .errors import ContractError, DimensionError, ParameterDomainError, SingularityError
from .numerics import Tensor, _result, _unbroadcast, exp, expand_dims

SERIES_THRESHOLD = 1e-8
UNROLL_MAX_T = 64
UNROLL_MIN_ABAR = 1e-6


@dataclass(frozen=True)
class SsmParams:
    A: np.ndarray      # [d_inner, d_state], strictly negative
    delta: np.ndarray  # [T, d_inner], strictly positive
    B: np.ndarray      # [T, d_state]
    C: np.ndarray      # [T, d_state]

    def __post_init__(self):
        for name in ("A", "delta", "B", "C"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        T, d_inner = self.delta.shape
        if self.A.shape[0] != d_inner or self.B.shape != (T, self.A.shape[1]) or self.C.shape != self.B.shape:
            raise DimensionError(
                f"inconsistent SSM shapes A{self.A.shape} delta{self.delta.shape} "
                f"B{self.B.shape} C{self.C.shape}")

    @property
    def M(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class DiscreteSsmParams:
    A_bar: np.ndarray  # [T, d_inner, d_state], in (0, 1)
    B_bar: np.ndarray  # [T, d_inner, d_state]
    C: np.ndarray      # [T, d_state]


@dataclass
class SsmState:
    s: np.ndarray  # [..., d_inner, d_state]

    @classmethod
    def zeros(cls, d_inner: int, d_state: int, batch: tuple = ()) -> "SsmState":
        return cls(np.zeros(batch + (d_inner, d_state)))


def discretize(p: SsmParams) -> DiscreteSsmParams:
    """Exact zero-order hold: ``A_bar = exp(delta a)``, ``B_bar = (exp(delta a) - 1) / a * b``."""
    if not np.all(p.A < 0):
        raise ParameterDomainError("A must be strictly negative")
    if not np.all(p.delta > 0):
        raise ParameterDomainError("delta must be strictly positive")
    delta = p.delta[:, :, None]
    z = delta * p.A[None]
    A_bar = np.exp(z)
    small = np.abs(z) < SERIES_THRESHOLD
    factor = np.where(small, delta, np.expm1(z) / np.where(small, 1.0, p.A[None]))
    return DiscreteSsmParams(A_bar, factor * p.B[:, None, :], p.C)


def step(s, x_t, A_bar_t, B_bar_t, C_t):
    """One recurrence step; returns ``(s_t, y_t)`` with ``y_t[c] = <C_t, s_t[c]>``."""
    s = s.s if isinstance(s, SsmState) else np.asarray(s)
    x_t = np.asarray(x_t)
    if s.shape[-2:] != np.shape(A_bar_t)[-2:] or x_t.shape[-1] != s.shape[-2]:
        raise DimensionError(f"step shapes disagree: s{s.shape} x{x_t.shape} A_bar{np.shape(A_bar_t)}")
    s_new = A_bar_t * s + B_bar_t * x_t[..., None]
    y = (s_new * np.asarray(C_t)[..., None, :]).sum(axis=-1)
    return SsmState(s_new), y


def combine(earlier, later):
    """Compose two affine maps: apply ``earlier`` first, then ``later``."""
    a1, b1 = earlier
    a2, b2 = later
    return a2 * a1, a2 * b1 + b2


def _blelloch(a: np.ndarray, b: np.ndarray, axis: int = 0):
    """Inclusive prefix compositions along ``axis`` (in place on padded copies)."""
    T = a.shape[axis]
    n = 1 << max(T - 1, 0).bit_length()
    lead = (slice(None),) * axis
    shape = a.shape[:axis] + (n,) + a.shape[axis + 1:]
    A = np.ones(shape, dtype=a.dtype)
    Bv = np.zeros(shape, dtype=b.dtype)
    A[lead + (slice(0, T),)] = a
    Bv[lead + (slice(0, T),)] = b

    d = 1
    while d < n:
        r, l = lead + (slice(2 * d - 1, n, 2 * d),), lead + (slice(d - 1, n, 2 * d),)
        Ar = A[r]
        Bv[r] += Ar * Bv[l]
        Ar *= A[l]
        d *= 2

    A[lead + (n - 1,)] = 1.0
    Bv[lead + (n - 1,)] = 0.0
    d = n // 2
    while d >= 1:
        r, l = lead + (slice(2 * d - 1, n, 2 * d),), lead + (slice(d - 1, n, 2 * d),)
        ta, tb = A[l].copy(), Bv[l].copy()
        A[l], Bv[l] = A[r], Bv[r]
        Ar, Br = A[r], Bv[r]
        Br *= ta
        Br += tb
        Ar *= ta
        d //= 2

    # exclusive -> inclusive
    keep = lead + (slice(0, T),)
    A, Bv = A[keep], Bv[keep]
    Bv *= a
    Bv += b
    A *= a
    return A, Bv


def associative_scan(a, b, axis: int = 0):
    """Inclusive scan of ``(a_t, b_t)`` pairs; returns ``(a_prefix, b_prefix)``."""
    a, b = np.asarray(a), np.asarray(b)
    dtype = np.result_type(a, b, np.float32)
    a, b = np.broadcast_arrays(a.astype(dtype, copy=False), b.astype(dtype, copy=False))
    axis = axis % a.ndim if a.ndim else 0
    if a.ndim == 0 or a.shape[axis] < 1:
        raise ContractError("scan needs at least one element")
    return _blelloch(a, b, axis)


def sequential_scan(a, b, s0=None, axis: int = 0) -> np.ndarray:
    """States of ``s_t = a_t s_{t-1} + b_t`` by direct iteration."""
    a, b = np.broadcast_arrays(np.asarray(a), np.asarray(b))
    a, b = np.moveaxis(a, axis, 0), np.moveaxis(b, axis, 0)
    out = np.empty(b.shape, dtype=np.result_type(a, b))
    s = np.zeros(b.shape[1:], dtype=out.dtype) if s0 is None else np.asarray(s0)
    for t in range(b.shape[0]):
        s = a[t] * s + b[t]
        out[t] = s
    return np.moveaxis(out, 0, axis)


def scan(a, b, s0=None, axis: int = 0) -> np.ndarray:
    """States of the linear recurrence computed by the parallel scan."""
    pa, pb = associative_scan(a, b, axis)
    if s0 is None:
        return pb
    return pa * np.expand_dims(np.asarray(s0), axis) + pb


def unroll(A_bar, B_bar, C, x) -> np.ndarray:
    """Explicit double sum ``y_t = sum_i (C_t prod_{j<=t} A_bar_j)(prod_{j<=i} A_bar_j^-1 B_bar_i) x_i``.

    Shapes: ``A_bar, B_bar [T, d_inner, d_state]``, ``C [T, d_state]``, ``x [T, d_inner]``.
    """
    A_bar, B_bar = np.asarray(A_bar, dtype=np.float64), np.asarray(B_bar, dtype=np.float64)
    C, x = np.asarray(C, dtype=np.float64), np.asarray(x, dtype=np.float64)
    T = A_bar.shape[0]
    if T > UNROLL_MAX_T:
        raise ContractError(f"unroll is an oracle for T <= {UNROLL_MAX_T}, got T={T}")
    if np.any(A_bar < UNROLL_MIN_ABAR):
        raise SingularityError(f"A_bar below {UNROLL_MIN_ABAR}: cumulative inverse would overflow")
    cum = np.empty_like(A_bar)
    acc = np.ones(A_bar.shape[1:])
    for t in range(T):
        acc = acc * A_bar[t]
        cum[t] = acc
    if cum.min() < np.finfo(np.float64).tiny:
        raise SingularityError("cumulative A_bar product underflows")
    query = C[:, None, :] * cum
    key = B_bar / cum * x[:, :, None]
    y = np.zeros(x.shape)
    for t in range(T):
        for i in range(t + 1):
            y[t] += (query[t] * key[i]).sum(axis=-1)
    return y


# -- differentiable primitives used by the block --------------------------------

def _phi(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < SERIES_THRESHOLD
    if not small.any():
        return np.expm1(z) / z
    return np.where(small, 1.0 + 0.5 * z, np.expm1(z) / np.where(small, 1.0, z))


def _dphi(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < 1e-3
    if not small.any():
        return (z * np.exp(z) - np.expm1(z)) / (z * z)
    out = np.empty_like(z)
    big = ~small
    zb = z[big]
    out[big] = (zb * np.exp(zb) - np.expm1(zb)) / (zb * zb)
    zs = z[small]
    out[small] = 0.5 + zs * (1.0 / 3.0 + zs * (0.125 + zs / 30.0))
    return out


def phi(z: Tensor) -> Tensor:
    """``expm1(z) / z`` with its removable singularity at 0 filled in."""
    zd = z.data
    return _result(_phi(zd), (z,), lambda g: (g * _dphi(zd),))


def discretize_tensors(delta: Tensor, A: Tensor, B: Tensor):
    """Graph version of :func:`discretize`.

    ``delta [..., d_inner]``, ``A [d_inner, d_state]``, ``B [..., d_state]``
    give ``A_bar, B_bar [..., d_inner, d_state]``.
    """
    d = expand_dims(delta, -1)
    z = d * A
    A_bar = exp(z)
    B_bar = d * phi(z) * expand_dims(B, -2)
    return A_bar, B_bar


def selective_scan(a: Tensor, b: Tensor, s0: np.ndarray | None = None, axis: int = 1,
                   method: str = "blelloch") -> Tensor:
    """States of ``s_t = a_t s_{t-1} + b_t`` along ``axis`` as a graph op.

    ``method`` picks the parallel scan or token-by-token iteration; both give
    the same states. The backward pass is the time-reversed recurrence
    ``lam_t = g_t + a_{t+1} lam_{t+1}``, evaluated with the same method.
    """
    if method not in ("blelloch", "sequential"):
        raise ValueError(f"unknown scan method {method!r}")
    ad, bd = np.broadcast_arrays(a.data, b.data)
    if method == "blelloch":
        states = scan(ad, bd, s0, axis)
    else:
        states = sequential_scan(ad, bd, s0, axis)

    def bw(g):
        am, gm = np.moveaxis(ad, axis, 0), np.moveaxis(g, axis, 0)
        shifted = np.concatenate([am[1:], np.ones_like(am[:1])], axis=0)[::-1]
        if method == "blelloch":
            lam = scan(shifted, gm[::-1], None, 0)[::-1]
        else:
            lam = sequential_scan(shifted, gm[::-1], None, 0)[::-1]
        sm = np.moveaxis(states, axis, 0)
        init = np.zeros_like(sm[:1]) if s0 is None else np.broadcast_to(s0, sm.shape[1:])[None]
        prev = np.concatenate([init, sm[:-1]], axis=0)
        ga = np.moveaxis(lam * prev, 0, axis)
        gb = np.moveaxis(lam, 0, axis)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(states, (a, b), bw)


def _run_scan(a, b, s0, axis, method):
    if method == "blelloch":
        return scan(a, b, s0, axis)
    if method == "sequential":
        return sequential_scan(a, b, s0, axis)
    raise ValueError(f"unknown scan method {method!r}")


def selective_ssm(delta: Tensor, A: Tensor, B: Tensor, C: Tensor, u: Tensor,
                  s0: np.ndarray | None = None, method: str = "blelloch"):
    """Fused discretize + scan + readout with one backward closure.

    ``delta, u [batch, T, d_inner]``, ``A [d_inner, d_state]``,
    ``B, C [batch, T, d_state]``. Returns ``(y [batch, T, d_inner], states)``
    with ``states [batch, T, d_inner, d_state]`` as an array. Mathematically
    identical to :func:`discretize_tensors`, :func:`selective_scan` and
    ``sum(s * C)`` in sequence. The sequential method runs a compiled loop;
    the Blelloch method evaluates the same expressions with array operations.
    """
    dl, Ad, Bd, Cd, ud = delta.data, A.data, B.data, C.data, u.data
    if dl.shape != ud.shape or Bd.shape != Cd.shape or Ad.shape != (dl.shape[-1], Bd.shape[-1]) \
            or Bd.shape[:-1] != dl.shape[:-1] or dl.ndim != 3:
        raise DimensionError(f"selective_ssm shapes: delta{dl.shape} A{Ad.shape} B{Bd.shape} "
                             f"C{Cd.shape} u{ud.shape}")
    parents = (delta, A, B, C, u)
    nb, _, di = dl.shape
    s0 = np.zeros((nb, di, Ad.shape[1])) if s0 is None else np.ascontiguousarray(s0, dtype=np.float64)

    if method == "sequential":
        args = [np.ascontiguousarray(v, dtype=np.float64) for v in (dl, Ad, Bd, Cd, ud)]
        y, states, abar, phis = _fused.ssm_forward(*args, s0)
        return _result(y, parents, lambda g: _fused.ssm_backward(
            np.ascontiguousarray(g, dtype=np.float64), *args, s0, states, abar, phis)), states
    if method != "blelloch":
        raise ValueError(f"unknown scan method {method!r}")

    d4 = dl[..., None]
    z = d4 * Ad
    A_bar = np.exp(z)
    ph = _phi(z)
    B3 = Bd[..., None, :]
    dphB = d4 * ph               # B_bar / B
    B_bar = dphB * B3
    states = scan(A_bar, B_bar * ud[..., None], s0, 1)
    y = np.einsum("btis,bts->bti", states, Cd)

    def bw(g):
        gs = g[..., None] * Cd[:, :, None, :]
        shifted = np.concatenate([A_bar[:, 1:], np.ones_like(A_bar[:, :1])], axis=1)[:, ::-1]
        lam = scan(shifted, gs[:, ::-1], None, 1)[:, ::-1]
        prev = np.concatenate([s0[:, None], states[:, :-1]], axis=1)
        gC = np.einsum("bti,btis->bts", g, states)
        gu = np.einsum("btis,btis->bti", lam, B_bar)
        gBbar = lam * ud[..., None]
        gB = np.einsum("btis,btis->bts", gBbar, dphB)
        # z enters A_bar = exp(z) and B_bar = delta * phi(z) * B
        gz = lam * prev * A_bar + gBbar * d4 * B3 * _dphi(z)
        gdelta = np.einsum("btis,is->bti", gz, Ad) + np.einsum("btis,btis->bti", gBbar, ph * B3)
        gA = np.einsum("btis,bti->is", gz, dl)
        return gdelta, gA, gB, gC, gu

    return _result(y, parents, bw), states
