"""Grouped-query causal attention with an optional sliding window, and the MLP sublayers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..moe import ExpertCounter, route_tokens
from ..numerics import Tensor, reshape, row_matmul, silu, softmax, swapaxes, transpose


@dataclass
class KVCache:
    k: np.ndarray   # [batch, n_kv, S, d_head]
    v: np.ndarray
    offset: int     # absolute position of the next token

    @classmethod
    def empty(cls, batch: int, n_kv: int, d_head: int) -> "KVCache":
        z = np.zeros((batch, n_kv, 0, d_head))
        return cls(z, z.copy(), 0)

    @property
    def nbytes(self) -> int:
        return int(self.k.nbytes + self.v.nbytes)


@dataclass
class AttentionParams:
    wq: Tensor  # [d_model, n_heads * d_head]
    wk: Tensor  # [d_model, n_kv * d_head]
    wv: Tensor
    wo: Tensor  # [n_heads * d_head, d_model]
    n_heads: int
    n_kv_heads: int
    d_head: int
    window: int | None = None


def attention_forward(x: Tensor, p: AttentionParams, cache: KVCache | None = None):
    """Causal GQA over ``x [B, T, d_model]``; returns ``(out, new_cache)``.

    Query head ``h`` reads key/value head ``h // (n_heads / n_kv_heads)``.
    With a cache, ``x`` continues the cached sequence.
    """
    B, T, _ = x.shape
    H, G, dh = p.n_heads, p.n_kv_heads, p.d_head
    rep = H // G
    past = 0 if cache is None else cache.k.shape[2]
    offset = 0 if cache is None else cache.offset

    q = transpose(reshape(x @ p.wq, (B, T, G, rep, dh)), (0, 2, 3, 1, 4))  # [B, G, rep, T, dh]
    k_new = transpose(reshape(x @ p.wk, (B, T, G, dh)), (0, 2, 1, 3))       # [B, G, T, dh]
    v_new = transpose(reshape(x @ p.wv, (B, T, G, dh)), (0, 2, 1, 3))
    if past:
        k_all = nx.concat([Tensor(cache.k), k_new], axis=2)
        v_all = nx.concat([Tensor(cache.v), v_new], axis=2)
    else:
        k_all, v_all = k_new, v_new

    scores = (q @ nx.expand_dims(swapaxes(k_all, -1, -2), 2)) * (1.0 / np.sqrt(dh))  # [B,G,rep,T,S]
    qpos = offset + np.arange(T)[:, None]
    kpos = offset - past + np.arange(past + T)[None, :]
    allowed = kpos <= qpos
    if p.window is not None:
        allowed &= qpos - kpos < p.window
    scores = nx.where(allowed, scores, -np.inf)
    att = softmax(scores, axis=-1) @ nx.expand_dims(v_all, 2)               # [B,G,rep,T,dh]
    out = reshape(transpose(att, (0, 3, 1, 2, 4)), (B, T, H * dh)) @ p.wo

    kd, vd = k_all.data, v_all.data
    if p.window is not None and kd.shape[2] > p.window:
        kd, vd = kd[:, :, -p.window:], vd[:, :, -p.window:]
    return out, KVCache(np.array(kd), np.array(vd), offset + T)


def gated_mlp(expert, x: Tensor) -> Tensor:
    w1, w3, w2 = expert
    return row_matmul(silu(row_matmul(x, w1)) * row_matmul(x, w3), w2)


@dataclass
class MlpParams:
    experts: list            # E x (w1 [d, ff], w3 [d, ff], w2 [ff, d])
    router: Tensor | None    # None for a dense MLP
    renormalize: bool = False


def mlp_forward(x: Tensor, p: MlpParams, k: int, aux: list | None = None,
                counter: ExpertCounter | None = None, site: str = "mlp") -> Tensor:
    shape = x.shape
    xf = reshape(x, (-1, shape[-1]))
    if p.router is None:
        out = gated_mlp(p.experts[0], xf)
    else:
        disp = route_tokens(xf, p.router, k, p.renormalize)
        if aux is not None:
            aux.append(disp)
        out = disp.combine(xf, p.experts, gated_mlp, counter, site)
    return reshape(out, shape)
