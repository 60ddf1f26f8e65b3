"""The hybrid language model: MossNet blocks, occasional attention layers, MLP sublayers.

Layer ``i`` is ``h += mixer(rmsnorm(h))`` where the mixer is a MossNet block
or, at ``attn_layer_indices``, a grouped-query attention layer. Layers listed
in ``mlp_layer_indices`` add ``h += mlp(rmsnorm(h))``. A final RMSNorm feeds the
unembedding, which is the embedding matrix itself when tied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..block import BlockConfig, BlockState, block_forward, block_param_shapes, init_tensor, params_from_dict
from ..moe import ExpertCounter, load_balance_loss
from ..numerics import Rng, Tensor, cross_entropy, reshape, rmsnorm, take_rows
from .config import MossNetConfig
from .layers import AttentionParams, KVCache, MlpParams, attention_forward, mlp_forward

BOS = 256


@dataclass(frozen=True)
class ParamSpec:
    path: str
    shape: tuple
    init: object
    expert: int | None = None  # index within an expert bank, None for shared tensors
    site: str | None = None    # expert bank the tensor belongs to

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def block_config(cfg: MossNetConfig) -> BlockConfig:
    return BlockConfig(d_model=cfg.d_model, d_inner=cfg.inner, d_state=cfg.d_state,
                       n_experts=cfg.n_experts, k=cfg.k, dt_rank=cfg.rank, conv_width=cfg.d_conv,
                       theorem_mode=cfg.theorem_mode, renormalize=cfg.renormalize,
                       shared_router=cfg.shared_router, delta_mixing=cfg.delta_mixing)


def layer_kinds(cfg: MossNetConfig) -> list:
    attn = set(cfg.attn_layer_indices)
    return ["attention" if i in attn else "mossnet" for i in range(cfg.n_layers)]


def param_plan(cfg: MossNetConfig) -> list:
    """Every parameter tensor of the model, in creation order, without allocating it."""
    d, V = cfg.d_model, cfg.vocab_size
    plan = [ParamSpec("embed.weight", (V, d), ("normal", 0.02))]
    mlp_layers = set(cfg.mlp_layers)
    bcfg = block_config(cfg)
    H, G, dh = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    for i, kind in enumerate(layer_kinds(cfg)):
        pre = f"layers.{i}"
        plan.append(ParamSpec(f"{pre}.norm.weight", (d,), "ones"))
        if kind == "mossnet":
            for path, shape, init, e in block_param_shapes(bcfg):
                site = f"{pre}.mixer.{path.split('.')[0]}" if e is not None else None
                plan.append(ParamSpec(f"{pre}.mixer.{path}", shape, init, e, site))
        else:
            for name, shape in (("wq", (d, H * dh)), ("wk", (d, G * dh)), ("wv", (d, G * dh)),
                                ("wo", (H * dh, d))):
                plan.append(ParamSpec(f"{pre}.attn.{name}", shape, ("uniform", shape[0])))
        if i in mlp_layers:
            plan.append(ParamSpec(f"{pre}.mlp_norm.weight", (d,), "ones"))
            ff = cfg.ff
            shapes = (("w1", (d, ff)), ("w3", (d, ff)), ("w2", (ff, d)))
            if cfg.mlp_moe:
                plan.append(ParamSpec(f"{pre}.mlp.router", (d, cfg.n_experts), "router"))
                for e in range(cfg.n_experts):
                    for name, shape in shapes:
                        plan.append(ParamSpec(f"{pre}.mlp.experts.{e}.{name}", shape,
                                              ("uniform", shape[0]), e, f"{pre}.mlp"))
            else:
                for name, shape in shapes:
                    plan.append(ParamSpec(f"{pre}.mlp.dense.{name}", shape, ("uniform", shape[0])))
    plan.append(ParamSpec("final_norm.weight", (d,), "ones"))
    if not cfg.tie_embeddings:
        plan.append(ParamSpec("lm_head.weight", (d, V), ("uniform", d)))
    return plan


def count_parameters(cfg: MossNetConfig, k: int | None = None) -> tuple:
    """``(total, active)`` parameter counts; active counts ``k`` of each expert bank."""
    k = cfg.k if k is None else k
    total = active = 0
    for spec in param_plan(cfg):
        total += spec.size
        if spec.expert is None:
            active += spec.size
        elif cfg.theorem_mode and spec.path.split(".")[3] == "dt_proj":
            active += spec.size if spec.expert == 0 else 0
        elif spec.expert < k:
            # expert banks are homogeneous, so k of them stand for any selection
            active += spec.size
    return total, active


class MossNetLM:
    def __init__(self, cfg: MossNetConfig, params: dict):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.kinds = layer_kinds(cfg)
        self.mlp_layers = set(cfg.mlp_layers)
        bcfg = block_config(cfg)
        self.mixers, self.mlps = [], {}
        for i, kind in enumerate(self.kinds):
            pre = f"layers.{i}"
            if kind == "mossnet":
                sub = {path[len(pre) + 7:]: t for path, t in params.items()
                       if path.startswith(f"{pre}.mixer.")}
                self.mixers.append(params_from_dict(bcfg, sub))
            else:
                g = lambda n: params[f"{pre}.attn.{n}"]
                self.mixers.append(AttentionParams(g("wq"), g("wk"), g("wv"), g("wo"), cfg.n_heads,
                                                   cfg.n_kv_heads, cfg.head_dim, cfg.sliding_window))
            if i in self.mlp_layers:
                if cfg.mlp_moe:
                    experts = [tuple(params[f"{pre}.mlp.experts.{e}.{n}"] for n in ("w1", "w3", "w2"))
                               for e in range(cfg.n_experts)]
                    self.mlps[i] = MlpParams(experts, params[f"{pre}.mlp.router"], cfg.renormalize)
                else:
                    self.mlps[i] = MlpParams([tuple(params[f"{pre}.mlp.dense.{n}"] for n in ("w1", "w3", "w2"))],
                                             None)

    @classmethod
    def build(cls, cfg: MossNetConfig, rng: Rng | None = None) -> "MossNetLM":
        rng = Rng(cfg.seed) if rng is None else rng
        bcfg = block_config(cfg)
        params = {}
        for spec in param_plan(cfg):
            data = init_tensor(spec.shape, spec.init, rng, bcfg)
            if spec.expert is not None and cfg.expert_gain != 1.0:
                data = data * cfg.expert_gain
            params[spec.path] = Tensor(data, requires_grad=True, name=spec.path)
        return cls(cfg, params)

    # -- parameters -----------------------------------------------------------

    def parameters(self) -> list:
        return list(self.params.values())

    @property
    def embedding(self) -> Tensor:
        return self.params["embed.weight"]

    @property
    def unembedding(self) -> Tensor:
        if self.cfg.tie_embeddings:
            return nx.transpose(self.params["embed.weight"])
        return self.params["lm_head.weight"]

    # -- forward --------------------------------------------------------------

    def init_states(self, batch: int = 1) -> list:
        states = []
        for kind, mixer in zip(self.kinds, self.mixers):
            if kind == "mossnet":
                states.append(BlockState.zeros(mixer.cfg, batch))
            else:
                states.append(KVCache.empty(batch, self.cfg.n_kv_heads, self.cfg.head_dim))
        return states

    def forward(self, tokens, k: int | None = None, states: list | None = None, mode: str = "scan",
                aux: list | None = None, counter: ExpertCounter | None = None,
                return_states: bool = False):
        """Logits ``[B, T, vocab]`` for integer ``tokens [B, T]``.

        ``states`` continues from earlier calls (streaming); with
        ``return_states`` the updated per-layer states are returned too.
        """
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.ndim == 1:
            tokens = tokens[None]
        B, T = tokens.shape
        k = self.cfg.k if k is None else k
        d = self.cfg.d_model
        h = reshape(take_rows(self.embedding, tokens.reshape(-1)), (B, T, d))
        new_states = []
        for i, (kind, mixer) in enumerate(zip(self.kinds, self.mixers)):
            x = rmsnorm(h, self.params[f"layers.{i}.norm.weight"])
            st = None if states is None else states[i]
            if kind == "mossnet":
                y, st = block_forward(x, mixer, mode=mode, state=st, k=k, aux=aux, counter=counter,
                                      return_state=True)
            else:
                y, st = attention_forward(x, mixer, st)
            new_states.append(st)
            h = h + y
            if i in self.mlps:
                x = rmsnorm(h, self.params[f"layers.{i}.mlp_norm.weight"])
                h = h + mlp_forward(x, self.mlps[i], k, aux, counter, f"layers.{i}.mlp")
        h = rmsnorm(h, self.params["final_norm.weight"])
        logits = h @ self.unembedding
        return (logits, new_states) if return_states else logits

    def loss(self, tokens, k: int | None = None, mode: str = "scan"):
        """Next-token cross-entropy plus the balance loss of every MoE site.

        ``tokens [B, L+1]``; returns ``(total, {"ce": float, "balance": float})``.
        """
        tokens = np.asarray(tokens, dtype=np.intp)
        aux = []
        logits = self.forward(tokens[:, :-1], k=k, aux=aux, mode=mode)
        ce = cross_entropy(logits, tokens[:, 1:])
        total = ce
        balance = 0.0
        if self.cfg.alpha > 0 and aux:
            terms = [load_balance_loss(disp.probs, disp.selected, self.cfg.alpha, self.cfg.balance_mode)
                     for disp in aux]
            bal = terms[0]
            for t in terms[1:]:
                bal = bal + t
            total = ce + bal
            balance = float(bal.data)
        return total, {"ce": float(ce.data), "balance": balance}

    def step(self, token, states: list, k: int | None = None):
        """Streaming step: ``token [B]`` -> ``(logits [B, vocab], states)``."""
        token = np.asarray(token, dtype=np.intp).reshape(-1, 1)
        logits, states = self.forward(token, k=k, states=states, mode="recurrent", return_states=True)
        return logits.data[:, -1], states

    def prefill(self, tokens, k: int | None = None, chunk: int | None = None):
        """Process a prompt in scan mode, optionally in chunks; returns ``(last_logits, states)``."""
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.ndim == 1:
            tokens = tokens[None]
        states = None
        T = tokens.shape[1]
        chunk = T if chunk is None else chunk
        with nx.no_grad():
            for start in range(0, T, chunk):
                logits, states = self.forward(tokens[:, start:start + chunk], k=k, states=states,
                                              return_states=True)
        return logits.data[:, -1], states

    @staticmethod
    def state_nbytes(states: list) -> int:
        return int(sum(s.nbytes for s in states))
