"""Model and run configuration, presets and validation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from ..errors import ConfigError


@dataclass(frozen=True)
class MossNetConfig:
    d_model: int = 64
    d_inner: int | None = None        # None -> 2 * d_model
    d_state: int = 16
    n_layers: int = 4
    n_experts: int = 4
    k: int = 2
    alpha: float = 0.001              # load-balance loss weight
    n_heads: int = 2
    n_kv_heads: int = 1
    d_head: int | None = None         # None -> d_model // n_heads
    sliding_window: int | None = None
    tie_embeddings: bool = True
    vocab_size: int = 257             # 256 bytes + BOS
    context_length: int = 64
    lr_max: float = 3e-3
    warmup_frac: float = 0.03
    final_lr_ratio: float = 0.0
    schedule: str = "cosine"          # cosine | wsd
    wsd_decay_frac: float = 0.1
    seed: int = 0
    theorem_mode: bool = False
    attn_layer_indices: tuple = (2,)
    mlp_layer_indices: tuple | None = None  # None -> same as attn_layer_indices
    mlp_moe: bool = True
    d_ff: int | None = None           # None -> d_model
    dt_rank: int | None = None        # None -> ceil(d_model / 16)
    d_conv: int = 4
    renormalize: bool = False
    shared_router: bool = True
    balance_mode: str = "top1"        # top1 | topk
    delta_mixing: str = "continuous"  # continuous | discrete
    expert_gain: float = 1.0          # multiplies expert init bounds
    dynamic_topk: bool = False
    topk_high_steps: int = 900
    topk_low_steps: int = 100
    topk_high: int = 3
    topk_low: int = 2
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0

    @property
    def inner(self) -> int:
        return 2 * self.d_model if self.d_inner is None else self.d_inner

    @property
    def ff(self) -> int:
        return self.d_model if self.d_ff is None else self.d_ff

    @property
    def rank(self) -> int:
        return math.ceil(self.d_model / 16) if self.dt_rank is None else self.dt_rank

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads if self.d_head is None else self.d_head

    @property
    def mlp_layers(self) -> tuple:
        return tuple(self.attn_layer_indices if self.mlp_layer_indices is None else self.mlp_layer_indices)

    def violations(self) -> list:
        v = []
        positive = ("d_model", "d_state", "n_layers", "n_experts", "k", "n_heads", "n_kv_heads",
                    "vocab_size", "context_length", "d_conv", "topk_high_steps", "topk_low_steps")
        for name in positive:
            if getattr(self, name) < 1:
                v.append(f"{name} must be positive")
        for name in ("d_inner", "d_head", "d_ff", "dt_rank", "sliding_window"):
            val = getattr(self, name)
            if val is not None and val < 1:
                v.append(f"{name} must be positive when set")
        if self.k > self.n_experts:
            v.append(f"k ≤ N_experts violated: k={self.k}, n_experts={self.n_experts}")
        if self.dynamic_topk and max(self.topk_high, self.topk_low) > self.n_experts:
            v.append("dynamic top-k modes must satisfy k ≤ N_experts")
        if self.dynamic_topk and min(self.topk_high, self.topk_low) < 1:
            v.append("dynamic top-k modes must be positive")
        if self.n_kv_heads >= 1 and self.n_heads % self.n_kv_heads:
            v.append(f"n_kv_heads={self.n_kv_heads} must divide n_heads={self.n_heads}")
        for name, idx in (("attn_layer_indices", self.attn_layer_indices),
                          ("mlp_layer_indices", self.mlp_layers)):
            bad = [i for i in idx if not 0 <= i < self.n_layers]
            if bad:
                v.append(f"{name} {bad} must be < n_layers={self.n_layers}")
            if len(set(idx)) != len(idx):
                v.append(f"{name} has duplicates")
        if self.vocab_size < 257:
            v.append("vocab_size must be at least 257 (bytes + BOS)")
        if self.schedule not in ("cosine", "wsd"):
            v.append(f"schedule must be cosine or wsd, got {self.schedule!r}")
        if self.balance_mode not in ("top1", "topk"):
            v.append(f"balance_mode must be top1 or topk, got {self.balance_mode!r}")
        if self.delta_mixing not in ("continuous", "discrete"):
            v.append(f"delta_mixing must be continuous or discrete, got {self.delta_mixing!r}")
        if self.delta_mixing == "discrete" and not self.shared_router:
            v.append("delta_mixing = discrete needs shared_router")
        if not 0.0 <= self.warmup_frac < 1.0:
            v.append("warmup_frac must lie in [0, 1)")
        if not 0.0 <= self.final_lr_ratio <= 1.0:
            v.append("final_lr_ratio must lie in [0, 1]")
        if not 0.0 < self.wsd_decay_frac <= 1.0:
            v.append("wsd_decay_frac must lie in (0, 1]")
        if self.lr_max <= 0:
            v.append("lr_max must be positive")
        if self.alpha < 0:
            v.append("alpha must be nonnegative")
        return v

    def validate(self):
        v = self.violations()
        if v:
            raise ConfigError(v)
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RunConfig(MossNetConfig):
    corpus_path: str | None = None
    out_dir: str = "runs/default"
    steps: int = 2000
    eval_every: int = 200
    batch_size: int = 8
    eval_windows: int = 32
    train_mode: str = "recurrent"     # recurrent | scan

    def violations(self) -> list:
        v = super().violations()
        if self.steps < 1:
            v.append("steps must be positive")
        if self.eval_every < 1:
            v.append("eval_every must be positive")
        if self.batch_size < 1:
            v.append("batch_size must be positive")
        if self.eval_windows < 1:
            v.append("eval_windows must be positive")
        if self.train_mode not in ("recurrent", "scan"):
            v.append(f"train_mode must be recurrent or scan, got {self.train_mode!r}")
        return v

    def model_config(self) -> MossNetConfig:
        names = {f.name for f in dataclasses.fields(MossNetConfig)}
        return MossNetConfig(**{n: getattr(self, n) for n in names})


MODEL_FIELDS = tuple(f.name for f in dataclasses.fields(MossNetConfig))
RUN_FIELDS = tuple(f.name for f in dataclasses.fields(RunConfig))

# documented defaults, shown by ``emit_config``
FIELD_DOCS = {
    "d_model": "hidden width",
    "d_inner": "SSM inner width (none = 2*d_model)",
    "d_state": "SSM state size per channel",
    "n_layers": "number of residual layers",
    "n_experts": "experts per MoE site",
    "k": "active experts per token",
    "alpha": "load-balance loss weight",
    "n_heads": "attention query heads",
    "n_kv_heads": "attention key/value heads",
    "d_head": "attention head width (none = d_model/n_heads)",
    "sliding_window": "attention window in tokens (none = full causal)",
    "tie_embeddings": "share embedding and unembedding",
    "vocab_size": "byte vocabulary plus BOS",
    "context_length": "training window in tokens",
    "lr_max": "peak learning rate",
    "warmup_frac": "fraction of steps spent in linear warmup",
    "final_lr_ratio": "final lr as a fraction of lr_max",
    "schedule": "cosine or wsd",
    "wsd_decay_frac": "fraction of steps in the wsd decay phase",
    "seed": "master seed",
    "theorem_mode": "stripped blocks (no conv, no gate, single delta path)",
    "attn_layer_indices": "layers using attention instead of a MossNet block",
    "mlp_layer_indices": "layers followed by an MLP sublayer (none = attention layers)",
    "mlp_moe": "MLP sublayers are mixtures of experts",
    "d_ff": "MLP hidden width (none = d_model)",
    "dt_rank": "rank of the delta projection (none = ceil(d_model/16))",
    "d_conv": "causal conv width",
    "renormalize": "renormalise mixture weights over the selected experts",
    "shared_router": "one router per block for all six MoE sites",
    "balance_mode": "top1 or topk counting for the balance loss",
    "delta_mixing": "mix continuous delta (continuous) or discretized parameters (discrete)",
    "expert_gain": "scale of expert weight init",
    "dynamic_topk": "cycle k with the top-k schedule",
    "topk_high_steps": "steps per cycle at topk_high",
    "topk_low_steps": "steps per cycle at topk_low",
    "topk_high": "k in the long phase",
    "topk_low": "k in the short phase",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "adam_eps": "Adam epsilon",
    "weight_decay": "decoupled weight decay on matrices",
    "grad_clip": "global gradient-norm clip (0 disables)",
    "corpus_path": "byte corpus file (required for training)",
    "out_dir": "output directory",
    "steps": "optimizer steps",
    "eval_every": "steps between evaluations",
    "batch_size": "sequences per step",
    "eval_windows": "held-out windows per evaluation",
    "train_mode": "SSM evaluation during training: recurrent (fused loop) or scan",
}


def desk_config(**changes) -> RunConfig:
    return RunConfig(**changes).validate()


def published_config(**changes) -> RunConfig:
    """Dimensions of the smallest published MossNet model (8 experts of about 8M)."""
    base = dict(d_model=128, d_inner=256, d_state=16, n_layers=16, n_experts=8, k=2,
                n_heads=2, n_kv_heads=1, d_head=64, vocab_size=50304, context_length=2048,
                lr_max=1e-2, attn_layer_indices=(5, 10), d_ff=128, dt_rank=8)
    base.update(changes)
    return RunConfig(**base).validate()


ABLATION_VARIANTS = ("mossnet", "wo_mha", "wo_mlp_moe", "top1_8e", "top4_8e", "top2_4e", "top2_16e")


def ablation_variants(base: RunConfig) -> dict:
    """The seven architecture variants derived from an 8-expert, top-2 reference."""
    ref = base.replace(n_experts=8, k=2, mlp_layer_indices=base.mlp_layers)
    out = {
        "mossnet": ref,
        "wo_mha": ref.replace(attn_layer_indices=()),
        "wo_mlp_moe": ref.replace(mlp_moe=False),
        "top1_8e": ref.replace(k=1),
        "top4_8e": ref.replace(k=4),
        "top2_4e": ref.replace(n_experts=4),
        "top2_16e": ref.replace(n_experts=16),
    }
    for cfg in out.values():
        cfg.validate()
    return out
