"""The mixture-of-SSM-experts time-mixing block.

Six parameter sites are expert banks: the input, gate and output projections
and the projections producing the selective SSM parameters ``delta``, ``B``
and ``C``. All of them reuse one routing decision per token by default.

Per token ``x`` (already normalised by the caller)::

    u   = MoE_in(x);  u = silu(causal_conv(u))
    dt  = softplus(MoE_dt(u) + dt_bias)
    B   = MoE_B(u);   C = MoE_C(u)
    s_t = exp(dt A) s_{t-1} + dt phi(dt A) B u      (per channel, diagonal A)
    y   = MoE_out(<C, s_t> * silu(MoE_gate(x)))

``theorem_mode`` strips the block to the pieces covered by the attention
equivalence: no convolution, no activation on ``u``, no gate and a single
(expert 0) ``delta`` path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .moe import ExpertCounter, route_tokens
from .numerics import Tensor, Rng, exp, getitem, reshape, row_matmul, silu, softplus
from .ssm_kernel import discretize_tensors, selective_scan, selective_ssm

SITES = ("in", "gate", "out", "dt", "B", "C")


@dataclass(frozen=True)
class BlockConfig:
    d_model: int
    d_inner: int
    d_state: int = 16
    n_experts: int = 4
    k: int = 2
    dt_rank: int = 4
    conv_width: int = 4
    theorem_mode: bool = False
    renormalize: bool = False
    shared_router: bool = True
    delta_mixing: str = "continuous"  # or "discrete": discretize per expert, then mix
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        if not 1 <= self.k <= self.n_experts:
            raise ContractError(f"k={self.k} must lie in [1, n_experts={self.n_experts}]")
        if self.delta_mixing not in ("continuous", "discrete"):
            raise ContractError(f"unknown delta_mixing {self.delta_mixing!r}")
        if min(self.d_model, self.d_inner, self.d_state, self.dt_rank, self.conv_width) < 1:
            raise ContractError("block dimensions must be positive")


@dataclass
class MossNetBlockParams:
    cfg: BlockConfig
    in_proj: list     # E x [d_model, d_inner]
    gate_proj: list   # E x [d_model, d_inner]
    out_proj: list    # E x [d_inner, d_model]
    dt_proj: list     # E x ([d_inner, dt_rank], [dt_rank, d_inner])
    B_proj: list      # E x [d_inner, d_state]
    C_proj: list      # E x [d_inner, d_state]
    conv_weight: Tensor  # [d_inner, w]
    conv_bias: Tensor    # [d_inner]
    A_log: Tensor        # [d_inner, d_state]
    dt_bias: Tensor      # [d_inner]
    routers: dict        # site -> Tensor [d_model, E]; one shared tensor by default

    @property
    def A(self) -> Tensor:
        return -exp(self.A_log)

    def named_parameters(self) -> dict:
        """Canonical path -> tensor, each tensor listed once."""
        out = {}
        for site, bank in (("in_proj", self.in_proj), ("gate_proj", self.gate_proj),
                           ("out_proj", self.out_proj), ("B_proj", self.B_proj),
                           ("C_proj", self.C_proj)):
            for e, w in enumerate(bank):
                out[f"{site}.{e}"] = w
        for e, (down, up) in enumerate(self.dt_proj):
            out[f"dt_proj.{e}.down"] = down
            out[f"dt_proj.{e}.up"] = up
        out["conv.weight"] = self.conv_weight
        out["conv.bias"] = self.conv_bias
        out["A_log"] = self.A_log
        out["dt_bias"] = self.dt_bias
        if self.cfg.shared_router:
            out["router"] = self.routers["in"]
        else:
            for site in SITES:
                out[f"router.{site}"] = self.routers[site]
        return out


@dataclass
class BlockState:
    ssm: np.ndarray        # [batch, d_inner, d_state]
    conv_tail: np.ndarray  # [batch, w-1, d_inner], last pre-conv inputs

    @classmethod
    def zeros(cls, cfg: BlockConfig, batch: int = 1) -> "BlockState":
        return cls(np.zeros((batch, cfg.d_inner, cfg.d_state)),
                   np.zeros((batch, cfg.conv_width - 1, cfg.d_inner)))

    @property
    def nbytes(self) -> int:
        return int(self.ssm.nbytes + self.conv_tail.nbytes)


def block_param_shapes(cfg: BlockConfig) -> list:
    """``(path, shape, init, expert_index)`` in creation order.

    ``init`` names the initialiser: ``("uniform", fan_in)``, ``"zeros"``,
    ``"A_log"``, ``"dt_bias"`` or ``"router"``.
    """
    d, di, ds, r, E = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank, cfg.n_experts
    plan = []
    for site, shape in (("in_proj", (d, di)), ("gate_proj", (d, di)), ("out_proj", (di, d)),
                        ("B_proj", (di, ds)), ("C_proj", (di, ds))):
        for e in range(E):
            plan.append((f"{site}.{e}", shape, ("uniform", shape[0]), e))
    for e in range(E):
        plan.append((f"dt_proj.{e}.down", (di, r), ("uniform", di), e))
        plan.append((f"dt_proj.{e}.up", (r, di), ("uniform", r), e))
    plan.append(("conv.weight", (di, cfg.conv_width), ("uniform", cfg.conv_width), None))
    plan.append(("conv.bias", (di,), "zeros", None))
    plan.append(("A_log", (di, ds), "A_log", None))
    plan.append(("dt_bias", (di,), "dt_bias", None))
    for site in (("",) if cfg.shared_router else SITES):
        plan.append(("router" + (f".{site}" if site else ""), (d, E), "router", None))
    return plan


def init_tensor(shape, init, rng: Rng, cfg=None) -> np.ndarray:
    if init == "zeros":
        return np.zeros(shape)
    if init == "ones":
        return np.ones(shape)
    if init == "router":
        return rng.normal(shape, std=0.02)
    if init == "A_log":
        return np.log(np.broadcast_to(np.arange(1, shape[1] + 1, dtype=np.float64), shape)).copy()
    if init == "dt_bias":
        dt = np.exp(rng.uniform(shape, np.log(cfg.dt_min), np.log(cfg.dt_max)))
        return dt + np.log(-np.expm1(-dt))  # inverse softplus
    if isinstance(init, tuple) and init[0] == "uniform":
        bound = 1.0 / np.sqrt(init[1])
        return rng.uniform(shape, -bound, bound)
    if isinstance(init, tuple) and init[0] == "normal":
        return rng.normal(shape, std=init[1])
    raise ValueError(f"unknown initialiser {init!r}")


def params_from_dict(cfg: BlockConfig, tensors: dict) -> MossNetBlockParams:
    """Assemble block parameters from ``{path: Tensor}`` (paths as in the shape plan)."""
    E = cfg.n_experts
    bank = lambda site: [tensors[f"{site}.{e}"] for e in range(E)]
    if cfg.shared_router:
        routers = {s: tensors["router"] for s in SITES}
    else:
        routers = {s: tensors[f"router.{s}"] for s in SITES}
    return MossNetBlockParams(
        cfg=cfg, in_proj=bank("in_proj"), gate_proj=bank("gate_proj"), out_proj=bank("out_proj"),
        dt_proj=[(tensors[f"dt_proj.{e}.down"], tensors[f"dt_proj.{e}.up"]) for e in range(E)],
        B_proj=bank("B_proj"), C_proj=bank("C_proj"),
        conv_weight=tensors["conv.weight"], conv_bias=tensors["conv.bias"],
        A_log=tensors["A_log"], dt_bias=tensors["dt_bias"], routers=routers)


def init_block(cfg: BlockConfig, rng: Rng) -> MossNetBlockParams:
    tensors = {path: Tensor(init_tensor(shape, init, rng, cfg), requires_grad=True, name=path)
               for path, shape, init, _ in block_param_shapes(cfg)}
    return params_from_dict(cfg, tensors)


def _linear(w, x):
    return row_matmul(x, w)


def _lowrank(pair, x):
    return row_matmul(row_matmul(x, pair[0]), pair[1])


def _causal_conv(u: Tensor, tail: np.ndarray, weight: Tensor, bias: Tensor):
    """Depthwise causal conv along axis 1 of ``u [B, T, di]`` prefixed by ``tail``."""
    w = weight.shape[1]
    T = u.shape[1]
    padded = nx.concat([Tensor(tail), u], axis=1) if w > 1 else u
    out = None
    for j in range(w):
        term = getitem(padded, (slice(None), slice(j, j + T))) * getitem(weight, (slice(None), j))
        out = term if out is None else out + term
    new_tail = padded.data[:, padded.shape[1] - (w - 1):] if w > 1 else tail
    return out + bias, np.array(new_tail)


def _site_dispatches(xf: Tensor, p: MossNetBlockParams, k: int, aux) -> dict:
    cfg = p.cfg
    cache = {}
    out = {}
    for site in SITES:
        w = p.routers[site]
        if id(w) not in cache:
            cache[id(w)] = route_tokens(xf, w, k, cfg.renormalize)
            if aux is not None:
                aux.append(cache[id(w)])
        out[site] = cache[id(w)]
    return out


def block_forward(x, p: MossNetBlockParams, mode: str = "scan", state: BlockState | None = None,
                  k: int | None = None, aux: list | None = None, counter: ExpertCounter | None = None,
                  trace: dict | None = None, return_state: bool = False):
    """Run the block over ``x [T, d_model]`` or ``x [batch, T, d_model]``.

    ``mode="scan"`` uses the parallel scan and ``"recurrent"`` iterates token
    by token; they agree to rounding. ``aux`` (a list) collects one
    :class:`~mossnet.moe.Dispatch` per distinct router for the balance loss.
    ``trace`` (a dict) receives intermediate arrays. With ``return_state`` the
    final :class:`BlockState` is returned alongside the output.
    """
    cfg = p.cfg
    x = nx.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[2] != cfg.d_model:
        raise DimensionError(f"block expects [..., T, {cfg.d_model}], got {x.shape}")
    if mode not in ("scan", "recurrent"):
        raise ContractError(f"unknown mode {mode!r}")
    nb, T, d = x.shape
    if T < 1:
        raise ContractError("block_forward needs T >= 1")
    k = cfg.k if k is None else k
    if not 1 <= k <= cfg.n_experts:
        raise ContractError(f"k={k} must lie in [1, {cfg.n_experts}]")
    state = BlockState.zeros(cfg, nb) if state is None else state
    n = nb * T
    di, ds = cfg.d_inner, cfg.d_state

    xf = reshape(x, (n, d))
    disp = _site_dispatches(xf, p, k, aux)

    u = reshape(disp["in"].combine(xf, p.in_proj, _linear, counter, "in"), (nb, T, di))
    if cfg.theorem_mode:
        new_tail = np.concatenate([state.conv_tail, u.data], axis=1)[:, T:]
    else:
        u, new_tail = _causal_conv(u, state.conv_tail, p.conv_weight, p.conv_bias)
        u = silu(u)
    uf = reshape(u, (n, di))
    A = p.A

    method = "blelloch" if mode == "scan" else "sequential"
    if cfg.delta_mixing == "discrete" and not cfg.theorem_mode:
        A_bar, B_bar = _discrete_mixture(uf, p, A, disp, counter)
        Cm = disp["C"].combine(uf, p.C_proj, _linear, counter, "C")
        b = reshape(B_bar, (nb, T, di, ds)) * nx.expand_dims(u, -1)
        s = selective_scan(reshape(A_bar, (nb, T, di, ds)), b, state.ssm, axis=1, method=method)
        y = (s * nx.expand_dims(reshape(Cm, (nb, T, ds)), 2)).sum(axis=-1)
        delta = Bm = None
        states = s.data
        abar = A_bar.data.reshape(nb, T, di, ds)
    else:
        if cfg.theorem_mode:
            dt_raw = _lowrank(p.dt_proj[0], uf)
        else:
            dt_raw = disp["dt"].combine(uf, p.dt_proj, _lowrank, counter, "dt")
        delta = softplus(dt_raw + p.dt_bias)
        Bm = disp["B"].combine(uf, p.B_proj, _linear, counter, "B")
        Cm = disp["C"].combine(uf, p.C_proj, _linear, counter, "C")
        y, states = selective_ssm(reshape(delta, (nb, T, di)), A, reshape(Bm, (nb, T, ds)),
                                  reshape(Cm, (nb, T, ds)), u, state.ssm, method)
        abar = None
    final_state = np.array(states[:, -1])

    if trace is not None:
        trace.update(u=u.data, delta=None if delta is None else delta.data.reshape(nb, T, di),
                     A_bar=_discrete_a(delta, A, nb, T) if abar is None else abar,
                     B=None if Bm is None else Bm.data, C=Cm.data,
                     y_ssm=y.data, dispatch=disp, states=states)
    if not cfg.theorem_mode:
        g = silu(disp["gate"].combine(xf, p.gate_proj, _linear, counter, "gate"))
        y = y * reshape(g, (nb, T, di))
    out = disp["out"].combine(reshape(y, (n, di)), p.out_proj, _linear, counter, "out")
    out = reshape(out, (T, d) if squeeze else (nb, T, d))
    if not return_state:
        return out
    return out, BlockState(final_state, new_tail)


def _discrete_a(delta: Tensor, A: Tensor, nb: int, T: int) -> np.ndarray:
    return np.exp(delta.data.reshape(nb, T, -1)[..., None] * A.data)


def _discrete_mixture(uf: Tensor, p: MossNetBlockParams, A: Tensor, disp: dict, counter):
    """Discretize each routed expert's (delta, B) and mix the discrete parameters."""
    dispatch_dt, dispatch_B = disp["dt"], disp["B"]
    if dispatch_dt is not dispatch_B:
        raise ContractError("discrete delta mixing needs the dt and B sites to share a router")
    n = dispatch_dt.n_tokens
    parts_a, parts_b, rows = [], [], []
    for e, idx in enumerate(dispatch_dt.rows):
        if idx.size == 0:
            continue
        ue = nx.take_rows(uf, idx)
        delta_e = softplus(_lowrank(p.dt_proj[e], ue) + p.dt_bias)
        a_e, b_e = discretize_tensors(delta_e, A, ue @ p.B_proj[e])
        w = reshape(dispatch_dt.weights[e], (idx.size, 1, 1))
        parts_a.append(a_e * w)
        parts_b.append(b_e * w)
        rows.append(idx)
        if counter is not None:
            counter.add("dt", idx.size)
            counter.add("B", idx.size)
    rows = np.concatenate(rows)
    A_bar = nx.scatter_rows(nx.concat(parts_a, 0), rows, n)
    B_bar = nx.scatter_rows(nx.concat(parts_b, 0), rows, n)
    return A_bar, B_bar


def block_step(x_t, state: BlockState, p: MossNetBlockParams, k: int | None = None,
               counter: ExpertCounter | None = None):
    """One streaming step: ``x_t [d_model]`` or ``[batch, d_model]`` -> ``(y_t, new_state)``."""
    x_t = nx.as_tensor(x_t)
    single = x_t.ndim == 1
    x3 = reshape(x_t, (1, 1, x_t.shape[-1]) if single else (x_t.shape[0], 1, x_t.shape[-1]))
    out, new_state = block_forward(x3, p, mode="recurrent", state=state, k=k, counter=counter,
                                   return_state=True)
    return reshape(out, (out.shape[-1],) if single else (out.shape[0], out.shape[-1])), new_state
