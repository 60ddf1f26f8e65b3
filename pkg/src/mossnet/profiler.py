"""Inference memory and throughput versus context length.

A hybrid MossNet model (recurrent blocks plus one sliding-window attention
layer) is compared with a pure-attention baseline. Per context length the
sweep times a chunked prefill over a random prompt and a 64-token streaming
generation, and records the exact byte size of the recurrent states and KV
caches left behind by the prefill.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import statistics
import time
import tracemalloc
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .lm.config import MossNetConfig
from .lm.model import MossNetLM
from .numerics import Rng, no_grad

DEFAULT_CONTEXTS = (256, 512, 1024, 2048, 4096)
GENERATE_TOKENS = 64
PREFILL_CHUNK = 512
FIELDS = ("model_tag", "phase", "context_len", "batch", "tokens_per_sec", "state_bytes", "peak_alloc_bytes")


@dataclass(frozen=True)
class TraceRecord:
    model_tag: str
    phase: str             # prefill | generate | skipped
    context_len: int
    batch: int
    tokens_per_sec: float
    state_bytes: int
    peak_alloc_bytes: int

    def __post_init__(self):
        if min(self.context_len, self.batch, self.state_bytes, self.peak_alloc_bytes) < 0 or self.tokens_per_sec < 0:
            raise ContractError(f"negative field in {self}")


def mossnet_profile_config(max_context: int = 4096, **changes) -> MossNetConfig:
    base = dict(d_model=64, n_layers=4, attn_layer_indices=(2,), sliding_window=256,
                context_length=max_context)
    base.update(changes)
    return MossNetConfig(**base).validate()


def attention_profile_config(max_context: int = 4096, **changes) -> MossNetConfig:
    """Every layer attention with a dense MLP after it, no window."""
    base = dict(d_model=64, n_layers=4, attn_layer_indices=(0, 1, 2, 3), mlp_layer_indices=(0, 1, 2, 3),
                mlp_moe=False, sliding_window=None, context_length=max_context)
    base.update(changes)
    return MossNetConfig(**base).validate()


def default_models(max_context: int = 4096, seed: int = 0) -> dict:
    rng = Rng(seed)
    return {"mossnet": MossNetLM.build(mossnet_profile_config(max_context, seed=seed), rng.spawn(0)),
            "attention": MossNetLM.build(attention_profile_config(max_context, seed=seed), rng.spawn(1))}


def _prefill(model, prompt, chunk):
    return model.prefill(prompt, chunk=chunk)


def _generate(model, last, states, n):
    tok = np.argmax(last[:, :256], axis=-1)
    for _ in range(n):
        last, states = model.step(tok, states)
        tok = np.argmax(last[:, :256], axis=-1)
    return states


def _median_time(fn, reps: int) -> float:
    fn()  # warmup, discarded
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _peak_bytes(fn) -> int:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        fn()
        return int(tracemalloc.get_traced_memory()[1])
    finally:
        tracemalloc.stop()


def sweep(model: MossNetLM, tag: str, contexts=DEFAULT_CONTEXTS, reps: int = 3, batch: int = 1,
          seed: int = 0, chunk: int = PREFILL_CHUNK, n_generate: int = GENERATE_TOKENS,
          measure_peak: bool = True) -> list:
    """Trace records for one model over ascending ``contexts``.

    Contexts above the model's ``context_length`` produce a ``skipped``
    record (zeros) and a warning instead of a measurement.
    """
    contexts = list(contexts)
    if contexts != sorted(contexts):
        raise ContractError("contexts must be sorted ascending")
    if reps < 3:
        raise ContractError("reps must be at least 3")
    limit = model.cfg.context_length
    rng = Rng(seed)
    out = []
    with no_grad():
        for T in contexts:
            if T > limit:
                warnings.warn(f"{tag}: context {T} exceeds the model limit {limit}; skipped")
                out.append(TraceRecord(tag, "skipped", T, batch, 0.0, 0, 0))
                continue
            prompt = rng.integers(0, 256, size=(batch, T))
            last, states = _prefill(model, prompt, chunk)
            state_bytes = model.state_nbytes(states)
            t_pre = _median_time(lambda: _prefill(model, prompt, chunk), reps)
            t_gen = _median_time(lambda: _generate(model, last, states, n_generate), reps)
            peak_pre = _peak_bytes(lambda: _prefill(model, prompt, chunk)) if measure_peak else 0
            peak_gen = _peak_bytes(lambda: _generate(model, last, states, n_generate)) if measure_peak else 0
            out.append(TraceRecord(tag, "prefill", T, batch, batch * T / t_pre, state_bytes, peak_pre))
            out.append(TraceRecord(tag, "generate", T, batch, batch * n_generate / t_gen, state_bytes, peak_gen))
    return out


def kv_cache_bytes(cfg: MossNetConfig, context: int, batch: int = 1) -> int:
    """Closed-form cache size of the attention layers (float64)."""
    n_attn = len(cfg.attn_layer_indices)
    S = context if cfg.sliding_window is None else min(context, cfg.sliding_window)
    return 2 * n_attn * cfg.n_kv_heads * cfg.head_dim * S * 8 * batch


# -- reporting ----------------------------------------------------------------

def to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in records:
        w.writerow([r.model_tag, r.phase, r.context_len, r.batch, repr(float(r.tokens_per_sec)),
                    r.state_bytes, r.peak_alloc_bytes])
    return buf.getvalue()


def read_csv(source) -> list:
    """Records from CSV text or a file path."""
    text = source if isinstance(source, str) and "\n" in source else Path(source).read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != FIELDS:
        raise ContractError(f"unexpected trace columns {tuple(rows[0].keys())}")
    return [TraceRecord(r["model_tag"], r["phase"], int(r["context_len"]), int(r["batch"]),
                        float(r["tokens_per_sec"]), int(r["state_bytes"]), int(r["peak_alloc_bytes"]))
            for r in rows]


@dataclass(frozen=True)
class MemoryFit:
    model_tag: str
    slope: float       # bytes per token of context
    intercept: float
    r2: float
    max_context: int

    @property
    def flat(self) -> bool:
        return abs(self.slope) * self.max_context < 0.01 * abs(self.intercept)


def linear_fit(x, y) -> tuple:
    """Least-squares ``(slope, intercept, r2)``; ``r2 = 1`` for an exact constant."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2 or np.ptp(x) == 0:
        return 0.0, float(y.mean()), 1.0
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    if ss_tot == 0:
        slope, intercept = 0.0, float(y.mean())
    return float(slope), float(intercept), r2


def memory_fits(records) -> dict:
    fits = {}
    tags = sorted({r.model_tag for r in records})
    for tag in tags:
        rs = [r for r in records if r.model_tag == tag and r.phase == "prefill"]
        if not rs:
            continue
        xs = [r.context_len for r in rs]
        s, b, r2 = linear_fit(xs, [r.state_bytes for r in rs])
        fits[tag] = MemoryFit(tag, s, b, r2, max(xs))
    return fits


def report(records) -> tuple:
    """``(csv_text, summary_text)`` for a nonempty record list."""
    records = list(records)
    if not records:
        raise ContractError("report needs at least one record")
    lines = ["model       phase     context  tokens/s      state_bytes"]
    for r in records:
        lines.append(f"{r.model_tag:<11} {r.phase:<9} {r.context_len:>7}  {r.tokens_per_sec:>10.1f}  {r.state_bytes:>12}")
    lines.append("")
    for fit in memory_fits(records).values():
        lines.append(f"{fit.model_tag}: memory slope {fit.slope:.3f} B/token, intercept {fit.intercept:.0f} B, "
                     f"R^2 {fit.r2:.6f}, flat={fit.flat}")
    return to_csv(records), "\n".join(lines) + "\n"


def as_dict(r: TraceRecord) -> dict:
    return dataclasses.asdict(r)
