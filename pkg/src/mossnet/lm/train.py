"""Optimiser, learning-rate schedules, the training loop, perplexity and generation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nx
from ..errors import ContractError, TrainingDiverged
from ..moe import topk_schedule
from ..numerics import Rng, backward, cross_entropy, no_grad
from .config import RunConfig
from .data import Corpus, encode, eval_windows, sample_batch, with_bos
from .model import BOS, MossNetLM

METRICS_HEADER = ("step", "lr", "ce", "balance", "ppl_eval", "k_active")
DIVERGENCE_WINDOW = 100


def lr_at(step: int, total_steps: int, lr_max: float, warmup_frac: float = 0.03,
          final_ratio: float = 0.0, schedule: str = "cosine", decay_frac: float = 0.1) -> float:
    """Learning rate at ``step`` of ``total_steps``.

    Linear warmup from 0 reaches ``lr_max`` at ``round(warmup_frac * total)``.
    Cosine decays to ``final_ratio * lr_max`` at the last step; ``"wsd"`` holds
    ``lr_max`` and decays linearly over the final ``decay_frac`` of training.
    """
    warm = int(round(warmup_frac * total_steps))
    last = max(total_steps - 1, 1)
    lo = final_ratio * lr_max
    if warm > 0 and step < warm:
        return lr_max * step / warm
    if schedule == "cosine":
        span = max(last - warm, 1)
        frac = min(max((step - warm) / span, 0.0), 1.0)
        return lo + (lr_max - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))
    if schedule == "wsd":
        start = max(last - int(round(decay_frac * total_steps)), warm)
        if step <= start:
            return lr_max
        frac = min((step - start) / max(last - start, 1), 1.0)
        return lr_max + (lo - lr_max) * frac
    raise ContractError(f"unknown schedule {schedule!r}")


@dataclass
class AdamW:
    params: list
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(grads: list, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            if g is not None:
                g *= scale
    return norm


def mean_ce(model: MossNetLM, windows: np.ndarray, k: int | None = None, batch: int = 16,
            mode: str = "scan") -> float:
    """Token-weighted mean next-byte cross-entropy over BOS-prefixed windows."""
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(windows), batch):
            w = windows[s:s + batch]
            logits = model.forward(w[:, :-1], k=k, mode=mode)
            n = w.shape[0] * (w.shape[1] - 1)
            total += float(cross_entropy(logits, w[:, 1:]).data) * n
            count += n
    return total / count


def perplexity(model: MossNetLM, text, k: int | None = None) -> float:
    """``exp`` of the mean next-byte cross-entropy of ``text``.

    The text is cut into ``context_length`` chunks, each read after a BOS.
    """
    data = encode(text)
    if data.size == 0:
        raise ContractError("perplexity of empty text")
    L = model.cfg.context_length
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(data), L):
            w = with_bos(data[s:s + L])[None]
            logits = model.forward(w[:, :-1], k=k)
            n = w.shape[1] - 1
            total += float(cross_entropy(logits, w[:, 1:]).data) * n
            count += n
    return _exp(total / count)


def generate(model: MossNetLM, prompt, n_tokens: int, temperature: float = 0.0,
             seed: int = 0, k: int | None = None, stream: bool = True) -> bytes:
    """Continue ``prompt`` by ``n_tokens`` bytes (greedy when ``temperature == 0``).

    ``stream=True`` carries recurrent states and KV caches forward one token
    at a time; ``stream=False`` re-runs the full sequence for every token.
    """
    if n_tokens <= 0:
        return b""
    rng = Rng(seed)
    seq = list(with_bos(encode(prompt)))
    out = []
    with no_grad():
        if stream:
            last, states = model.prefill(np.array([seq]), k=k)
        for _ in range(n_tokens):
            if not stream:
                last = model.forward(np.array([seq]), k=k).data[:, -1]
            tok = _pick(last[0, :256], temperature, rng)
            out.append(tok)
            seq.append(tok)
            if stream:
                last, states = model.step(np.array([tok]), states, k=k)
    return bytes(out)


def _pick(logits: np.ndarray, temperature: float, rng: Rng) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    z = logits / temperature
    p = np.exp(z - z.max())
    return int(rng.choice(len(p), 1, p=p / p.sum())[0])


@dataclass
class TrainResult:
    model: MossNetLM
    step: int
    rng_state: dict
    metrics: list  # dict rows keyed by METRICS_HEADER


def k_for_step(cfg: RunConfig, step: int) -> int:
    if cfg.dynamic_topk:
        return topk_schedule(step, cfg.topk_high_steps, cfg.topk_low_steps, cfg.topk_high, cfg.topk_low)
    return cfg.k


def train(cfg: RunConfig, corpus: Corpus, log=None, model: MossNetLM | None = None) -> TrainResult:
    """Train from scratch (deterministic in ``cfg.seed``); returns the final model and metrics."""
    cfg.validate()
    if len(corpus.train) < cfg.context_length + 1:
        raise ContractError(f"corpus needs at least {cfg.context_length + 1} bytes")
    root = Rng(cfg.seed)
    model = MossNetLM.build(cfg.model_config(), root.spawn(0)) if model is None else model
    data_rng = root.spawn(1)
    evals = eval_windows(corpus.eval, cfg.context_length, cfg.eval_windows)
    params = model.parameters()
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    rows = []
    initial_ce = None
    bad_run = 0
    for step in range(cfg.steps):
        k = k_for_step(cfg, step)
        lr = lr_at(step, cfg.steps, cfg.lr_max, cfg.warmup_frac, cfg.final_lr_ratio,
                   cfg.schedule, cfg.wsd_decay_frac)
        tokens = sample_batch(corpus.train, cfg.batch_size, cfg.context_length, data_rng)
        loss, parts = model.loss(tokens, k=k, mode=cfg.train_mode)
        if not np.isfinite(parts["ce"]):
            raise TrainingDiverged(f"non-finite cross-entropy at step {step}")
        grads_map = backward(loss)
        grads = [grads_map.get(p) for p in params]
        clip_gradients(grads, cfg.grad_clip)
        opt.step(grads, lr)

        if initial_ce is None:
            initial_ce = parts["ce"]
        bad_run = bad_run + 1 if parts["ce"] > 2.0 * initial_ce else 0
        if bad_run >= DIVERGENCE_WINDOW:
            raise TrainingDiverged(
                f"cross-entropy above 2x its initial value ({initial_ce:.4f}) for "
                f"{DIVERGENCE_WINDOW} consecutive steps, last {parts['ce']:.4f} at step {step}, lr {lr:.3g}")

        ppl = ""
        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            ppl = _exp(mean_ce(model, evals, k=k, mode=cfg.train_mode))
        row = {"step": step, "lr": lr, "ce": parts["ce"], "balance": parts["balance"],
               "ppl_eval": ppl, "k_active": k}
        rows.append(row)
        if log is not None:
            log(row)
    return TrainResult(model, cfg.steps, data_rng.get_state(), rows)


def _exp(ce: float) -> float:
    return math.exp(ce) if ce < 700.0 else math.inf


def format_metrics(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r["step"], repr(float(r["lr"])), repr(float(r["ce"])), repr(float(r["balance"])),
                    "" if r["ppl_eval"] == "" else repr(float(r["ppl_eval"])), r["k_active"]])
    return buf.getvalue()
