"""Architecture ablations: parameter accounting and trained eval perplexity per variant."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import time
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig, ablation_variants, desk_config
from .data import Corpus, synthetic_corpus
from .model import count_parameters
from .train import train

ABLATION_HEADER = ("variant", "n_experts", "k", "total_params", "active_params", "ppl_eval")

# the five variants whose eval perplexities are compared for the trend check
TREND_VARIANTS = ("top1_8e", "mossnet", "top4_8e", "top2_4e", "top2_16e")


@dataclass
class AblationRow:
    variant: str
    n_experts: int
    k: int
    total_params: int
    active_params: int
    ppl_eval: float | None = None  # None when the variant was only counted


def desk_ablation_base(**changes) -> RunConfig:
    """Starting point of the desk trend grid.

    Mixture weights are renormalised over the selected experts here so that
    variants with different ``k / n_experts`` start from the same output
    scale; the library default keeps the full-softmax weights.
    """
    base = dict(d_model=64, n_layers=4, d_state=8, steps=2000, eval_every=2000, renormalize=True)
    base.update(changes)
    return desk_config(**base)


def desk_corpus(seed: int = 0) -> Corpus:
    """The 1 MiB synthetic byte corpus used for the desk grid."""
    return Corpus.from_bytes(synthetic_corpus(1 << 20, seed))


def source_fingerprint() -> str:
    """sha256 over the package's Python sources, to tie recorded results to the code."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def count_rows(base: RunConfig, names=None) -> list:
    variants = ablation_variants(base)
    rows = []
    for name in names or variants:
        cfg = variants[name]
        total, active = count_parameters(cfg)
        rows.append(AblationRow(name, cfg.n_experts, cfg.k, total, active))
    return rows


def run_ablation(base: RunConfig, corpus: Corpus, names=TREND_VARIANTS, log=None) -> list:
    """Train each named variant with the same seed, corpus and step budget."""
    variants = ablation_variants(base)
    rows = []
    for name in names:
        cfg = variants[name]
        t0 = time.monotonic()
        result = train(cfg, corpus)
        total, active = count_parameters(cfg)
        ppl = next(r["ppl_eval"] for r in reversed(result.metrics) if r["ppl_eval"] != "")
        rows.append(AblationRow(name, cfg.n_experts, cfg.k, total, active, float(ppl)))
        if log is not None:
            log(f"{name}: ppl_eval={ppl:.4f} ({time.monotonic() - t0:.1f}s)")
    return rows


def trend_checks(rows: list) -> dict:
    """The orderings expected from the reference ablation table."""
    ppl = {r.variant: r.ppl_eval for r in rows}
    return {
        "top4 <= top2 <= top1 (8 experts)": ppl["top4_8e"] <= ppl["mossnet"] <= ppl["top1_8e"],
        "16 experts <= 4 experts (top-2)": ppl["top2_16e"] <= ppl["top2_4e"],
    }


def format_rows(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in rows:
        w.writerow([r.variant, r.n_experts, r.k, r.total_params, r.active_params,
                    "" if r.ppl_eval is None else repr(r.ppl_eval)])
    return buf.getvalue()


def parse_rows(text: str) -> list:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        ppl = float(rec["ppl_eval"]) if rec["ppl_eval"] else None
        rows.append(AblationRow(rec["variant"], int(rec["n_experts"]), int(rec["k"]),
                                int(rec["total_params"]), int(rec["active_params"]), ppl))
    return rows


def is_finite_row(r: AblationRow) -> bool:
    return r.ppl_eval is not None and math.isfinite(r.ppl_eval)
