"""Acceptance criteria, one PASS/FAIL line each.

Runs under pytest (the lines are printed even with output capture on) or
directly with ``python3 tests/test_acceptance.py``. Criterion 5 trains a
five-variant grid for 2000 steps each; a recorded run in
``results/ablation_desk.json`` is reused when its source fingerprint and
config hash match the current tree, and the grid is retrained otherwise
(set ``MOSSNET_RERUN_ABLATION=1`` to force a rerun).
"""

import contextlib
import io
import json
import math
import os
import re
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import random_block  # noqa: E402
from mossnet import cli, profiler  # noqa: E402
from mossnet.block import BlockConfig, BlockState, block_forward, block_step  # noqa: E402
from mossnet.lm import ablation, checkpoint  # noqa: E402
from mossnet.lm.config import desk_config, published_config  # noqa: E402
from mossnet.lm.data import Corpus, encode, sample_batch, synthetic_corpus  # noqa: E402
from mossnet.lm.model import MossNetLM  # noqa: E402
from mossnet.lm.train import perplexity, train  # noqa: E402
from mossnet.moe import load_balance_loss, topk_schedule  # noqa: E402
from mossnet.numerics import Rng, check_param_gradients, relative_error  # noqa: E402
from mossnet.ssm_kernel import scan, sequential_scan  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
RESULTS = ROOT / "results"
ALPHA = 0.001


def _cli(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    return code, out.getvalue()


# -- criteria -----------------------------------------------------------------

def c1_equivalence():
    t0 = time.monotonic()
    code, out = _cli(["equiv-check", "--seeds", 1000, "--cross-seeds", 200])
    elapsed = time.monotonic() - t0
    lines = [ln for ln in out.splitlines() if ln.startswith("seed=")]
    diffs = [float(re.search(r"max_diff=(\S+)", ln).group(1)) for ln in lines]
    sizes = {int(re.search(r"M_e=(\d+)", ln).group(1)) for ln in lines}
    differs = int(re.search(r"differs on (\d+)/200", out).group(1))
    ok = (code == 0 and len(lines) == 1000 and max(diffs) <= 1e-8 and elapsed < 60
          and differs / 200 >= 0.95)
    return ok, (f"max diff {max(diffs):.2e} over 1000 instances (M_e {sorted(sizes)}), {elapsed:.1f}s; "
                f"cross-term ablation differs on {differs}/200")


def c2_duality():
    worst_scan = 0.0
    lengths = (1, 2, 3, 17, 256, 1024)
    for case in range(200):
        r = Rng(1000 + case)
        T = lengths[case % len(lengths)]
        a, b = r.uniform((T, 2, 3), 0.2, 1.0), r.normal((T, 2, 3))
        s0 = Rng(case).normal((2, 3)) if case % 2 else None
        worst_scan = max(worst_scan, float(np.max(np.abs(scan(a, b, s0) - sequential_scan(a, b, s0)))))
    worst_block = 0.0
    for seed in range(50):
        r = Rng(100 + seed)
        E = int(r.integers(1, 6))
        cfg = BlockConfig(d_model=int(r.integers(2, 12)), d_inner=int(r.integers(2, 20)),
                          d_state=int(r.integers(1, 7)), n_experts=E, k=int(r.integers(1, E + 1)),
                          dt_rank=int(r.integers(1, 4)), conv_width=int(r.integers(1, 5)),
                          renormalize=seed % 5 == 1)
        p = random_block(cfg, seed)
        T = int(r.integers(1, 14))
        x = r.normal((T, cfg.d_model))
        ref = block_forward(x, p, mode="scan").data
        state = BlockState.zeros(cfg)
        steps = []
        for t in range(T):
            y, state = block_step(x[t], state, p)
            steps.append(y.data)
        worst_block = max(worst_block, float(np.max(np.abs(ref - np.array(steps)))))
    ok = worst_scan <= 1e-10 and worst_block <= 1e-9
    return ok, f"scan vs sequential {worst_scan:.1e} (200 cases); block scan vs streaming {worst_block:.1e} (50 configs)"


def c3_gradients():
    cfg = desk_config(d_model=32, n_layers=3, d_state=4, n_experts=4, k=2, attn_layer_indices=(1,),
                      mlp_layer_indices=(1, 2), tie_embeddings=False, context_length=8, alpha=0.01)
    model = MossNetLM.build(cfg.model_config(), Rng(21))
    for name, t in model.params.items():
        if name.endswith("router"):
            t.data *= 50     # keep every finite-difference step on one side of the routing boundaries
        elif t.data.ndim >= 2:
            t.data *= 4      # gradients well above finite-difference noise
    tokens = sample_batch(encode(synthetic_corpus(4000, 3)), 2, 8, Rng(4))
    classes = {}
    for name in model.params:
        classes.setdefault(re.sub(r"\.\d+", "", name), []).append(name)
    r = Rng(22)
    coords = {}
    for members in classes.values():
        for _ in range(12):
            name = members[int(r.integers(0, len(members)))]
            shape = model.params[name].shape
            coords.setdefault(name, []).append(tuple(int(r.integers(0, s)) for s in shape))
    res = check_param_gradients(lambda: model.loss(tokens)[0], model.params, coords, h=1e-5)
    errs = np.array([relative_error(a, n, floor=1e-6) for _, _, a, n in res])
    frac = float((errs <= 1e-4).mean())
    return frac >= 0.99, (f"{(errs <= 1e-4).sum()}/{len(errs)} coordinates within 1e-4 across "
                          f"{len(classes)} parameter classes (worst {errs.max():.1e})")


def c4_parameter_counts():
    table = {"mossnet": (19.7, 9.9), "wo_mha": (21.4, 10.3), "wo_mlp_moe": (19.1, 9.8),
             "top1_8e": (19.7, 8.3), "top4_8e": (19.7, 13.2), "top2_4e": (13.1, 9.9),
             "top2_16e": (32.7, 9.9)}
    worst = 0.0
    parts = []
    for row in ablation.count_rows(published_config()):
        tot, act = table[row.variant]
        worst = max(worst, abs(row.total_params / 1e6 / tot - 1), abs(row.active_params / 1e6 / act - 1))
        parts.append(f"{row.variant} {row.total_params / 1e6:.2f}/{row.active_params / 1e6:.2f}")
    return worst <= 0.03, f"worst relative deviation {worst:.2%}; " + ", ".join(parts)


def _ablation_record():
    base = ablation.desk_ablation_base()
    want = (cli.config_hash(base), ablation.source_fingerprint())
    path = RESULTS / "ablation_desk.json"
    if path.is_file() and not os.environ.get("MOSSNET_RERUN_ABLATION"):
        record = json.loads(path.read_text())
        if (record["config_hash"], record["source_fingerprint"]) == want:
            return record, "recorded run for this source tree"
    sys.path.insert(0, str(ROOT / "scripts"))
    import run_ablation
    return run_ablation.run(RESULTS, log=lambda s: None), "fresh run"


def c5_ablation_trend():
    record, origin = _ablation_record()
    rows = ablation.parse_rows(record["rows"])
    ppl = {r.variant: r.ppl_eval for r in rows}
    checks = ablation.trend_checks(rows)
    ok = all(checks.values()) and record["elapsed_s"] < 1800 and record["corpus_bytes"] >= 1 << 20
    order = ", ".join(f"{v} {ppl[v]:.4f}" for v in ablation.TREND_VARIANTS)
    return ok, (f"{order}; " + "; ".join(f"{k}: {'ok' if v else 'violated'}" for k, v in checks.items())
                + f"; {record['elapsed_s'] / 60:.1f} min ({origin})")


def c6_balance_loss():
    uniform = float(load_balance_loss(np.full((8, 8), 1 / 8), np.arange(8)[:, None], ALPHA).data)
    collapse_probs = np.zeros((10, 4))
    collapse_probs[:, 0] = 1.0
    collapse = float(load_balance_loss(collapse_probs, np.zeros((10, 1), dtype=int), ALPHA).data)
    r = Rng(16)
    worst = math.inf
    for _ in range(100):
        n = int(r.integers(2, 9))
        counts = r.integers(0, 20, size=n)
        counts[0] += 1
        rows = np.repeat(np.arange(n), counts)
        ratio = float(load_balance_loss(np.eye(n)[rows], rows[:, None], ALPHA).data) / ALPHA
        worst = min(worst, ratio)
    ok = abs(uniform - ALPHA) <= 1e-15 and abs(collapse - 4 * ALPHA) <= 1e-15 and worst >= 1 - 1e-12
    return ok, f"uniform {uniform:.6g}, collapse (N=4) {collapse:.6g}, min loss/alpha {worst:.6f} over 100"


def c7_schedule(tmp: Path):
    sched_ok = all(topk_schedule(s) == (3 if s % 1000 < 900 else 2) for s in range(3000))
    cfg = desk_config(d_model=16, n_layers=2, d_state=4, n_experts=4, k=2, attn_layer_indices=(1,),
                      context_length=16, batch_size=2, steps=1000, eval_every=500, eval_windows=4,
                      dynamic_topk=True)
    corpus = Corpus.from_bytes(synthetic_corpus(40000, 1), min_eval=1024)
    result = train(cfg, corpus)
    modes = sorted({r["k_active"] for r in result.metrics})
    path = tmp / "dynamic.moss"
    checkpoint.save(checkpoint.Checkpoint.from_model(result.model, cfg, result.step, result.rng_state), path)
    model = checkpoint.load(path).model()
    text = synthetic_corpus(300, 2)
    ppl = {k: perplexity(model, text, k=k) for k in (2, 3)}
    ok = sched_ok and modes == [2, 3] and all(math.isfinite(v) for v in ppl.values())
    return ok, (f"schedule {'exact' if sched_ok else 'WRONG'} on [0, 3000); training used k in {modes}; "
                f"PPL k=2 {ppl[2]:.3f}, k=3 {ppl[3]:.3f}")


def c8_efficiency():
    records = []
    for tag, model in profiler.default_models(max_context=4096).items():
        records += profiler.sweep(model, tag, profiler.DEFAULT_CONTEXTS, reps=3, measure_peak=False)
    fits = profiler.memory_fits(records)
    moss_bytes = {r.state_bytes for r in records if r.model_tag == "mossnet"}
    csv_text, _ = profiler.report(records)
    round_trip = profiler.read_csv(csv_text) == records
    ok = len(moss_bytes) == 1 and fits["attention"].r2 > 0.99 and round_trip
    return ok, (f"mossnet state bytes {sorted(moss_bytes)} over 256-4096; attention slope "
                f"{fits['attention'].slope:.0f} B/token, R^2 {fits['attention'].r2:.6f}; CSV round trip {round_trip}")


def c9_determinism(tmp: Path):
    (tmp / "corpus.txt").write_bytes(synthetic_corpus(30000, 0))
    (tmp / "tiny.cfg").write_text("d_model = 16\nn_layers = 2\nd_state = 4\nattn_layer_indices = 1\n"
                                  "context_length = 16\nbatch_size = 4\nsteps = 20\neval_every = 10\n"
                                  "eval_windows = 4\n")
    corpus, cfgf = tmp / "corpus.txt", tmp / "tiny.cfg"

    def commands(run):
        d = tmp / run
        ck = d / "train" / "checkpoint.moss"
        return [
            (["train", "--config", cfgf, "--corpus", corpus, "--out", d / "train", "--quiet"],
             [d / "train" / "metrics.csv", ck]),
            (["eval", "--checkpoint", ck, "--k", "1,2", "--corpus", corpus, "--out", d / "eval"],
             [d / "eval" / "eval.csv"]),
            (["generate", "--checkpoint", ck, "--prompt", "the ", "--n", 16, "--temperature", 0.8,
              "--out", d / "gen"], [d / "gen" / "generated.bin"]),
            (["equiv-check", "--seeds", 100, "--cross-seeds", 20, "--out", d / "eq"], [d / "eq" / "equiv_check.txt"]),
            (["ablate", "--config", cfgf, "--corpus", corpus, "--variants", "mossnet,top1_8e",
              "--set", "steps=3", "--out", d / "abl"], [d / "abl" / "ablation.csv"]),
            (["ablate", "--counts-only", "--out", d / "cnt"], [d / "cnt" / "ablation.csv"]),
            (["profile", "--contexts", "32,64", "--max-context", 64, "--reps", 3, "--no-peak",
              "--out", d / "prof" / "trace.csv"], [d / "prof" / "trace.csv"]),
        ]

    identical, total, bad = 0, 0, []
    for (argv_a, files_a), (argv_b, files_b) in zip(commands("a"), commands("b")):
        codes = (_cli(argv_a)[0], _cli(argv_b)[0])
        for fa, fb in zip(files_a, files_b):
            total += 1
            if argv_a[0] == "profile":
                # wall-clock throughput cannot repeat; every other column must
                strip = lambda recs: [(r.model_tag, r.phase, r.context_len, r.batch, r.state_bytes)
                                      for r in recs]
                same = strip(profiler.read_csv(fa)) == strip(profiler.read_csv(fb))
            else:
                same = fa.read_bytes() == fb.read_bytes()
            if same and codes == (0, 0):
                identical += 1
            else:
                bad.append(fa.name)
    return identical == total, (f"{identical}/{total} outputs identical across two runs of train, eval, "
                                f"generate, equiv-check, ablate, profile (profile: all columns except "
                                f"tokens_per_sec){'; differ: ' + ', '.join(bad) if bad else ''}")


CRITERIA = [
    ("1", "mixture SSM equals weighted linear multi-head attention", c1_equivalence),
    ("2", "scan/recurrence duality", c2_duality),
    ("3", "gradient soundness", c3_gradients),
    ("4", "parameter accounting at published dimensions", c4_parameter_counts),
    ("5", "desk ablation trend", c5_ablation_trend),
    ("6", "load-balance loss", c6_balance_loss),
    ("7", "cyclic top-k schedule", c7_schedule),
    ("8", "efficiency shape", c8_efficiency),
    ("9", "determinism", c9_determinism),
]


def _evaluate(fn, tmp: Path):
    args = (tmp,) if fn.__code__.co_argcount else ()
    ok, detail = fn(*args)
    return bool(ok), detail


@pytest.mark.parametrize("num,title,fn", CRITERIA, ids=[c[0] for c in CRITERIA])
def test_criterion(num, title, fn, tmp_path, capsys):
    ok, detail = _evaluate(fn, tmp_path)
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {num} ({title}): {detail}")
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    failed = 0
    for num, title, fn in CRITERIA:
        with tempfile.TemporaryDirectory() as d:
            ok, detail = _evaluate(fn, Path(d))
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} criterion {num} ({title}): {detail}", flush=True)
    sys.exit(1 if failed else 0)
