"""Command-line entry point: train, eval, generate, equiv-check, ablate, profile.

Exit codes: 0 success, 1 usage or validation error, 2 a scientific check failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import sys
import time
import typing
from pathlib import Path

from . import attention_oracle, profiler
from .errors import ConfigError, ContractError, SingularityError, TrainingDiverged
from .lm import ablation, checkpoint
from .lm.config import ABLATION_VARIANTS, FIELD_DOCS, RunConfig, published_config
from .lm.data import Corpus, eval_windows
from .lm.train import format_metrics, generate, mean_ce, perplexity, train

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2
NON_SEMANTIC = ("out_dir",)


class UsageError(Exception):
    pass


# -- config files -------------------------------------------------------------

def _field_types() -> dict:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(RunConfig)}


def _base_type(tp):
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    optional = type(None) in typing.get_args(tp)
    return (args[0] if args else tp), optional


def _parse_value(raw: str, tp):
    base, optional = _base_type(tp)
    if raw.lower() in ("none", "") and optional and base is not tuple:
        return None
    if base is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if base is int:
        return int(raw)
    if base is float:
        return float(raw)
    if base is tuple:
        if raw.lower() == "none" and optional:
            return None
        body = raw.strip("[]() ")
        return tuple(int(v) for v in body.split(",") if v.strip())
    return raw


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(i) for i in v) if v else "[]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str, source: str = "<config>", **overrides) -> RunConfig:
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError([f"{source}:{lineno}: expected 'key = value', got {body!r}"])
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in types:
            raise ConfigError([f"{source}:{lineno}: unknown key {key!r}"])
        try:
            values[key] = _parse_value(raw, types[key])
        except ValueError as exc:
            raise ConfigError([f"{source}:{lineno}: bad value for {key!r}: {exc}"]) from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()


def parse_config(path, **overrides) -> RunConfig:
    """Read a flat ``key = value`` file (``#`` comments); overrides win over the file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(p), **overrides)


def emit_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        lines.append(f"# {FIELD_DOCS.get(f.name, '')}")
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    canon = {f.name: _format_value(getattr(cfg, f.name)) for f in dataclasses.fields(RunConfig)
             if f.name not in NON_SEMANTIC}
    return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig | None, artifacts: list) -> Path:
    entries = []
    for name in sorted(artifacts):
        data = (out_dir / name).read_bytes()
        entries.append({"path": name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
    manifest = {"command": command, "config_hash": None if cfg is None else config_hash(cfg),
                "artifacts": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- subcommands --------------------------------------------------------------

def _load_run_config(args) -> RunConfig:
    """Config file (or defaults), then ``--set`` lines, then ``--corpus``/``--out``."""
    text, source = "", "<defaults>"
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file {args.config} not found")
        text, source = Path(args.config).read_text(), args.config
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
    lines = text.splitlines() + list(args.set or [])
    return parse_config_text("\n".join(lines), source, corpus_path=args.corpus, out_dir=args.out)


def _corpus(cfg: RunConfig) -> Corpus:
    if cfg.corpus_path is None:
        raise UsageError("corpus_path is required (config key or --corpus)")
    p = Path(cfg.corpus_path)
    if not p.is_file():
        raise UsageError(f"corpus {p} not found")
    return Corpus.from_file(p)


def _progress(row: dict) -> None:
    if row["ppl_eval"] != "" or row["step"] % 100 == 0:
        ppl = f" ppl {row['ppl_eval']:.3f}" if row["ppl_eval"] != "" else ""
        print(f"step {row['step']} lr {row['lr']:.3g} ce {row['ce']:.4f}{ppl}", file=sys.stderr)


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    corpus = _corpus(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, corpus, log=None if args.quiet else _progress)
    (out / "metrics.csv").write_text(format_metrics(result.metrics))
    checkpoint.save(checkpoint.Checkpoint.from_model(result.model, cfg, result.step, result.rng_state),
                    out / "checkpoint.moss")
    (out / "config.cfg").write_text(emit_config(cfg))
    write_manifest(out, "train", cfg, ["metrics.csv", "checkpoint.moss", "config.cfg"])
    last = [r for r in result.metrics if r["ppl_eval"] != ""]
    print(f"trained {cfg.steps} steps, eval ppl {last[-1]['ppl_eval']:.4f}; outputs in {out}")
    return EXIT_OK


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return checkpoint.load(path)


def cmd_eval(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    model = ck.model()
    ks = [int(v) for v in args.k.split(",")] if args.k else [ck.config.k]
    for k in ks:
        if not 1 <= k <= ck.config.n_experts:
            raise ConfigError([f"k ≤ N_experts violated: k={k}, n_experts={ck.config.n_experts}"])
    if args.text is not None:
        results = {k: perplexity(model, args.text, k=k) for k in ks}
    else:
        corpus_path = args.corpus or ck.config.corpus_path
        if corpus_path is None or not Path(corpus_path).is_file():
            raise UsageError("eval needs --text or a readable --corpus")
        corpus = Corpus.from_file(corpus_path)
        windows = eval_windows(corpus.eval, ck.config.context_length, ck.config.eval_windows)
        results = {k: math.exp(mean_ce(model, windows, k=k)) for k in ks}
    lines = ["k,ppl"] + [f"{k},{results[k]!r}" for k in ks]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(text)
        write_manifest(out, "eval", ck.config, ["eval.csv"])
    return EXIT_OK


def cmd_generate(args) -> int:
    ck = _load_checkpoint(args.checkpoint)
    model = ck.model()
    data = generate(model, args.prompt, args.n, temperature=args.temperature, seed=args.seed, k=args.k)
    sys.stdout.write(data.decode("utf-8", errors="replace") + "\n")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "generated.bin").write_bytes(data)
        write_manifest(out, "generate", ck.config, ["generated.bin"])
    return EXIT_OK


def cmd_equiv_check(args) -> int:
    t0 = time.monotonic()
    lines, n_fail = [], 0
    for seed in range(args.start, args.start + args.seeds):
        inst = attention_oracle.random_instance(seed)
        try:
            diff = attention_oracle.verify_equivalence(inst)
        except SingularityError as exc:
            diff = float("inf")
            print(f"seed {seed}: {exc}", file=sys.stderr)
        ok = diff <= attention_oracle.PASS_TOL
        n_fail += not ok
        lines.append(f"seed={seed} T={inst.T} M_e={inst.n_experts} max_diff={diff:.3e} {'PASS' if ok else 'FAIL'}")
    differs = 0
    for seed in range(args.start, args.start + args.cross_seeds):
        inst = attention_oracle.random_instance(seed, n_experts=2)
        differs += attention_oracle.verify_equivalence(inst, include_cross=False) > 1e-3
    frac = differs / args.cross_seeds if args.cross_seeds else 1.0
    cross_ok = frac >= 0.95
    summary = (f"# {args.seeds - n_fail}/{args.seeds} PASS; cross-term ablation differs on "
               f"{differs}/{args.cross_seeds} two-expert instances ({'PASS' if cross_ok else 'FAIL'}); "
               f"{time.monotonic() - t0:.1f}s")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    print(summary)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "equiv_check.txt").write_text(text)
        write_manifest(out, "equiv-check", None, ["equiv_check.txt"])
    return EXIT_OK if n_fail == 0 and cross_ok else EXIT_CHECK


def cmd_ablate(args) -> int:
    if args.published_dims:
        base = published_config()
    else:
        base = _load_run_config(args) if args.config else ablation.desk_ablation_base()
        over = {k: v for k, v in (("corpus_path", args.corpus), ("out_dir", args.out)) if v is not None}
        base = base.replace(**over).validate() if over else base
    names = args.variants.split(",") if args.variants else None
    if args.counts_only or args.published_dims:
        rows = ablation.count_rows(base, names)
        status = EXIT_OK
    else:
        unknown = set(names or ()) - set(ABLATION_VARIANTS)
        if unknown:
            raise UsageError(f"unknown variants {sorted(unknown)}")
        rows = ablation.run_ablation(base, _corpus(base), names or ablation.TREND_VARIANTS,
                                     log=lambda s: print(s, file=sys.stderr))
        status = EXIT_OK
        if not names:
            checks = ablation.trend_checks(rows)
            for name, ok in checks.items():
                print(f"# {name}: {'PASS' if ok else 'FAIL'}")
            status = EXIT_OK if all(checks.values()) else EXIT_CHECK
    text = ablation.format_rows(rows)
    sys.stdout.write(text)
    out = Path(args.out or base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(text)
    (out / "config.cfg").write_text(emit_config(base))
    write_manifest(out, "ablate", base, ["ablation.csv", "config.cfg"])
    return status


def cmd_profile(args) -> int:
    contexts = [int(v) for v in args.contexts.split(",")]
    models = profiler.default_models(max_context=args.max_context, seed=args.seed)
    records = []
    for tag, model in models.items():
        records += profiler.sweep(model, tag, contexts, reps=args.reps, batch=args.batch, seed=args.seed,
                                  measure_peak=not args.no_peak)
    csv_text, summary = profiler.report(records)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(csv_text)
    sys.stdout.write(summary)
    write_manifest(out_path.parent, "profile", None, [out_path.name])
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mossnet", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_args(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--corpus", help="byte corpus path (overrides corpus_path)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("train", help="train a model")
    run_args(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--text")
    p.add_argument("--k", help="comma-separated top-k modes to evaluate")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="continue a prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("equiv-check", help="mixture SSM vs. weighted linear attention on random instances")
    p.add_argument("--seeds", type=int, default=1000)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--cross-seeds", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_equiv_check)

    p = sub.add_parser("ablate", help="architecture ablation grid")
    run_args(p)
    p.add_argument("--variants", help="comma-separated variant names")
    p.add_argument("--counts-only", action="store_true", help="parameter counts without training")
    p.add_argument("--published-dims", action="store_true", help="count the variants at the published dimensions")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("profile", help="memory and throughput versus context length")
    p.add_argument("--contexts", default=",".join(str(c) for c in profiler.DEFAULT_CONTEXTS))
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-context", type=int, default=4096)
    p.add_argument("--no-peak", action="store_true", help="skip the tracemalloc peak measurement")
    p.add_argument("--out", default="trace.csv")
    p.set_defaults(fn=cmd_profile)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError, ContractError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
