"""Train the desk-scale trend grid and record the result next to the code fingerprint.

Writes results/ablation_desk.csv and results/ablation_desk.json. The
acceptance test reuses the record only while the package sources and the
grid config are unchanged, and reruns the grid otherwise.

    python3 scripts/run_ablation.py [--out results]
"""

import argparse
import json
import sys
import time
from pathlib import Path

from mossnet.cli import config_hash
from mossnet.lm import ablation


def run(out: Path, log=print) -> dict:
    base = ablation.desk_ablation_base()
    t0 = time.monotonic()
    corpus = ablation.desk_corpus()
    rows = ablation.run_ablation(base, corpus, log=log)
    elapsed = time.monotonic() - t0
    checks = ablation.trend_checks(rows)
    out.mkdir(parents=True, exist_ok=True)
    csv_text = ablation.format_rows(rows)
    (out / "ablation_desk.csv").write_text(csv_text)
    record = {"config_hash": config_hash(base), "source_fingerprint": ablation.source_fingerprint(),
              "corpus_bytes": int(len(corpus.train) + len(corpus.eval)), "elapsed_s": elapsed,
              "checks": checks, "rows": csv_text}
    (out / "ablation_desk.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "results"))
    args = ap.parse_args(argv)
    record = run(Path(args.out), log=lambda s: print(s, flush=True))
    sys.stdout.write(record["rows"])
    for name, ok in record["checks"].items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    print(f"elapsed {record['elapsed_s']:.0f}s")
    return 0 if all(record["checks"].values()) else 2


if __name__ == "__main__":
    sys.exit(main())
