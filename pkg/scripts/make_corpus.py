"""Write the seeded synthetic byte corpus used by the desk runs.

    python3 scripts/make_corpus.py corpus.txt [--bytes 1048576] [--seed 0]
"""

import argparse
from pathlib import Path

from mossnet.lm.data import synthetic_corpus


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path")
    ap.add_argument("--bytes", type=int, default=1 << 20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    Path(args.path).write_bytes(synthetic_corpus(args.bytes, args.seed))
    print(f"wrote {args.bytes} bytes to {args.path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
