"""Write the synthetic corpus used by the example configs and the acceptance tests.

    python3 scripts/make_synthetic_corpus.py corpus
    python3 scripts/make_synthetic_corpus.py corpus_multi --dims mfcc=39,fbank=40,fmllr=40
"""
from __future__ import annotations

import argparse
import sys

from asr_engine.synthetic import make_synthetic_corpus


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out_dir")
    p.add_argument("--n-utts", type=int, default=200)
    p.add_argument("--n-states", type=int, default=8)
    p.add_argument("--dims", default="mfcc=50", help="comma-separated stream=dim pairs")
    p.add_argument("--noise", type=float, default=1.8)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    dims = {name: int(dim) for name, dim in (part.split("=") for part in args.dims.split(","))}
    manifest = make_synthetic_corpus(args.out_dir, args.n_utts, dims, args.n_states, args.seed, args.noise)
    sizes = ", ".join(f"{k}={len(v)}" for k, v in manifest.splits.items())
    print(f"wrote {manifest.out_dir}: {sizes} utterances, {manifest.n_states} states")
    return 0


if __name__ == "__main__":
    sys.exit(main())
