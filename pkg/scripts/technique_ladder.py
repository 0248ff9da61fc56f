"""LiGRU technique ladder on the synthetic corpus.

Trains a LiGRU baseline and variants that add one technique each (sequence
length schedule, recurrent dropout, batch norm, monophone regularization)
plus the full stack, over several seeds, and reports held-out frame error.

    python3 scripts/technique_ladder.py --out /tmp/ladder --seeds 0 1 2 3 4
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from asr_engine import dsl, trainer
from asr_engine.config import parse_config
from asr_engine.synthetic import CorpusManifest, config_text, make_synthetic_corpus

TECHNIQUES = ("schedule", "dropout", "batchnorm", "mono")
VARIANTS = {
    "baseline": (),
    "+schedule": ("schedule",),
    "+dropout": ("dropout",),
    "+batchnorm": ("batchnorm",),
    "+mono": ("mono",),
    "full": TECHNIQUES,
}


@dataclass
class LadderSettings:
    hidden: int = 48
    epochs: int = 10
    lr: float = 0.002
    batch: int = 8
    dropout: float = 0.2
    mono_weight: float = 0.5
    start_seq_len: int = 100


def variant_config(manifest: CorpusManifest, out_folder: str, techniques, seed: int,
                   s: LadderSettings) -> str:
    use = set(techniques)
    arch = f"""
[architecture1]
arch_name = ligru
arch_class = LiGRU
lay = {s.hidden}
drop = {s.dropout if 'dropout' in use else 0.0}
use_batchnorm = {'true' if 'batchnorm' in use else 'false'}
arch_lr = {s.lr}

[architecture2]
arch_name = head_cd
arch_class = MLP
dnn_lay = {manifest.n_states}
dnn_act = softmax
arch_lr = {s.lr}
"""
    model = ["h=compute(ligru,mfcc)", "out_cd=compute(head_cd,h)", "loss_cd=cost_nll(out_cd,lab_cd)"]
    if "mono" in use:
        arch += f"""
[architecture3]
arch_name = head_mono
arch_class = MLP
dnn_lay = {manifest.n_mono}
dnn_act = softmax
arch_lr = {s.lr}
"""
        model += ["out_mono=compute(head_mono,h)", "loss_mono=cost_nll(out_mono,lab_mono)",
                  f"loss_mono_w=mult_scalar({s.mono_weight},loss_mono)",
                  "loss=sum(loss_cd,loss_mono_w)"]
    model.append("err=cost_err(out_cd,lab_cd)")
    exp = {"batch_size_train": s.batch, "increase_seq_length": "true" if "schedule" in use else "false",
           "start_seq_len": s.start_seq_len}
    return config_text(manifest, out_folder, arch, "\n".join(model), n_epochs=s.epochs, seed=seed,
                       exp=exp, labels=("cd", "mono"))


def run_variant(manifest, techniques, seed, settings, cache=None):
    cfg = parse_config(variant_config(manifest, "unused", techniques, seed, settings))
    bundle = trainer.load_data(cfg, cache=cache)
    graph = dsl.parse_and_build(cfg, bundle.stream_dims)
    registry = dsl.build_architectures(graph, cfg, seed)
    trainer.train(cfg, graph, bundle, exp_dir=None, registry=registry)
    _, test_err = trainer.validate(cfg, graph, registry, bundle, datasets=bundle.forward)
    return test_err


def run_ladder(corpus_dir, seeds, settings: LadderSettings | None = None, variants=None, log=print):
    settings = settings or LadderSettings()
    corpus_dir = Path(corpus_dir)
    if not (corpus_dir / "manifest.json").exists():
        make_synthetic_corpus(corpus_dir, n_utts=200, dims={"mfcc": 50}, n_states=8, seed=0)
    manifest = CorpusManifest.load(corpus_dir)
    cache: dict = {}
    results = {}
    for name in variants or VARIANTS:
        errs = []
        for seed in seeds:
            start = time.perf_counter()
            errs.append(run_variant(manifest, VARIANTS[name], seed, settings, cache))
            log(f"{name:12s} seed={seed} test_err={errs[-1]:.4f} ({time.perf_counter() - start:.1f}s)")
        results[name] = errs
    return results


def summarize(results) -> str:
    base = float(np.mean(results["baseline"]))
    lines = [f"{'variant':12s} {'mean err':>9s} {'delta pp':>9s}"]
    for name, errs in results.items():
        mean = float(np.mean(errs))
        lines.append(f"{name:12s} {mean:9.4f} {100 * (mean - base):+9.2f}")
    return "\n".join(lines)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="ladder_out")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int, default=LadderSettings.epochs)
    p.add_argument("--hidden", type=int, default=LadderSettings.hidden)
    p.add_argument("--lr", type=float, default=LadderSettings.lr)
    args = p.parse_args(argv)
    settings = LadderSettings(hidden=args.hidden, epochs=args.epochs, lr=args.lr)
    out = Path(args.out)
    results = run_ladder(out / "corpus", args.seeds, settings)
    print(summarize(results))
    (out / "ladder.json").write_text(json.dumps(results, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
