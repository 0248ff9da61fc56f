"""Command-line entry point.

    asr-engine --cfg exp.cfg --phase train [--set section.key=value ...] [--seed N]
    asr-engine --make-corpus DIR [--n-utts 200 --n-states 8 --dims mfcc=50]

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import dsl, trainer
from .config import ExperimentConfig, load_config, to_ini, validate_against_data
from .errors import ConfigError, EngineError
from .optim import format_trial_log, random_search, trial_seed
from .synthetic import make_synthetic_corpus
from .trainer import FINAL_FILE, STATE_FILE

log = logging.getLogger("asr_engine")

PHASES = ("check", "train", "forward", "search")


@dataclass
class PhaseRequest:
    cfg_path: str
    phase: str
    overrides: list[str] = field(default_factory=list)
    seed: int | None = None
    dump_graph: bool = False


def _attach_log_file(exp_dir: Path):
    exp_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(exp_dir / "log.txt")
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    return handler


def _load(req: PhaseRequest) -> ExperimentConfig:
    overrides = list(req.overrides)
    if req.seed is not None:
        overrides.append(f"exp.seed={req.seed}")
    return load_config(req.cfg_path, overrides)


def _graph(cfg, bundle, mode="train"):
    return dsl.parse_and_build(cfg, bundle.stream_dims, mode)


def phase_check(cfg: ExperimentConfig, req: PhaseRequest, out=None) -> int:
    report = validate_against_data(cfg)
    for s in report.streams:
        print(f"{s.dataset}\t{s.stream}\t{s.kind}\tdim={s.dim}\tutts={s.n_utts}", file=out)
    dims = {}
    for name in set(report.dims()):
        stream = cfg.feature_stream(name)
        dims[name] = report.dims()[name] * (stream.cw_left + 1 + stream.cw_right)
    graph = dsl.build_graph(dsl.parse_model(cfg.model_text), cfg, dims)
    if req.dump_graph:
        out.write(dsl.dump_graph(graph))
    for f in report.findings:
        print(f"finding: {f}", file=out)
    if report.findings:
        print(f"{len(report.findings)} finding(s)", file=out)
        return 2
    print("check: ok", file=out)
    return 0


def phase_train(cfg: ExperimentConfig, req: PhaseRequest, out=None) -> int:
    exp_dir = cfg.exp_dir()
    (exp_dir / "conf.cfg").write_text(to_ini(cfg))
    bundle = trainer.load_data(cfg, roles=("train", "valid"))
    graph = _graph(cfg, bundle)
    if req.dump_graph:
        out.write(dsl.dump_graph(graph))
    state, reports = trainer.train(cfg, graph, bundle, exp_dir, resume=True)
    for r in reports:
        print(r.to_line(), file=out)
    return 0


def _trained_registry(cfg, graph, exp_dir: Path):
    ckpt = exp_dir / "checkpoints" / FINAL_FILE
    if not ckpt.exists():
        ckpt = exp_dir / "checkpoints" / STATE_FILE
    if not ckpt.exists():
        raise ConfigError(f"no checkpoint under {exp_dir}; run the train phase first")
    state = trainer.recover(ckpt)
    registry = dsl.build_architectures(graph, cfg, state.seed)
    for name, arch in registry.items():
        arch.load_state_arrays(state.arch_states[name])
    return registry


def phase_forward(cfg: ExperimentConfig, req: PhaseRequest, out=None) -> int:
    if not cfg.datasets_with_role("forward"):
        raise ConfigError("no dataset with role=forward")
    exp_dir = cfg.exp_dir()
    bundle = trainer.load_data(cfg, roles=("train", "forward"))
    graph = _graph(cfg, bundle, mode="eval")
    if req.dump_graph:
        out.write(dsl.dump_graph(graph))
    registry = _trained_registry(cfg, graph, exp_dir)
    priors = trainer.training_priors(graph, bundle, graph.info[graph.output_label].dim)
    for dataset in bundle.forward:
        ark = trainer.forward_export(registry, graph, dataset, priors, exp_dir / "exports", cfg.decoding)
        print(f"wrote {ark} ({len(dataset[1])} utterances)", file=out)
    return 0


def phase_search(cfg: ExperimentConfig, req: PhaseRequest, out=None) -> int:
    if cfg.search is None:
        raise ConfigError("the search phase needs a [search] section")
    exp_dir = cfg.exp_dir()
    cache: dict = {}

    def objective(params, trial_id):
        overrides = list(req.overrides) + [f"{k}={v}" for k, v in params.items()]
        seed = int(trial_seed(cfg.exp.seed, trial_id).generate_state(1)[0])
        overrides.append(f"exp.seed={seed}")
        trial_cfg = load_config(req.cfg_path, overrides)
        bundle = trainer.load_data(trial_cfg, roles=("train", "valid"), cache=cache)
        graph = _graph(trial_cfg, bundle)
        trial_dir = exp_dir / "search" / f"trial_{trial_id:03d}"
        _, reports = trainer.train(trial_cfg, graph, bundle, trial_dir, resume=True)
        return reports[-1].valid_error

    trials = random_search(cfg.search.space(), cfg.search.n_trials, cfg.exp.seed, objective)
    text = format_trial_log(trials)
    (exp_dir / "search.log").write_text(text)
    out.write(text)
    return 0 if any(t.error is None for t in trials) else 3


_HANDLERS = {"check": phase_check, "train": phase_train, "forward": phase_forward, "search": phase_search}


def run(req: PhaseRequest, out=None) -> int:
    """Execute one phase; returns the process exit status."""
    handler = None
    previous_level = log.level
    log.setLevel(logging.INFO)
    try:
        if req.phase not in PHASES:
            raise ConfigError(f"unknown phase {req.phase!r}; expected one of {', '.join(PHASES)}")
        cfg = _load(req)
        if req.phase != "check":
            handler = _attach_log_file(cfg.exp_dir())
        return _HANDLERS[req.phase](cfg, req, out if out is not None else sys.stdout)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        log.error("%s", exc)
        return exc.exit_code
    finally:
        log.setLevel(previous_level)
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def _parse_dims(text: str) -> dict[str, int]:
    dims = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        dims[name.strip()] = int(value)
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asr-engine", description="Config-driven hybrid acoustic model trainer.")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--cfg", help="experiment INI file")
    mode.add_argument("--make-corpus", metavar="DIR", help="write the synthetic corpus to DIR and exit")
    p.add_argument("--phase", choices=PHASES, default="train")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-graph", action="store_true", help="print the model graph with inferred dims")
    p.add_argument("-v", "--verbose", action="store_true")
    corpus = p.add_argument_group("synthetic corpus")
    corpus.add_argument("--n-utts", type=int, default=200)
    corpus.add_argument("--n-states", type=int, default=8)
    corpus.add_argument("--dims", default="mfcc=50", help="comma-separated stream=dim pairs")
    corpus.add_argument("--noise", type=float, default=1.8)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    # The log file always gets INFO; the console only with -v.
    console = logging.StreamHandler()
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(console)
    if args.make_corpus:
        logging.getLogger().removeHandler(console)
        try:
            manifest = make_synthetic_corpus(args.make_corpus, args.n_utts, _parse_dims(args.dims),
                                             args.n_states, args.seed or 0, args.noise)
        except (EngineError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return getattr(exc, "exit_code", 1)
        print(f"wrote corpus to {manifest.out_dir}")
        return 0
    try:
        return run(PhaseRequest(args.cfg, args.phase, args.overrides, args.seed, args.dump_graph))
    finally:
        logging.getLogger().removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())
