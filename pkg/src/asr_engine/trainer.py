"""Epoch/chunk/minibatch training loop, chunk-level checkpoints and posterior export.

Randomness is never carried as generator state. Every random draw is keyed by
``SeedSequence([seed, epoch, chunk, batch, stream])``, so a checkpoint only
needs the cursor to continue bit-identically.
"""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import checkpoint
from .archive_io import load_alignment_ark, load_matrix_ark, write_matrix_archive
from .batcher import frame_minibatches, pad_sequences, sequence_length_schedule, sequence_minibatches, split_chunks
from .config import DatasetSection, ExperimentConfig
from .dsl import ComputationGraph, EvalResult, build_architectures, evaluate
from .errors import CheckpointError, DataError, NumericError
from .features import JoinReport, NormalizationStats, UtteranceRecord, join_streams, prepare_records, stream_stats
from .nn.autograd import Tape
from .nn.models import Architecture
from .optim import OptimizerState, lr_schedule, rmsprop_step

log = logging.getLogger(__name__)

_DROPOUT_STREAM = 0x44524F50
STATE_FILE = "state.ckpt"
FINAL_FILE = "final.ckpt"


# Data.

@dataclass
class DataBundle:
    train: list[tuple[DatasetSection, list[UtteranceRecord]]]
    valid: list[tuple[DatasetSection, list[UtteranceRecord]]]
    forward: list[tuple[DatasetSection, list[UtteranceRecord]]]
    stats: dict[str, NormalizationStats]
    stream_dims: dict[str, int]
    join_reports: dict[str, JoinReport] = field(default_factory=dict)

    def train_records(self) -> list[UtteranceRecord]:
        return [r for _, recs in self.train for r in recs]


def _raw_records(cfg: ExperimentConfig, d: DatasetSection, cache: dict):
    feats, labels = {}, {}
    for s in d.feature_streams:
        path = cfg.resolve(s.path)
        if path not in cache:
            cache[path] = load_matrix_ark(path)
        feats[s.name] = cache[path]
    for s in d.label_streams:
        path = cfg.resolve(s.path)
        key = (path, s.num_states)
        if key not in cache:
            cache[key] = load_alignment_ark(path, s.num_states)
        labels[s.name] = cache[key]
    return join_streams(feats, labels)


def load_data(cfg: ExperimentConfig, roles: Iterable[str] = ("train", "valid", "forward"),
              cache: dict | None = None) -> DataBundle:
    """Load, join, normalize (training-split statistics) and splice every requested dataset."""
    cache = {} if cache is None else cache
    roles = set(roles) | {"train"}
    raw, reports = {}, {}
    for d in cfg.datasets:
        if d.role in roles:
            recs, report = _raw_records(cfg, d, cache)
            raw[d.section] = recs
            reports[d.name] = report
            if report.dropped:
                log.warning("dataset %s: dropped %d utterances (%s)", d.name, len(report.dropped),
                            ", ".join(f"{u}: {why}" for u, why in list(report.dropped.items())[:5]))
    train_recs = [r for d in cfg.datasets if d.role == "train" for r in raw[d.section]]
    reference = cfg.datasets_with_role("train")[0]
    stats = {s.name: stream_stats(train_recs, s.name) for s in reference.feature_streams if s.normalize}
    contexts = {s.name: (s.cw_left, s.cw_right) for s in reference.feature_streams}
    dims = {s.name: train_recs[0].features[s.name].shape[1] * (s.cw_left + 1 + s.cw_right)
            for s in reference.feature_streams}
    bundle = DataBundle([], [], [], stats, dims, reports)
    for d in cfg.datasets:
        if d.section not in raw:
            continue
        own_ctx = {s.name: (s.cw_left, s.cw_right) for s in d.feature_streams}
        if own_ctx != contexts:
            raise DataError(f"dataset {d.name}: context windows must match the training streams")
        getattr(bundle, d.role).append((d, prepare_records(raw[d.section], contexts, stats)))
    return bundle


# State.

@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    train_error: float
    valid_loss: float
    valid_error: float
    lr: dict[str, float]
    wall_time: float | None = None

    def to_line(self) -> str:
        lrs = "\t".join(f"lr_{k}={v:.6g}" for k, v in sorted(self.lr.items()))
        wall = "nan" if self.wall_time is None else f"{self.wall_time:.2f}"
        return (f"ep={self.epoch:03d}\ttr_loss={self.train_loss:.6f}\ttr_err={self.train_error:.6f}\t"
                f"va_loss={self.valid_loss:.6f}\tva_err={self.valid_error:.6f}\t{lrs}\ttime={wall}")

    def record(self) -> dict:
        out = asdict(self)
        del out["wall_time"]  # kept out of checkpoints so they stay byte-reproducible
        return out


@dataclass
class TrainingState:
    epoch: int
    next_chunk: int
    arch_states: dict[str, dict[str, np.ndarray]]
    optimizers: dict[str, OptimizerState]
    seed: int
    prev_valid: float | None = None
    best_valid: float | None = None
    reports: list[EpochReport] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    # Running sums for the epoch in progress: loss*frames, frames, errors, scored frames.
    epoch_sums: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    finished: bool = False

    def lrs(self) -> dict[str, float]:
        return {k: o.lr for k, o in self.optimizers.items()}

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for arch, arrays in self.arch_states.items():
            for k, v in arrays.items():
                out[f"arch/{arch}/{k}"] = v
        for arch, opt in self.optimizers.items():
            for k, v in opt.v.items():
                out[f"opt/{arch}/{k}"] = v
        return out

    def meta(self) -> dict:
        return {
            "epoch": self.epoch, "next_chunk": self.next_chunk, "seed": self.seed,
            "prev_valid": self.prev_valid, "best_valid": self.best_valid,
            "optimizers": {k: {"lr": o.lr, "alpha": o.alpha, "eps": o.eps} for k, o in self.optimizers.items()},
            "reports": [r.record() for r in self.reports],
            "events": list(self.events), "epoch_sums": list(self.epoch_sums), "finished": self.finished,
        }

    @classmethod
    def from_parts(cls, tensors: Mapping[str, np.ndarray], meta: dict) -> "TrainingState":
        arch_states: dict[str, dict] = {}
        opt_v: dict[str, dict] = {}
        for key, arr in tensors.items():
            kind, arch, rest = key.split("/", 2)
            (arch_states if kind == "arch" else opt_v).setdefault(arch, {})[rest] = arr
        optimizers = {k: OptimizerState(o["lr"], o["alpha"], o["eps"], opt_v.get(k, {}))
                      for k, o in meta["optimizers"].items()}
        return cls(meta["epoch"], meta["next_chunk"], arch_states, optimizers, meta["seed"],
                   meta["prev_valid"], meta["best_valid"], [EpochReport(**r) for r in meta["reports"]],
                   list(meta["events"]), list(meta["epoch_sums"]), meta["finished"])


def save_state(path, state: TrainingState) -> Path:
    return checkpoint.save(path, state.tensors(), state.meta())


def recover(path) -> TrainingState:
    """Load a checkpoint written by :func:`save_state`; corrupt files fail before any state is built."""
    tensors, meta = checkpoint.load(path)
    try:
        return TrainingState.from_parts(tensors, meta)
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} is malformed: {exc}") from None


def initial_state(cfg: ExperimentConfig, registry: Mapping[str, Architecture], seed: int) -> TrainingState:
    optimizers = {}
    for name in registry:
        h = cfg.architecture(name).hyper
        optimizers[name] = OptimizerState(h["arch_lr"], h["opt_alpha"], h["opt_eps"])
    return TrainingState(0, 0, {n: dict(a.state_arrays()) for n, a in registry.items()}, optimizers, seed)


def _load_registry(registry, state: TrainingState):
    for name, arch in registry.items():
        arch.load_state_arrays(state.arch_states[name])


def _snapshot_registry(registry, state: TrainingState):
    state.arch_states = {n: {k: np.array(v) for k, v in a.state_arrays().items()} for n, a in registry.items()}


# Losses, priors and metrics.

def multitask_terms(graph: ComputationGraph, result: EvalResult) -> dict[str, float]:
    """Value of every cost_nll term; the DSL combination of them is the loss."""
    return {t: result.costs[t] for t in graph.cost_nodes()}


def multitask_loss(graph: ComputationGraph, result: EvalResult) -> float:
    if graph.loss_node is None:
        raise ValueError("graph has no loss node")
    return result.costs[graph.loss_node]


@dataclass(frozen=True)
class PriorVector:
    probs: np.ndarray
    smoothing: float
    counts: np.ndarray

    @property
    def log_probs(self) -> np.ndarray:
        return np.log(self.probs)


def estimate_priors(label_seqs: Iterable[np.ndarray], num_states: int, smoothing: float = 1.0) -> PriorVector:
    counts = np.zeros(num_states, dtype=np.int64)
    total = 0
    for seq in label_seqs:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size and (seq.min() < 0 or seq.max() >= num_states):
            raise DataError(f"label outside [0, {num_states}) while counting priors")
        counts += np.bincount(seq, minlength=num_states)
        total += seq.size
    if total == 0:
        raise DataError("cannot estimate priors from an empty label stream")
    probs = (counts + smoothing) / (total + smoothing * num_states)
    return PriorVector(probs, smoothing, counts)


def _primary_metric(graph: ComputationGraph) -> str | None:
    return graph.metric_nodes[0] if graph.metric_nodes else None


def _frame_error_counts(graph, result: EvalResult, labels, mask) -> tuple[int, int]:
    metric = _primary_metric(graph)
    if metric is not None:
        return result.counts[metric]
    if graph.output_node is None or graph.output_label is None:
        return 0, 0
    scores = result.values[graph.output_node].data
    wrong = (scores.argmax(-1) != labels[graph.output_label]) & (mask > 0)
    return int(wrong.sum()), int((mask > 0).sum())


# Training.

def epoch_chunks(bundle: DataBundle, epoch: int, seed: int):
    chunks = []
    for i, (d, recs) in enumerate(bundle.train):
        for c in split_chunks(recs, d.n_chunks, epoch, seed + 7919 * i):
            chunks.append(c)
    for k, c in enumerate(chunks):
        c.chunk_index = k
    return chunks


def _train_batches(cfg: ExperimentConfig, graph: ComputationGraph, chunk, epoch: int, seed: int):
    if graph.recurrent:
        max_len = cfg.exp.max_seq_len
        if cfg.exp.increase_seq_length:
            max_len = sequence_length_schedule(epoch, cfg.exp.start_seq_len, cfg.exp.max_seq_len)
        return sequence_minibatches(chunk, cfg.exp.batch_size_train, max_len)
    return frame_minibatches(chunk, cfg.exp.batch_size_train, seed)


def _apply_step(registry, state: TrainingState, cfg: ExperimentConfig, graph: ComputationGraph):
    for name, arch in registry.items():
        wd = cfg.architecture(name).hyper["weight_decay"]
        params = {k: p.data for k, p in arch.params.items()}
        grads = {}
        for k, p in arch.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads[k] = g + wd * p.data if wd else g
        try:
            new = rmsprop_step(params, grads, state.optimizers[name])
        except NumericError as exc:
            raise NumericError(f"architecture {name}: {exc}") from None
        for k, p in arch.params.items():
            p.data = new[k]
        arch.check_constraints()


def validate(cfg: ExperimentConfig, graph: ComputationGraph, registry, bundle: DataBundle,
             datasets=None) -> tuple[float, float]:
    """Frame-weighted loss and frame error over the validation sets; state is left untouched."""
    datasets = bundle.valid if datasets is None else datasets
    loss_sum = frames = errors = scored = 0.0
    for d, recs in datasets:
        for chunk in split_chunks(recs, d.n_chunks, 0, 0):
            for mb in sequence_minibatches(chunk, cfg.exp.batch_size_valid, None):
                res = evaluate(graph, mb.features, mb.labels, mb.mask, registry, "eval")
                n = mb.n_valid
                if graph.loss_node is not None:
                    loss_sum += multitask_loss(graph, res) * n
                frames += n
                wrong, total = _frame_error_counts(graph, res, mb.labels, mb.mask)
                errors += wrong
                scored += total
    return loss_sum / max(frames, 1), errors / max(scored, 1)


def _halve(state: TrainingState, cfg: ExperimentConfig, new_metric: float, epoch: int):
    for name, opt in state.optimizers.items():
        h = cfg.architecture(name).hyper
        if state.prev_valid is None or state.prev_valid <= 0:
            continue  # nothing left to improve relative to
        new_lr = lr_schedule(state.prev_valid, new_metric, opt.lr,
                             h["arch_improvement_threshold"], h["arch_halving_factor"])
        if new_lr != opt.lr:
            event = f"epoch {epoch}: lr {name} {opt.lr:.6g} -> {new_lr:.6g}"
            log.info(event)
            state.events.append(event)
            opt.lr = new_lr


def _reconcile_results(res_path: Path, reports: Sequence[EpochReport]):
    """Make ``res.res`` hold exactly one line per checkpointed epoch.

    A kill between the post-validation checkpoint and the append leaves the
    file one line short; lines are never duplicated on resume.
    """
    lines = res_path.read_text().splitlines() if res_path.exists() else []
    if len(lines) == len(reports):
        return
    kept = lines[:len(reports)]
    kept += [r.to_line() for r in reports[len(kept):]]
    tmp = res_path.with_name(res_path.name + ".tmp")
    tmp.write_text("".join(ln + "\n" for ln in kept))
    os.replace(tmp, res_path)


def train(cfg: ExperimentConfig, graph: ComputationGraph, bundle: DataBundle, exp_dir=None,
          seed: int | None = None, resume: bool = False, stop_after_chunks: int | None = None,
          registry: dict | None = None) -> tuple[TrainingState, list[EpochReport]]:
    """Run (or continue) training. Checkpoints after every chunk and after every validation.

    ``stop_after_chunks`` returns early once that many chunks have been processed
    in this call, which is how interruption is simulated in tests.
    """
    seed = cfg.exp.seed if seed is None else seed
    ckpt_dir = Path(exp_dir) / "checkpoints" if exp_dir is not None else None
    registry = build_architectures(graph, cfg, seed) if registry is None else registry
    state_path = ckpt_dir / STATE_FILE if ckpt_dir is not None else None
    if resume and state_path is not None and state_path.exists():
        state = recover(state_path)
        if state.seed != seed:
            raise CheckpointError(f"checkpoint was written with seed {state.seed}, not {seed}")
        _load_registry(registry, state)
        log.info("resumed at epoch %d chunk %d", state.epoch, state.next_chunk)
    else:
        state = initial_state(cfg, registry, seed)

    def save():
        if state_path is not None:
            _snapshot_registry(registry, state)
            save_state(state_path, state)

    processed = 0
    started = time.perf_counter()
    res_path = Path(exp_dir) / "res.res" if exp_dir is not None else None
    if res_path is not None:
        _reconcile_results(res_path, state.reports)
    while state.epoch < cfg.exp.n_epochs:
        epoch = state.epoch
        chunks = epoch_chunks(bundle, epoch, seed)
        for chunk in chunks[state.next_chunk:]:
            if stop_after_chunks is not None and processed >= stop_after_chunks:
                return state, state.reports
            for b, mb in enumerate(_train_batches(cfg, graph, chunk, epoch, seed)):
                rng = np.random.default_rng(np.random.SeedSequence(
                    [seed, epoch, chunk.chunk_index, b, _DROPOUT_STREAM]))
                for arch in registry.values():
                    arch.zero_grad()
                with Tape() as tape:
                    res = evaluate(graph, mb.features, mb.labels, mb.mask, registry, "train", rng)
                    tape.backward(res.loss)
                _apply_step(registry, state, cfg, graph)
                n = mb.n_valid
                wrong, total = _frame_error_counts(graph, res, mb.labels, mb.mask)
                sums = state.epoch_sums
                sums[0] += multitask_loss(graph, res) * n
                sums[1] += n
                sums[2] += wrong
                sums[3] += total
            state.next_chunk = chunk.chunk_index + 1
            processed += 1
            save()
        valid_loss, valid_err = validate(cfg, graph, registry, bundle)
        sums = state.epoch_sums
        _halve(state, cfg, valid_err, epoch)
        report = EpochReport(epoch, sums[0] / max(sums[1], 1), sums[2] / max(sums[3], 1),
                             valid_loss, valid_err, state.lrs(), time.perf_counter() - started)
        log.info(report.to_line())
        state.reports.append(report)
        state.prev_valid = valid_err
        state.best_valid = valid_err if state.best_valid is None else min(state.best_valid, valid_err)
        state.epoch += 1
        state.next_chunk = 0
        state.epoch_sums = [0.0, 0.0, 0.0, 0.0]
        state.finished = state.epoch >= cfg.exp.n_epochs
        save()
        if res_path is not None:
            with open(res_path, "a") as fh:
                fh.write(report.to_line() + "\n")
        started = time.perf_counter()
    _snapshot_registry(registry, state)
    if ckpt_dir is not None:
        save_state(ckpt_dir / FINAL_FILE, state)
    return state, state.reports


# Forward phase.

def forward_posteriors(graph: ComputationGraph, registry, records: Sequence[UtteranceRecord]) -> dict[str, np.ndarray]:
    """Per-utterance log-posteriors from the graph's output node, in eval mode."""
    if graph.output_node is None:
        raise ValueError("graph has no output node; set forward_out in [model]")
    out = {}
    for rec in records:
        mb = pad_sequences([rec])
        res = evaluate(graph, mb.features, {}, mb.mask, registry, "eval")
        out[rec.utt_id] = res.values[graph.output_node].data[:, 0, :]
    return out


def prior_normalize(log_posteriors: Mapping[str, np.ndarray], priors: PriorVector) -> dict[str, np.ndarray]:
    logp = priors.log_probs
    out = {}
    for utt, lp in log_posteriors.items():
        if lp.shape[-1] != logp.shape[0]:
            raise DataError(f"{utt}: output dim {lp.shape[-1]} != prior length {logp.shape[0]}")
        out[utt] = lp - logp
    return out


def forward_export(registry, graph: ComputationGraph, dataset: tuple[DatasetSection, list[UtteranceRecord]],
                   priors: PriorVector, out_dir, decoding: Mapping[str, str] = ()) -> Path:
    """Write prior-normalized log-likelihoods as a matrix archive plus a JSON sidecar."""
    section, records = dataset
    scores = prior_normalize(forward_posteriors(graph, registry, records), priors)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ark = out_dir / f"{section.name}_{graph.output_node}.ark"
    ark.write_bytes(write_matrix_archive({u: m.astype(np.float32) for u, m in scores.items()}))
    meta = {
        "dataset": section.name, "output_node": graph.output_node, "label_stream": graph.output_label,
        "n_utterances": len(scores), "priors": priors.probs.tolist(), "prior_smoothing": priors.smoothing,
        "decoding": dict(decoding),
    }
    ark.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return ark


def training_priors(graph: ComputationGraph, bundle: DataBundle, num_states: int) -> PriorVector:
    if graph.output_label is None:
        raise ValueError("no label stream is tied to the output node; priors cannot be estimated")
    return estimate_priors((r.labels[graph.output_label] for r in bundle.train_records()), num_states)
