"""Chunk and minibatch composition.

Feed-forward models see frame-shuffled minibatches. Recurrent models see whole
sequences, sorted by ascending length so that each padded batch wastes as
little as possible, laid out time-major with a validity mask.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import UtteranceRecord

log = logging.getLogger(__name__)

FRAME_MAJOR = "frame_major"
TIME_MAJOR = "time_major"

_CHUNK_STREAM = 0x4348554E
_FRAME_STREAM = 0x46524D45


@dataclass
class Chunk:
    records: list[UtteranceRecord]
    chunk_index: int
    epoch: int


@dataclass
class Minibatch:
    features: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    mask: np.ndarray
    layout: str
    lengths: np.ndarray | None = None
    utt_ids: tuple[str, ...] = ()
    # (utt_id, frame) for each valid position, in batch order.
    origin: list[tuple[str, int]] = field(default_factory=list)
    truncated_frames: int = 0

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, _CHUNK_STREAM])).permutation(n)


def split_chunks(records: Sequence[UtteranceRecord], n_chunks: int, epoch: int, seed: int) -> list[Chunk]:
    """Seeded per-epoch shuffle, then near-equal partition (sizes differ by at most one)."""
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    if n_chunks > len(records):
        raise ValueError(f"n_chunks={n_chunks} exceeds the {len(records)} available utterances")
    order = epoch_permutation(len(records), seed, epoch)
    parts = np.array_split(order, n_chunks)
    return [Chunk([records[i] for i in part], k, epoch) for k, part in enumerate(parts)]


def frame_minibatches(chunk: Chunk, batch_size: int, seed: int) -> list[Minibatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    recs = chunk.records
    if not recs:
        return []
    feats = {n: np.concatenate([r.features[n] for r in recs]) for n in recs[0].features}
    labs = {n: np.concatenate([r.labels[n] for r in recs]) for n in recs[0].labels}
    origin = [(r.utt_id, t) for r in recs for t in range(r.frames)]
    total = len(origin)
    rng = np.random.default_rng(np.random.SeedSequence([seed, chunk.epoch, chunk.chunk_index, _FRAME_STREAM]))
    order = rng.permutation(total)
    batches = []
    for start in range(0, total, batch_size):
        idx = order[start:start + batch_size]
        batches.append(Minibatch(
            features={n: f[idx] for n, f in feats.items()},
            labels={n: l[idx] for n, l in labs.items()},
            mask=np.ones(len(idx)),
            layout=FRAME_MAJOR,
            origin=[origin[i] for i in idx],
        ))
    return batches


def sorted_for_batching(records: Sequence[UtteranceRecord], max_len: int | None):
    def length(r):
        return r.frames if max_len is None else min(r.frames, max_len)
    return sorted(records, key=lambda r: (length(r), r.utt_id))


def pad_sequences(records: Sequence[UtteranceRecord], max_len: int | None = None) -> Minibatch:
    """Time-major zero-padded batch over ``records`` in the given order."""
    lengths = np.array([r.frames if max_len is None else min(r.frames, max_len) for r in records])
    t_len, batch = int(lengths.max()), len(records)
    first = records[0]
    feats = {n: np.zeros((t_len, batch, m.shape[1])) for n, m in first.features.items()}
    labs = {n: np.zeros((t_len, batch), dtype=np.int64) for n in first.labels}
    mask = np.zeros((t_len, batch))
    origin = []
    truncated = 0
    for b, (rec, n) in enumerate(zip(records, lengths)):
        for name, mat in rec.features.items():
            feats[name][:n, b] = mat[:n]
        for name, lab in rec.labels.items():
            labs[name][:n, b] = lab[:n]
        mask[:n, b] = 1.0
        truncated += rec.frames - n
    for t in range(t_len):
        for b, rec in enumerate(records):
            if t < lengths[b]:
                origin.append((rec.utt_id, t))
    return Minibatch(feats, labs, mask, TIME_MAJOR, lengths=lengths,
                     utt_ids=tuple(r.utt_id for r in records), origin=origin,
                     truncated_frames=int(truncated))


def _group_sizes(n: int, batch_size: int, k: int) -> list[int]:
    full, r = divmod(n, batch_size)
    sizes = [batch_size] * full
    if r:
        sizes.insert(k, r)
    return sizes


def ascending_groups(lengths: Sequence[int], batch_size: int) -> list[int]:
    """Group sizes for ascending ``lengths``; the one short group goes where it pads least.

    Keeping the order ascending and only moving the short group gives the minimum
    padding over every ordering of the same lengths.
    """
    n = len(lengths)
    full, r = divmod(n, batch_size)
    if r == 0:
        return [batch_size] * full
    best_cost, best_k = None, 0
    for k in range(full + 1):
        cost, start = 0, 0
        for size in _group_sizes(n, batch_size, k):
            cost += lengths[start + size - 1] * size
            start += size
        if best_cost is None or cost < best_cost:
            best_cost, best_k = cost, k
    return _group_sizes(n, batch_size, best_k)


def sorted_padding_count(lengths: Sequence[int], batch_size: int) -> int:
    """Padded positions under the grouping used by :func:`sequence_minibatches`."""
    ordered = sorted(lengths)
    total, start = 0, 0
    for size in ascending_groups(ordered, batch_size):
        group = ordered[start:start + size]
        total += group[-1] * size - sum(group)
        start += size
    return total


def sequence_minibatches(chunk: Chunk, batch_size: int, max_len: int | None) -> list[Minibatch]:
    """Truncate to ``max_len``, sort by (length, utt_id), group and pad each batch."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if max_len is not None and max_len < 1:
        raise ValueError("max_len must be >= 1")
    ordered = sorted_for_batching(chunk.records, max_len)
    lengths = [r.frames if max_len is None else min(r.frames, max_len) for r in ordered]
    batches, start = [], 0
    for size in ascending_groups(lengths, batch_size):
        batches.append(pad_sequences(ordered[start:start + size], max_len))
        start += size
    dropped = sum(b.truncated_frames for b in batches)
    if dropped:
        log.debug("epoch %d chunk %d: truncated %d frames beyond max_len=%s",
                  chunk.epoch, chunk.chunk_index, dropped, max_len)
    return batches


def padding_count(lengths: Sequence[int], batch_size: int) -> int:
    """Padded positions when ``lengths`` are grouped in the given order."""
    total = 0
    for i in range(0, len(lengths), batch_size):
        group = lengths[i:i + batch_size]
        total += max(group) * len(group) - sum(group)
    return total


def sequence_length_schedule(epoch: int, start_len: int = 100, cap: int = 5000) -> int:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    # Avoid building huge powers for late epochs.
    if epoch >= 64:
        return cap
    return min(start_len * 2 ** epoch, cap)
