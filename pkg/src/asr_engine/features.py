"""Context splicing, mean/variance normalization and multi-stream joining."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError

VAR_FLOOR = 1e-10


@dataclass
class UtteranceRecord:
    utt_id: str
    features: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    frames: int

    def __post_init__(self):
        for name, mat in self.features.items():
            if mat.shape[0] != self.frames:
                raise DataError(f"{self.utt_id}: feature stream {name} has {mat.shape[0]} frames, expected {self.frames}")
        for name, lab in self.labels.items():
            if len(lab) != self.frames:
                raise DataError(f"{self.utt_id}: label stream {name} has {len(lab)} frames, expected {self.frames}")


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    var: np.ndarray
    frame_count: int

    @property
    def dim(self):
        return self.mean.shape[0]


def splice_context(mat: np.ndarray, left: int, right: int) -> np.ndarray:
    """Row t becomes rows t-left .. t+right concatenated, edges replicated."""
    mat = np.asarray(mat)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise DataError("splice_context needs a matrix with at least one frame")
    if left < 0 or right < 0:
        raise ValueError("context sizes must be non-negative")
    if left == 0 and right == 0:
        return mat.copy()
    frames = mat.shape[0]
    idx = np.arange(frames)[:, None] + np.arange(-left, right + 1)[None, :]
    idx = np.clip(idx, 0, frames - 1)
    return mat[idx].reshape(frames, -1)


def accumulate_stats(matrices: Iterable[np.ndarray]) -> NormalizationStats:
    """Exact mean and population variance over all frames, variance floored.

    Per-matrix moments are merged pairwise (Chan et al.), which is associative
    and avoids the cancellation of the sum-of-squares formula.
    """
    count, mean, m2 = 0, None, None
    for mat in matrices:
        m = np.asarray(mat, dtype=np.float64)
        n_b = m.shape[0]
        if n_b == 0:
            continue
        mean_b = m.mean(axis=0)
        m2_b = ((m - mean_b) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = n_b, mean_b, m2_b
            continue
        if mean_b.shape != mean.shape:
            raise DataError(f"dimension mismatch while accumulating stats: {mean_b.shape[0]} vs {mean.shape[0]}")
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta * delta * (count * n_b / total)
        count = total
    if not count:
        raise DataError("cannot compute normalization statistics of an empty stream")
    return NormalizationStats(mean, np.maximum(m2 / count, VAR_FLOOR), count)


def stream_stats(records: Iterable[UtteranceRecord], stream: str) -> NormalizationStats:
    return accumulate_stats(r.features[stream] for r in records)


def normalize(mat: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != stats.dim:
        raise DataError(f"normalize: matrix dim {mat.shape[-1]} != stats dim {stats.dim}")
    return (mat - stats.mean) / np.sqrt(stats.var)


@dataclass
class JoinReport:
    kept: list[str] = field(default_factory=list)
    dropped: dict[str, str] = field(default_factory=dict)


def join_streams(features: Mapping[str, Mapping[str, np.ndarray]],
                 labels: Mapping[str, Mapping[str, np.ndarray]]) -> tuple[list[UtteranceRecord], JoinReport]:
    """Pair every stream per utterance. Records come back sorted by utt_id.

    Utterances missing from any stream, or whose streams disagree on frame
    count, are dropped and listed in the report with the reason.
    """
    streams = [*features.values(), *labels.values()]
    if not streams:
        raise DataError("join_streams needs at least one stream")
    all_ids = set().union(*(s.keys() for s in streams))
    report = JoinReport()
    records = []
    for utt in sorted(all_ids):
        missing = [n for n, s in [*features.items(), *labels.items()] if utt not in s]
        if missing:
            report.dropped[utt] = "missing from " + ",".join(sorted(missing))
            continue
        feats = {n: np.asarray(s[utt]) for n, s in sorted(features.items())}
        labs = {n: np.asarray(getattr(s[utt], "labels", s[utt])) for n, s in sorted(labels.items())}
        counts = {m.shape[0] for m in feats.values()} | {len(l) for l in labs.values()}
        if len(counts) != 1:
            report.dropped[utt] = "length mismatch"
            continue
        records.append(UtteranceRecord(utt, feats, labs, counts.pop()))
        report.kept.append(utt)
    if not records:
        raise DataError("no utterance is present in every stream with consistent lengths")
    return records, report


def prepare_records(records: list[UtteranceRecord], contexts: Mapping[str, tuple[int, int]],
                    stats: Mapping[str, NormalizationStats]) -> list[UtteranceRecord]:
    """Normalize (streams with stats) then splice each feature stream.

    Normalization is per-dimension affine, so normalizing before splicing
    gives the same matrix as splicing first with tiled statistics.
    """
    out = []
    for rec in records:
        feats = {}
        for name, mat in rec.features.items():
            m = normalize(mat, stats[name]) if name in stats else np.asarray(mat, dtype=np.float64)
            left, right = contexts.get(name, (0, 0))
            feats[name] = splice_context(m, left, right)
        out.append(UtteranceRecord(rec.utt_id, feats, dict(rec.labels), rec.frames))
    return out
