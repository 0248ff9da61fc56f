"""Desk-scale synthetic corpus with a known, learnable structure.

Each utterance is a run of label segments (3 to 15 frames each). A frame is
its state's class mean plus isotropic Gaussian noise, independently per
feature stream. Monophone labels are ``cd // 2``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .archive_io import AlignmentSeq, save_alignment_ark, save_matrix_ark
from .errors import DataError

SPLITS = ("train", "valid", "test")
MONO_RATIO = 2


def mono_map(n_states: int) -> np.ndarray:
    return np.arange(n_states) // MONO_RATIO


@dataclass
class CorpusManifest:
    out_dir: str
    n_states: int
    n_mono: int
    dims: dict[str, int]
    seed: int
    noise: float
    splits: dict[str, list[str]]
    files: dict[str, dict[str, str]]

    def path(self, split: str, stream: str) -> Path:
        return Path(self.out_dir) / self.files[split][stream]

    @classmethod
    def load(cls, out_dir) -> "CorpusManifest":
        data = json.loads((Path(out_dir) / "manifest.json").read_text())
        data["out_dir"] = str(out_dir)
        return cls(**data)


def _segments(rng, n_frames, n_states):
    labels = np.empty(n_frames, dtype=np.int64)
    t, prev = 0, -1
    while t < n_frames:
        seg = int(rng.integers(3, 16))
        state = int(rng.integers(n_states - 1)) if prev >= 0 else int(rng.integers(n_states))
        if prev >= 0 and state >= prev:
            state += 1  # consecutive segments always change state
        labels[t:t + seg] = state
        t += seg
        prev = state
    return labels


def generate_utterances(n_utts: int, dims: Mapping[str, int], n_states: int, seed: int,
                        noise: float = 1.8, min_len: int = 20, max_len: int = 200):
    """In-memory corpus: (feature maps per stream, cd labels, class means)."""
    if n_states < 2:
        raise ValueError("n_states must be >= 2")
    if n_utts < len(SPLITS):
        raise ValueError(f"need at least {len(SPLITS)} utterances")
    ss = np.random.SeedSequence(seed)
    mean_ss, utt_ss = ss.spawn(2)
    mean_rng = np.random.default_rng(mean_ss)
    means = {name: mean_rng.standard_normal((n_states, d)) for name, d in dims.items()}
    rng = np.random.default_rng(utt_ss)
    feats = {name: {} for name in dims}
    labels = {}
    for i in range(n_utts):
        utt = f"utt{i:05d}"
        n = int(rng.integers(min_len, max_len + 1))
        lab = _segments(rng, n, n_states)
        labels[utt] = lab
        for name, d in dims.items():
            feats[name][utt] = (means[name][lab] + noise * rng.standard_normal((n, d))).astype(np.float32)
    return feats, labels, means


def split_ids(ids, fractions=(0.7, 0.15, 0.15)):
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    n_train = min(max(n_train, 1), n - 2)
    n_valid = min(max(n_valid, 1), n - n_train - 1)
    return {"train": ids[:n_train], "valid": ids[n_train:n_train + n_valid],
            "test": ids[n_train + n_valid:]}


def make_synthetic_corpus(out_dir, n_utts: int = 200, dims: Mapping[str, int] | None = None,
                          n_states: int = 8, seed: int = 0, noise: float = 1.8) -> CorpusManifest:
    """Write feature, cd-label and mono-label archives per split plus ``manifest.json``."""
    dims = dict(dims or {"mfcc": 50})
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create corpus directory {out}: {exc.strerror}") from None
    feats, labels, _ = generate_utterances(n_utts, dims, n_states, seed, noise)
    splits = split_ids(sorted(labels))
    mono = mono_map(n_states)
    files = {}
    for split, ids in splits.items():
        entry = {}
        for name in dims:
            entry[name] = f"{split}_{name}.ark"
            save_matrix_ark(out / entry[name], {u: feats[name][u] for u in ids})
        entry["cd"] = f"{split}_cd.ark"
        entry["mono"] = f"{split}_mono.ark"
        save_alignment_ark(out / entry["cd"], {u: AlignmentSeq(labels[u], n_states) for u in ids})
        save_alignment_ark(out / entry["mono"],
                           {u: AlignmentSeq(mono[labels[u]], int(mono.max()) + 1) for u in ids})
        files[split] = entry
    manifest = CorpusManifest(str(out), n_states, int(mono.max()) + 1, dims, seed, noise,
                              {k: list(v) for k, v in splits.items()}, files)
    record = asdict(manifest)
    del record["out_dir"]
    (out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return manifest


def nearest_mean_error(train_feats, train_labels, test_feats, test_labels, n_states) -> float:
    """Frame error of a nearest-class-mean classifier fit on the training split."""
    x = np.concatenate(list(train_feats))
    y = np.concatenate(list(train_labels))
    means = np.stack([x[y == c].mean(axis=0) for c in range(n_states)])
    xt = np.concatenate(list(test_feats))
    yt = np.concatenate(list(test_labels))
    d = ((xt[:, None, :] - means[None]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) != yt).mean())


def config_text(manifest: CorpusManifest, out_folder: str, architectures: str, model: str,
                n_epochs: int = 2, seed: int = 0, n_chunks: int = 1, context: tuple[int, int] = (0, 0),
                exp: Mapping[str, object] | None = None, labels=("cd", "mono")) -> str:
    """INI text for an experiment on a synthetic corpus (train, valid, and test as forward)."""
    left, right = context
    lines = ["[Exp]", f"out_folder = {out_folder}", f"n_epochs = {n_epochs}", f"seed = {seed}"]
    lines += [f"{k} = {v}" for k, v in (exp or {}).items()]
    states = {"cd": manifest.n_states, "mono": manifest.n_mono}
    for split, role in (("train", "train"), ("valid", "valid"), ("test", "forward")):
        lines += ["", f"[dataset_{split}]", f"data_name = {split}", f"role = {role}",
                  f"n_chunks = {n_chunks if role == 'train' else 1}", "features ="]
        for name in manifest.dims:
            lines.append(f"    {name} path={manifest.path(split, name)} cw_left={left} cw_right={right}")
        lines.append("labels =")
        for lab in labels:
            lines.append(f"    lab_{lab} path={manifest.path(split, lab)} num_states={states[lab]}")
    lines += ["", architectures.strip(), "", "[model]", "model ="]
    lines += [f"    {ln.strip()}" for ln in model.strip().splitlines()]
    lines += ["", "[decoding]", "beam = 13.0", ""]
    return "\n".join(lines)
