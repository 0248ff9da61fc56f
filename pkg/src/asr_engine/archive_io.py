"""Binary Kaldi-style archives: float matrices, int32 vectors and script indices.

Record layouts (little-endian throughout)::

    matrix:  <key> 0x20 0x00 'B' 'F' 'M' 0x20 0x04 <int32 rows> 0x04 <int32 cols> <rows*cols float32>
    ivector: <key> 0x20 0x00 'B' 0x04 <int32 len> (0x04 <int32 value>) * len

Script index lines are ``<key> <path>:<offset>`` where the offset points at the
``\\0B`` marker that follows the key, as in Kaldi ``.scp`` files.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Union

import numpy as np

from .errors import ArchiveError

BINARY_MARKER = b"\x00B"
FLOAT_MATRIX_TOKEN = b"FM "
INT_SIZE_BYTE = 4

Buffer = Union[bytes, bytearray, memoryview]


@dataclass(frozen=True)
class AlignmentSeq:
    labels: np.ndarray
    num_states: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int32)
        if labels.ndim != 1 or labels.size < 1:
            raise ArchiveError("alignment must be a non-empty 1-d sequence")
        if labels.min() < 0:
            raise ArchiveError("alignment contains a negative label")
        if labels.max() >= self.num_states:
            raise ArchiveError(
                f"label {int(labels.max())} out of range for {self.num_states} states")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, AlignmentSeq):
            return NotImplemented
        return self.num_states == other.num_states and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True)
class ScriptEntry:
    utt_id: str
    path: str
    offset: int


@dataclass
class ScriptIndex:
    entries: list[ScriptEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[ScriptEntry]:
        return iter(self.entries)

    def lookup(self, utt_id: str) -> ScriptEntry:
        for entry in self.entries:
            if entry.utt_id == utt_id:
                return entry
        raise KeyError(utt_id)

    def to_text(self) -> str:
        return "".join(f"{e.utt_id} {e.path}:{e.offset}\n" for e in self.entries)

    @classmethod
    def from_text(cls, text: str) -> "ScriptIndex":
        entries = []
        seen = set()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                utt_id, location = line.split(None, 1)
                path, offset = location.strip().rsplit(":", 1)
                entry = ScriptEntry(utt_id, path, int(offset))
            except ValueError:
                raise ArchiveError(f"malformed script line {lineno}: {line!r}") from None
            if utt_id in seen:
                raise ArchiveError(f"duplicate key {utt_id!r} in script index")
            seen.add(utt_id)
            entries.append(entry)
        return cls(entries)


class _Reader:
    """Cursor over an in-memory archive with truncation-aware primitives."""

    def __init__(self, data: Buffer, pos: int = 0):
        self.buf = memoryview(data).cast("B")
        self.pos = pos

    def at_end(self) -> bool:
        return self.pos >= len(self.buf)

    def take(self, n: int, what: str) -> memoryview:
        end = self.pos + n
        if end > len(self.buf):
            raise ArchiveError(f"truncated record: expected {n} bytes for {what} at offset {self.pos}")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def key(self) -> str:
        start = self.pos
        buf = self.buf
        n = len(buf)
        i = start
        while i < n and buf[i] != 0x20:
            i += 1
        if i >= n:
            raise ArchiveError(f"truncated record: key at offset {start} has no terminating space")
        if i == start:
            raise ArchiveError(f"empty key at offset {start}")
        raw = bytes(buf[start:i])
        self.pos = i + 1
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveError(f"key at offset {start} is not valid utf-8") from None

    def marker(self):
        got = bytes(self.take(2, "binary marker"))
        if got != BINARY_MARKER:
            raise ArchiveError(f"expected binary marker \\0B before offset {self.pos}, got {got!r}")

    def int32(self, what: str) -> int:
        size = self.take(1, what + " size byte")[0]
        if size != INT_SIZE_BYTE:
            raise ArchiveError(f"unexpected integer size byte {size} for {what}")
        return struct.unpack("<i", self.take(4, what))[0]


def _as_buffer(stream) -> Buffer:
    if isinstance(stream, (bytes, bytearray, memoryview)):
        return stream
    if hasattr(stream, "read"):
        return stream.read()
    raise TypeError(f"expected bytes or a binary file object, got {type(stream).__name__}")


def _read_matrix_body(r: _Reader) -> np.ndarray:
    token = bytes(r.take(3, "matrix token"))
    if token != FLOAT_MATRIX_TOKEN:
        raise ArchiveError(f"unknown matrix token {token!r}")
    rows = r.int32("rows")
    cols = r.int32("cols")
    if rows < 1 or cols < 1:
        raise ArchiveError(f"invalid matrix shape {rows}x{cols}")
    payload = r.take(4 * rows * cols, "matrix payload")
    mat = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)
    if not np.isfinite(mat).all():
        raise ArchiveError("non-finite value in matrix payload")
    return mat


def _read_ivector_body(r: _Reader) -> np.ndarray:
    length = r.int32("vector length")
    if length < 1:
        raise ArchiveError(f"invalid vector length {length}")
    # Each element is (size byte, int32) = 5 bytes.
    raw = r.take(5 * length, "vector payload")
    arr = np.frombuffer(raw, dtype=np.dtype([("size", "u1"), ("value", "<i4")]))
    if (arr["size"] != INT_SIZE_BYTE).any():
        raise ArchiveError("unexpected integer size byte in vector payload")
    values = arr["value"].astype(np.int32)
    if (values < 0).any():
        raise ArchiveError("negative label in alignment")
    return values


def _iter_records(data: Buffer, body) -> Iterator[tuple[str, int, object]]:
    r = _Reader(data)
    while not r.at_end():
        key = r.key()
        offset = r.pos
        r.marker()
        yield key, offset, body(r)


def _collect(records) -> dict:
    out = {}
    for key, _, value in records:
        if key in out:
            raise ArchiveError(f"duplicate key {key!r}")
        out[key] = value
    return out


def read_matrix_archive(stream) -> dict[str, np.ndarray]:
    """Decode every float-matrix record; insertion order follows the archive."""
    return _collect(_iter_records(_as_buffer(stream), _read_matrix_body))


def _check_key(key: str):
    if not isinstance(key, str) or not key or " " in key or "\n" in key:
        raise ArchiveError(f"invalid key {key!r}")


def _matrix_record(key: str, mat) -> bytes:
    _check_key(key)
    mat = np.asarray(mat)
    if mat.ndim != 2 or mat.shape[0] < 1 or mat.shape[1] < 1:
        raise ArchiveError(f"matrix for {key!r} must be 2-d with at least one row and column")
    data = np.ascontiguousarray(mat, dtype="<f4")
    if not np.isfinite(data).all():
        raise ArchiveError(f"non-finite value in matrix {key!r}")
    rows, cols = data.shape
    return b"".join((
        key.encode("utf-8"), b" ", BINARY_MARKER, FLOAT_MATRIX_TOKEN,
        struct.pack("<bi", INT_SIZE_BYTE, rows), struct.pack("<bi", INT_SIZE_BYTE, cols),
        data.tobytes(),
    ))


def write_matrix_archive(mats: Mapping[str, np.ndarray]) -> bytes:
    return b"".join(_matrix_record(k, m) for k, m in mats.items())


def read_alignment_archive(stream, num_states: int | None = None) -> dict[str, AlignmentSeq]:
    """Decode int-vector records. ``num_states`` defaults to the archive-wide max label + 1."""
    raw = _collect(_iter_records(_as_buffer(stream), _read_ivector_body))
    if num_states is None:
        num_states = max((int(v.max()) for v in raw.values()), default=-1) + 1
    return {k: AlignmentSeq(v, num_states) for k, v in raw.items()}


def _ivector_record(key: str, labels) -> bytes:
    _check_key(key)
    if isinstance(labels, AlignmentSeq):
        labels = labels.labels
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size < 1:
        raise ArchiveError(f"labels for {key!r} must be a non-empty 1-d sequence")
    if (labels < 0).any():
        raise ArchiveError(f"negative label in {key!r}")
    body = np.empty(labels.size, dtype=np.dtype([("size", "u1"), ("value", "<i4")]))
    body["size"] = INT_SIZE_BYTE
    body["value"] = labels
    return b"".join((
        key.encode("utf-8"), b" ", BINARY_MARKER,
        struct.pack("<bi", INT_SIZE_BYTE, labels.size), body.tobytes(),
    ))


def write_alignment_archive(alis: Mapping[str, AlignmentSeq | np.ndarray]) -> bytes:
    return b"".join(_ivector_record(k, v) for k, v in alis.items())


def _read_any_body(r: _Reader):
    peek = r.buf[r.pos:r.pos + 1]
    if len(peek) and peek[0] == INT_SIZE_BYTE:
        return _read_ivector_body(r)
    return _read_matrix_body(r)


def build_script_index(stream, path: str = "-") -> ScriptIndex:
    data = _as_buffer(stream)
    entries = []
    seen = set()
    for key, offset, _ in _iter_records(data, _read_any_body):
        if key in seen:
            raise ArchiveError(f"duplicate key {key!r}")
        seen.add(key)
        entries.append(ScriptEntry(key, path, offset))
    return ScriptIndex(entries)


def read_matrix_at(stream, offset: int) -> np.ndarray:
    r = _Reader(_as_buffer(stream), offset)
    r.marker()
    return _read_matrix_body(r)


def read_alignment_at(stream, offset: int) -> np.ndarray:
    r = _Reader(_as_buffer(stream), offset)
    r.marker()
    return _read_ivector_body(r)


# File helpers.

def load_matrix_ark(path: str | os.PathLike) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc.strerror}") from None
    try:
        return read_matrix_archive(data)
    except ArchiveError as exc:
        raise ArchiveError(f"{path}: {exc}") from None


def load_alignment_ark(path: str | os.PathLike, num_states: int | None = None) -> dict[str, AlignmentSeq]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc.strerror}") from None
    try:
        return read_alignment_archive(data, num_states)
    except ArchiveError as exc:
        raise ArchiveError(f"{path}: {exc}") from None


def save_matrix_ark(path: str | os.PathLike, mats: Mapping[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(write_matrix_archive(mats))


def save_alignment_ark(path: str | os.PathLike, alis):
    with open(path, "wb") as fh:
        fh.write(write_alignment_archive(alis))
