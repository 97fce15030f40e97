"""Exemplar retrieval over pooled visual vectors and disease logits.

Each stored study is scored as cos(z_bar, z_bar_k) + lambda * cos(l, l_k);
ties break toward earlier insertion. A deliberately boring brute-force scorer
ships alongside the query path so the two can be checked against each other
exactly, scores and tie-breaks included.

On-disk format (little-endian, bit-exact round-trip):
    magic  b"DMSR1\\0"
    u32    vector width C
    u32    record count
    per record:
        u16 id byte length, UTF-8 id
        C   f64 pooled visual vector
        14  f64 disease logits
        u32 report byte length, UTF-8 report
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .ontology import NUM_CATEGORIES

MAGIC = b"DMSR1\x00"
DEFAULT_LAMBDA = 0.5


class IndexFormatError(ValueError):
    """Corrupt or mismatched index file."""


@dataclass
class ExemplarRecord:
    study_id: str
    z_bar: np.ndarray
    logits: np.ndarray
    report: str

    def __post_init__(self):
        self.z_bar = np.asarray(self.z_bar, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (NUM_CATEGORIES,):
            raise ValueError(f"expected {NUM_CATEGORIES} logits, got shape {self.logits.shape}")


@dataclass
class ExemplarIndex:
    width: int
    lambda_default: float = DEFAULT_LAMBDA
    records: list = field(default_factory=list)
    _ids: set = field(default_factory=set)

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, ExemplarIndex):
            return NotImplemented
        if self.width != other.width or len(self.records) != len(other.records):
            return False
        for a, b in zip(self.records, other.records):
            if (a.study_id != b.study_id or a.report != b.report
                    or not np.array_equal(a.z_bar, b.z_bar)
                    or not np.array_equal(a.logits, b.logits)):
                return False
        return True


def _cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def add_exemplar(index, record):
    if record.z_bar.shape != (index.width,):
        raise ValueError(f"vector width {record.z_bar.shape} does not match index width {index.width}")
    if record.study_id in index._ids:
        raise ValueError(f"duplicate study_id '{record.study_id}'")
    if np.linalg.norm(record.z_bar) == 0.0 or np.linalg.norm(record.logits) == 0.0:
        raise ValueError(f"zero-norm vector for study '{record.study_id}'")
    index.records.append(record)
    index._ids.add(record.study_id)


def _score(record, z_bar, logits, lam, use_probabilities):
    if use_probabilities:
        a = 1.0 / (1.0 + np.exp(-logits))
        b = 1.0 / (1.0 + np.exp(-record.logits))
    else:
        a, b = logits, record.logits
    return _cosine(z_bar, record.z_bar) + lam * _cosine(a, b)


def query(index, z_bar, logits, lam=None, k=1, exclude_id=None, use_probabilities=False):
    """Top-k (study_id, score), best first; earlier insertion wins ties."""
    if len(index) == 0:
        raise ValueError("cannot query an empty index")
    if k < 1:
        raise ValueError("k must be >= 1")
    lam = index.lambda_default if lam is None else lam
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    z_bar = np.asarray(z_bar, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if np.linalg.norm(z_bar) == 0.0 or np.linalg.norm(logits) == 0.0:
        raise ValueError("zero-norm query vector")
    scored = [(i, _score(r, z_bar, logits, lam, use_probabilities))
              for i, r in enumerate(index.records) if r.study_id != exclude_id]
    if not scored:
        raise ValueError("every record was excluded")
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return [(index.records[i].study_id, s) for i, s in scored[:k]]


def brute_force_oracle(index, z_bar, logits, lam=None, k=1, exclude_id=None,
                       use_probabilities=False):
    """Straight-line reference: score every record, select maxima one at a time."""
    if len(index) == 0:
        raise ValueError("cannot query an empty index")
    lam = index.lambda_default if lam is None else lam
    z_bar = np.asarray(z_bar, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    remaining = []
    for position, record in enumerate(index.records):
        if exclude_id is not None and record.study_id == exclude_id:
            continue
        remaining.append((position, record.study_id,
                          _score(record, z_bar, logits, lam, use_probabilities)))
    ranked = []
    while remaining and len(ranked) < k:
        best = 0
        for j in range(1, len(remaining)):
            if remaining[j][2] > remaining[best][2]:
                best = j
        _, sid, score = remaining.pop(best)
        ranked.append((sid, score))
    return ranked


def retrieve_report(index, z_bar, logits, lam=None, exclude_id=None, use_probabilities=False):
    """Report text of the single best exemplar."""
    top_id, _ = query(index, z_bar, logits, lam, k=1, exclude_id=exclude_id,
                      use_probabilities=use_probabilities)[0]
    for r in index.records:
        if r.study_id == top_id:
            return r.report
    raise AssertionError("unreachable")


# -- persistence --------------------------------------------------------------


def save(index, path):
    chunks = [MAGIC, struct.pack("<II", index.width, len(index.records))]
    for r in index.records:
        sid = r.study_id.encode("utf-8")
        rep = r.report.encode("utf-8")
        chunks.append(struct.pack("<H", len(sid)))
        chunks.append(sid)
        chunks.append(r.z_bar.astype("<f8").tobytes())
        chunks.append(r.logits.astype("<f8").tobytes())
        chunks.append(struct.pack("<I", len(rep)))
        chunks.append(rep)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise IndexFormatError("truncated index file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise IndexFormatError("magic mismatch: not an exemplar index file")
    width, count = r.unpack("<II")
    if width < 1:
        raise IndexFormatError(f"invalid vector width {width}")
    index = ExemplarIndex(width=width)
    for _ in range(count):
        (id_len,) = r.unpack("<H")
        sid = r.take(id_len).decode("utf-8")
        z_bar = np.frombuffer(r.take(8 * width), dtype="<f8").copy()
        logits = np.frombuffer(r.take(8 * NUM_CATEGORIES), dtype="<f8").copy()
        (rep_len,) = r.unpack("<I")
        report = r.take(rep_len).decode("utf-8")
        add_exemplar(index, ExemplarRecord(sid, z_bar, logits, report))
    if r.pos != len(blob):
        raise IndexFormatError("trailing bytes after final record")
    return index
