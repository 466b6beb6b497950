"""Top-n event vocabulary selection from 527-dim soft pseudo labels."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, FormatError

N_CLASSES = 527
LABEL_MAGIC = b"ERGLPLBL"
LABEL_VERSION = 1


@dataclass
class PseudoLabelVector:
    clip_id: str
    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.y.size != N_CLASSES:
            raise FormatError(f"{self.clip_id}: pseudo label has {self.y.size} entries, expected {N_CLASSES}")
        if np.any(~np.isfinite(self.y)) or np.any(self.y < 0) or np.any(self.y > 1):
            raise FormatError(f"{self.clip_id}: pseudo label values must lie in [0, 1]")


@dataclass
class EventVocabulary:
    event_ids: list
    scores: list = field(default_factory=list)
    display_names: list = field(default_factory=list)

    def __post_init__(self):
        self.event_ids = [int(i) for i in self.event_ids]
        if len(set(self.event_ids)) != len(self.event_ids):
            raise ConfigurationError("vocabulary indices must be unique")
        if any(not 0 <= i < N_CLASSES for i in self.event_ids):
            raise ConfigurationError(f"vocabulary indices must lie in [0, {N_CLASSES})")

    @property
    def n(self):
        return len(self.event_ids)

    def name(self, k):
        if k < len(self.display_names) and self.display_names[k]:
            return self.display_names[k]
        return f"event_{self.event_ids[k]}"

    def to_json(self):
        rows = []
        for k, idx in enumerate(self.event_ids):
            score = self.scores[k] if k < len(self.scores) else None
            rows.append({"index": idx, "name": self.name(k), "score": score})
        return rows

    @classmethod
    def from_json(cls, rows):
        return cls(
            event_ids=[r["index"] for r in rows],
            scores=[r.get("score") for r in rows],
            display_names=[r.get("name", "") for r in rows],
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _pairwise_sum(rows):
    # balanced-tree summation over the clip axis
    if len(rows) == 1:
        return rows[0]
    mid = len(rows) // 2
    return _pairwise_sum(rows[:mid]) + _pairwise_sum(rows[mid:])


def accumulate(labels):
    """Sum pseudo-label vectors over a stream; 64-bit, pairwise.

    Rows are sorted canonically before reduction so that any permutation of
    the same clips gives bitwise-identical scores.
    """
    rows = []
    for item in labels:
        y = item.y if isinstance(item, PseudoLabelVector) else np.asarray(item, dtype=np.float64)
        if y.shape != (N_CLASSES,):
            raise FormatError(f"pseudo label has shape {y.shape}, expected ({N_CLASSES},)")
        rows.append(y)
    if not rows:
        raise ValueError("cannot accumulate an empty label stream")
    arr = np.stack(rows)
    order = np.lexsort(arr.T[::-1])
    return _pairwise_sum(list(arr[order]))


def select_top_n(scores, n, names=None):
    """The ``n`` highest-scoring indices; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= n <= scores.size:
        raise ConfigurationError(f"n must lie in [1, {scores.size}], got {n}")
    order = np.lexsort((np.arange(scores.size), -scores))[:n]
    names = names or {}
    return EventVocabulary(
        event_ids=order.tolist(),
        scores=scores[order].tolist(),
        display_names=[names.get(int(i), "") for i in order],
    )


def project_labels(y, vocab):
    y = y.y if isinstance(y, PseudoLabelVector) else np.asarray(y)
    return y[..., vocab.event_ids]


# -- file formats ----------------------------------------------------------

def read_label_csv(path):
    """Sparse CSV records ``clip_id,i0:p0,i1:p1,...``; absent indices are 0."""
    out = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip() or row[0].startswith("#"):
                continue
            y = np.zeros(N_CLASSES)
            for cell in row[1:]:
                cell = cell.strip()
                if not cell:
                    continue
                try:
                    idx, val = cell.split(":")
                    idx, val = int(idx), float(val)
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: bad pair {cell!r}") from None
                if not 0 <= idx < N_CLASSES:
                    raise FormatError(f"{path}:{lineno}: index {idx} outside [0, {N_CLASSES})")
                y[idx] = val
            try:
                out[row[0]] = PseudoLabelVector(row[0], y)
            except FormatError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def write_label_csv(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for lab in labels:
            nz = np.flatnonzero(lab.y)
            w.writerow([lab.clip_id] + [f"{i}:{lab.y[i]:.9g}" for i in nz])


def write_label_bin(path, labels):
    labels = list(labels)
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<HI", LABEL_VERSION, len(labels)))
        for lab in labels:
            cid = lab.clip_id.encode()
            fh.write(struct.pack("<H", len(cid)))
            fh.write(cid)
            fh.write(np.asarray(lab.y, dtype="<f4").tobytes())


def read_label_bin(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != LABEL_MAGIC:
        raise FormatError(f"{path}: not an ERGLPLBL file")
    try:
        version, count = struct.unpack_from("<HI", blob, 8)
        if version != LABEL_VERSION:
            raise FormatError(f"{path}: unsupported label version {version}")
        pos = 8 + 6
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            cid = blob[pos:pos + ln].decode()
            pos += ln
            if pos + 4 * N_CLASSES > len(blob):
                raise FormatError(f"{path}: truncated record for {cid!r}")
            y = np.frombuffer(blob, dtype="<f4", count=N_CLASSES, offset=pos).astype(np.float64)
            pos += 4 * N_CLASSES
            out[cid] = PseudoLabelVector(cid, y)
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None
    return out


def read_labels(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
    return read_label_bin(path) if magic == LABEL_MAGIC else read_label_csv(path)


class EventRanker(BaseEstimator, TransformerMixin):
    """Fit selects the Top-n vocabulary; transform gathers the n targets.

    ``X`` is an (N, 527) array of soft pseudo labels.
    """

    def __init__(self, n_events=25, event_names=None):
        self.n_events = n_events
        self.event_names = event_names

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != N_CLASSES:
            raise FormatError(f"expected {N_CLASSES} columns, got {X.shape[1]}")
        self.scores_ = accumulate(X)
        self.vocabulary_ = select_top_n(self.scores_, self.n_events, self.event_names)
        return self

    def transform(self, X):
        check_is_fitted(self, "vocabulary_")
        X = check_array(X, dtype=np.float64)
        return project_labels(X, self.vocabulary_)

