"""Dataset manifest parsing and assembly of training arrays."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import load_features, log_mel, read_wav, save_features
from .exceptions import FormatError
from .ranking import read_labels

HEADER = ["clip_id", "wav_path", "scene_label", "split", "pseudo_label_ref"]
SPLITS = ("train", "val", "test")


@dataclass
class ManifestRow:
    clip_id: str
    wav_path: str
    scene_label: str
    split: str
    pseudo_label_ref: str
    line: int = 0


@dataclass
class DatasetManifest:
    rows: list
    root: str = "."
    scene_labels: list = field(default_factory=list)

    @classmethod
    def read(cls, path):
        root = os.path.dirname(os.path.abspath(path))
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise FormatError(f"{path}:1: empty manifest") from None
            if header != HEADER:
                raise FormatError(f"{path}:1: header must be {','.join(HEADER)}, got {','.join(header)}")
            rows, seen = [], {}
            for lineno, rec in enumerate(reader, start=2):
                if not rec or all(not c.strip() for c in rec):
                    continue
                if len(rec) != len(HEADER):
                    raise FormatError(f"{path}:{lineno}: expected {len(HEADER)} fields, got {len(rec)}")
                row = ManifestRow(*[c.strip() for c in rec], line=lineno)
                if not row.clip_id:
                    raise FormatError(f"{path}:{lineno}: empty clip_id")
                if row.clip_id in seen:
                    raise FormatError(
                        f"{path}:{lineno}: duplicate clip_id {row.clip_id!r} (first on line {seen[row.clip_id]})"
                    )
                seen[row.clip_id] = lineno
                if row.split not in SPLITS:
                    raise FormatError(f"{path}:{lineno}: split must be one of {SPLITS}, got {row.split!r}")
                if row.split == "train" and not row.pseudo_label_ref:
                    raise FormatError(f"{path}:{lineno}: train clip {row.clip_id!r} has no pseudo_label_ref")
                if not row.scene_label:
                    raise FormatError(f"{path}:{lineno}: clip {row.clip_id!r} has no scene_label")
                rows.append(row)
        labels = sorted({r.scene_label for r in rows})
        return cls(rows, root, labels)

    def split(self, name):
        return [r for r in self.rows if r.split == name]

    def resolve(self, rel):
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def pseudo_labels(self, rows):
        """Look up each row's 527-dim vector; ``ref`` is ``file`` or ``file#record``."""
        cache, out = {}, []
        for r in rows:
            path, _, rec = r.pseudo_label_ref.partition("#")
            full = self.resolve(path)
            if full not in cache:
                if not os.path.exists(full):
                    raise FormatError(f"line {r.line}: pseudo label file {path!r} not found for {r.clip_id!r}")
                cache[full] = read_labels(full)
            key = rec or r.clip_id
            if key not in cache[full]:
                raise FormatError(f"line {r.line}: no pseudo label record {key!r} in {path!r}")
            out.append(cache[full][key].y)
        return np.stack(out)

    def features(self, rows, cache_dir=None):
        """Log-mel matrices, stacked to (N, T, 64); optional ERGLFEAT cache per clip."""
        feats = []
        for r in rows:
            cached = os.path.join(cache_dir, r.clip_id + ".erglfeat") if cache_dir else None
            if cached and os.path.exists(cached):
                feats.append(load_features(cached))
                continue
            f = log_mel(read_wav(self.resolve(r.wav_path))).astype(np.float32)
            if cached:
                os.makedirs(cache_dir, exist_ok=True)
                save_features(cached, f)
            feats.append(f)
        lengths = {f.shape[0] for f in feats}
        if len(lengths) > 1:
            T = min(lengths)
            feats = [f[:T] for f in feats]
        return np.stack(feats) if feats else np.zeros((0, 1, 64), dtype=np.float32)

    def label_indices(self, rows, scene_labels=None):
        names = list(scene_labels or self.scene_labels)
        index = {s: k for k, s in enumerate(names)}
        missing = sorted({r.scene_label for r in rows} - set(index))
        if missing:
            raise FormatError(f"unknown scene labels {missing}")
        return np.array([index[r.scene_label] for r in rows], dtype=np.int64)
