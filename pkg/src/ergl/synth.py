"""Desk-scale synthetic scene corpus.

Ten "scenes" are built from ten synthetic sound events (tones, band noise,
chirps, clicks).  Scenes come in pairs that share the same three events at
the same activity level.  Within a clip two of the events always sound
together and take turns with the third; the members of a pair differ only
in which two events are coupled.  Event presence therefore separates pairs,
while the pairwise co-occurrence pattern separates the members of a pair.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE, write_wav
from .ranking import N_CLASSES, PseudoLabelVector, write_label_csv

SCENES = (
    "airport", "shopping_mall", "metro", "metro_station", "bus",
    "tram", "park", "public_square", "street_pedestrian", "street_traffic",
)

# (name, planted index in the 527-class label space)
EVENTS = (
    ("low_tone", 12), ("high_tone", 47), ("mid_noise", 88), ("hiss", 133), ("chirp_up", 171),
    ("chirp_down", 208), ("warble", 256), ("clicks", 301), ("buzz", 349), ("rumble", 402),
)

# scene pairs share an event triple (a, b, c); first member couples a+b, second a+c
PAIR_EVENTS = ((8, 1, 7), (9, 6, 5), (0, 2, 7), (4, 3, 8), (2, 9, 1))


@dataclass
class SceneSpec:
    name: str
    events: tuple
    groups: tuple   # positions into ``events``; each group sounds as one unit


def scene_specs():
    specs = []
    for k, ev in enumerate(PAIR_EVENTS):
        specs.append(SceneSpec(SCENES[2 * k], ev, ((0, 1), (2,))))
        specs.append(SceneSpec(SCENES[2 * k + 1], ev, ((0, 2), (1,))))
    return specs


EVENT_NAMES_FILE = "event_names.json"


def event_names():
    return {idx: name for name, idx in EVENTS}


def _bandnoise(rng, n, sr, lo, hi):
    spec = np.fft.rfft(rng.normal(size=n))
    f = np.fft.rfftfreq(n, 1 / sr)
    spec[(f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n)
    return x / (np.std(x) + 1e-12)


def render_event(kind, n, sr, rng):
    """Unit-RMS source signal for event ``kind``; small random jitter per clip."""
    t = np.arange(n) / sr
    j = rng.uniform(0.95, 1.05)
    if kind == 0:
        x = np.sin(2 * np.pi * 300 * j * t)
    elif kind == 1:
        x = np.sin(2 * np.pi * 2500 * j * t)
    elif kind == 2:
        x = _bandnoise(rng, n, sr, 600 * j, 1400 * j)
    elif kind == 3:
        x = _bandnoise(rng, n, sr, 5000 * j, 9000 * j)
    elif kind == 4:
        f = 500 * j + (3000 - 500) * (t % 0.25) / 0.25
        x = np.sin(2 * np.pi * np.cumsum(f) / sr)
    elif kind == 5:
        f = 7000 * j - (7000 - 2000) * (t % 0.2) / 0.2
        x = np.sin(2 * np.pi * np.cumsum(f) / sr)
    elif kind == 6:
        x = np.sin(2 * np.pi * 1000 * j * t) * (0.6 + 0.4 * np.sin(2 * np.pi * 8 * t))
    elif kind == 7:
        x = np.zeros(n + 64)
        period = int(sr / (12 * j))
        decay = np.hanning(128)[64:]
        for s in range(rng.integers(0, period), n, period):
            x[s:s + 64] += decay * rng.choice([-1, 1])
        x = x[:n]
    elif kind == 8:
        f0 = 180 * j
        x = sum(np.sin(2 * np.pi * f0 * h * t) / h for h in range(1, 8))
    elif kind == 9:
        x = _bandnoise(rng, n, sr, 40, 250 * j)
    else:
        raise ValueError(kind)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def _segments(n, rng, n_seg):
    cuts = np.sort(rng.choice(np.arange(1, n_seg * 8), size=n_seg - 1, replace=False))
    bounds = np.concatenate([[0], cuts, [n_seg * 8]]) * n // (n_seg * 8)
    return list(zip(bounds[:-1], bounds[1:]))


def activity(spec, n, rng, n_seg=6):
    """Per-event activity envelope, shape (len(events), n).

    The clip is cut into ``n_seg`` random-length segments; the groups take
    turns owning segments, so each group (and each event) is active half the
    time and every instant has at least one event sounding.
    """
    segs = _segments(n, rng, n_seg)
    owner = np.arange(n_seg) % len(spec.groups)
    if rng.random() < 0.5:
        owner = owner[::-1]
    act = np.zeros((len(spec.events), n))
    for (a, b), g in zip(segs, owner):
        for pos in spec.groups[g]:
            act[pos, a:b] = 1
    # 20 ms raised-cosine edges against spectral splatter
    ramp = int(0.02 * SAMPLE_RATE)
    win = np.hanning(2 * ramp)[:ramp]
    kernel = np.concatenate([win, win[::-1]])
    kernel /= kernel.sum()
    return np.stack([np.convolve(a, kernel, mode="same") for a in act])


def render_clip(spec, rng, duration=2.0, sr=SAMPLE_RATE):
    n = int(round(duration * sr))
    act = activity(spec, n, rng)
    x = 0.003 * rng.normal(size=n)
    weights = np.zeros(N_CLASSES)
    for row, kind in zip(act, spec.events):
        gain = 0.12 * 10 ** (rng.uniform(-3, 3) / 20)
        x += gain * row * render_event(kind, n, sr, rng)
        frac = float(row.mean())
        weights[EVENTS[kind][1]] = float(np.clip(0.3 + frac + rng.normal(0, 0.05), 0.0, 1.0))
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return x, weights


def gen_synth_dataset(out_dir, seed=0, clips_per_scene=20, duration=2.0,
                      split=(0.7, 0.1, 0.2)):
    """Write wavs, pseudo labels and a manifest under ``out_dir``; return the manifest path.

    ``event_names.json`` maps planted label indices to readable names.
    """
    os.makedirs(os.path.join(out_dir, "audio"), exist_ok=True)
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    n_train = int(round(split[0] * clips_per_scene))
    n_val = int(round(split[1] * clips_per_scene))
    for spec in scene_specs():
        for c in range(clips_per_scene):
            clip_id = f"{spec.name}-{c:03d}"
            x, w = render_clip(spec, rng, duration)
            wav_rel = os.path.join("audio", clip_id + ".wav")
            write_wav(os.path.join(out_dir, wav_rel), x)
            part = "train" if c < n_train else "val" if c < n_train + n_val else "test"
            rows.append([clip_id, wav_rel, spec.name, part, "pseudo_labels.csv"])
            labels.append(PseudoLabelVector(clip_id, w))
    write_label_csv(os.path.join(out_dir, "pseudo_labels.csv"), labels)
    with open(os.path.join(out_dir, EVENT_NAMES_FILE), "w") as fh:
        json.dump({str(k): v for k, v in sorted(event_names().items())}, fh, indent=2)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "wav_path", "scene_label", "split", "pseudo_label_ref"])
        w.writerows(rows)
    return manifest


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
