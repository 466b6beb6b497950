"""Log-mel feature extraction, WAV ingestion and the feature cache format."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigurationError, FormatError, InputTooShortError

SAMPLE_RATE = 32000
WIN_LENGTH = 1024
HOP_LENGTH = 320
N_MELS = 64
LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"ERGLFEAT"
FEATURE_VERSION = 1


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    clip_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


def n_frames(n_samples, win=WIN_LENGTH, hop=HOP_LENGTH):
    """Number of full analysis frames (no centring or padding)."""
    if n_samples < win:
        raise InputTooShortError(f"clip has {n_samples} samples, fewer than one window of {win}")
    return 1 + (n_samples - win) // hop


def hamming(win=WIN_LENGTH):
    # periodic Hamming window, the usual choice for spectral analysis
    return np.hamming(win + 1)[:-1]


def stft(clip, win=WIN_LENGTH, hop=HOP_LENGTH, window=None):
    """Complex spectrogram, shape (frames, win // 2 + 1); frame t starts at t * hop."""
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    T = n_frames(x.size, win, hop)
    w = hamming(win) if window is None else np.asarray(window, dtype=np.float64)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:T]
    return np.fft.rfft(frames * w, axis=-1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr=SAMPLE_RATE, n_fft=WIN_LENGTH, n_mels=N_MELS, fmin=0.0, fmax=None):
    """Triangular filters equally spaced on the mel scale, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sr / 2 if fmax is None else fmax
    if fmax > sr / 2:
        raise ConfigurationError(f"fmax {fmax} exceeds Nyquist {sr / 2}")
    if not 0 <= fmin < fmax:
        raise ConfigurationError(f"need 0 <= fmin < fmax, got {fmin}, {fmax}")
    bins = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (ctr - lo)
    falling = (hi - bins) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigurationError(
            f"{n_mels} mel filters too many for n_fft={n_fft}: filters {empty.tolist()} are empty"
        )
    return fb


def filter_centers(sr=SAMPLE_RATE, n_mels=N_MELS, fmin=0.0, fmax=None):
    fmax = sr / 2 if fmax is None else fmax
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


_FB_CACHE = {}


def _cached_filterbank(sr):
    if sr not in _FB_CACHE:
        _FB_CACHE[sr] = mel_filterbank(sr)
    return _FB_CACHE[sr]


def log_mel(clip):
    """Log mel energies, shape (frames, 64), float64."""
    if not isinstance(clip, AudioClip):
        clip = AudioClip(clip)
    power = np.abs(stft(clip)) ** 2
    mel = power @ _cached_filterbank(clip.sample_rate).T
    return np.log(np.maximum(mel, LOG_FLOOR))


def resample_linear(samples, sr_in, sr_out=SAMPLE_RATE):
    if sr_in == sr_out:
        return np.asarray(samples, dtype=np.float64)
    n_out = int(round(len(samples) * sr_out / sr_in))
    t_out = np.arange(n_out) / sr_out
    t_in = np.arange(len(samples)) / sr_in
    return np.interp(t_out, t_in, samples)


def read_wav(path, target_sr=SAMPLE_RATE):
    """Read 16-bit PCM WAV, downmix by averaging, resample linearly to ``target_sr``."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getsampwidth() != 2:
                raise FormatError(f"{path}: only 16-bit PCM is supported (got {8 * wf.getsampwidth()}-bit)")
            ch = wf.getnchannels()
            sr = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise FormatError(f"{path}: cannot decode WAV ({exc})") from None
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if ch > 1:
        pcm = pcm[: pcm.size - pcm.size % ch].reshape(-1, ch).mean(axis=1)
    clip_id = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return AudioClip(resample_linear(pcm, sr, target_sr), target_sr, clip_id)


def write_wav(path, samples, sr=SAMPLE_RATE):
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sr)
        wf.writeframes(pcm.tobytes())


def save_features(path, values):
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise FormatError(f"feature matrix must be 2-d, got shape {values.shape}")
    T, bins = values.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HII", FEATURE_VERSION, T, bins))
        fh.write(values.tobytes(order="C"))


def load_features(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    head = len(FEATURE_MAGIC) + struct.calcsize("<HII")
    if len(blob) < head or blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not an ERGLFEAT feature file")
    version, T, bins = struct.unpack("<HII", blob[len(FEATURE_MAGIC):head])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    if len(blob) - head != 4 * T * bins:
        raise FormatError(f"{path}: expected {T}x{bins} floats, file is truncated or padded")
    return np.frombuffer(blob, dtype="<f4", offset=head).reshape(T, bins).astype(np.float32)


class LogMelExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer: iterable of waveforms (or AudioClips) -> (N, T, 64) array.

    All clips in one call must share a length so the output stacks.
    """

    def __init__(self, sample_rate=SAMPLE_RATE, dtype="float32"):
        self.sample_rate = sample_rate
        self.dtype = dtype

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        feats = []
        for item in X:
            clip = item if isinstance(item, AudioClip) else AudioClip(item, self.sample_rate)
            feats.append(log_mel(clip))
        lengths = {f.shape[0] for f in feats}
        if len(lengths) > 1:
            raise ValueError(f"clips produce differing frame counts {sorted(lengths)}; trim or pad first")
        return np.stack(feats).astype(self.dtype)
