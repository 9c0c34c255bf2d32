"""Framing and 39-dimensional MFCC extraction."""

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct, rfft
from scipy.signal import get_window

from . import container
from .errors import ConfigError, EmptyInputError, FormatError

KINDS = ("mfcc", "hidden", "projected")
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray
    frame_rate: float
    utterance_id: str = ""
    kind: str = "mfcc"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        x = np.asarray(self.data)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"feature data must be T x D with T, D >= 1, got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("feature data contains non-finite values")

    @property
    def shape(self):
        return self.data.shape

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def n_frames(n_samples, win, hop):
    if win > n_samples:
        return 0
    return 1 + (n_samples - win) // hop


def frame(audio, win, hop):
    """Hann-weighted frames, shape ``(T, win)``."""
    if hop < 1:
        raise ConfigError("hop must be >= 1")
    x = audio.samples if hasattr(audio, "samples") else np.asarray(audio, dtype=np.float64)
    T = n_frames(x.size, win, hop)
    if T == 0:
        raise EmptyInputError(f"{x.size} samples is shorter than one {win}-sample window")
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    return x[idx] * get_window("hann", win, fftbins=True)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, sample_rate, fmin=0.0, fmax=None):
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def delta(features, window=2):
    """Regression deltas with edge replication along axis 0."""
    x = np.asarray(features, dtype=np.float64)
    T = x.shape[0]
    if T < 1:
        raise EmptyInputError("delta needs at least one frame")
    padded = np.concatenate([np.repeat(x[:1], window, axis=0), x, np.repeat(x[-1:], window, axis=0)])
    num = np.zeros_like(x)
    for n in range(1, window + 1):
        num += n * (padded[window + n : window + n + T] - padded[window - n : window - n + T])
    return num / (2.0 * sum(n * n for n in range(1, window + 1)))


def mfcc39(audio, win=400, hop=320, n_mels=26, n_ceps=13, n_fft=512):
    """13 cepstra (c0 replaced by log frame energy) plus deltas and delta-deltas."""
    if audio.sample_rate != 16000:
        raise ConfigError(f"mfcc39 expects 16 kHz audio, got {audio.sample_rate}")
    frames = frame(audio, win, hop)
    power = np.abs(rfft(frames, n=n_fft, axis=1)) ** 2
    fbank = power @ mel_filterbank(n_mels, n_fft, audio.sample_rate).T
    logmel = np.log(np.maximum(fbank, LOG_FLOOR))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :n_ceps]
    ceps[:, 0] = np.log(np.maximum((frames**2).sum(axis=1), LOG_FLOOR))
    d1 = delta(ceps)
    d2 = delta(d1)
    data = np.concatenate([ceps, d1, d2], axis=1)
    return FeatureMatrix(data, audio.sample_rate / hop, audio.utterance_id, "mfcc")


def save_features(path, fm):
    header = {"utterance_id": fm.utterance_id, "T": int(fm.shape[0]), "D": int(fm.shape[1]),
              "frame_rate": float(fm.frame_rate), "kind": fm.kind}
    return container.save(path, header, {"data": {"features": fm.data}})


def load_features(path):
    header, sections = container.load(path)
    try:
        data = sections["data"]["features"].astype(np.float64)
        if data.shape != (header["T"], header["D"]):
            raise FormatError(f"{path}: header shape does not match payload")
        return FeatureMatrix(data, header["frame_rate"], header["utterance_id"], header["kind"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from None
