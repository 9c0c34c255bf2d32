"""Audio ingestion, the synthetic corpus, and the two augmentations."""

import dataclasses
import json
import math
import os
import wave
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, LeakageError, UnsupportedFormatError

SPLITS = ("pretrain", "cluster-fit", "probe-train", "probe-dev", "probe-test")
DEFAULT_SPLIT_FRACTIONS = {
    "pretrain": 0.375,
    "cluster-fit": 0.25,
    "probe-train": 0.1875,
    "probe-dev": 0.09375,
    "probe-test": 0.09375,
}
SAMPLE_RATE = 16000


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    utterance_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("AudioBuffer holds mono audio only")
        if x.size and (np.abs(x).max() > 1.0 or not np.isfinite(x).all()):
            raise ValueError("samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class ManifestEntry:
    utterance_id: str
    duration_s: float
    split: str
    path: Optional[str] = None
    seed: Optional[int] = None
    label: Optional[int] = None
    tokens: list = field(default_factory=list)

    def to_json(self):
        out = {"id": self.utterance_id, "duration_s": self.duration_s, "split": self.split}
        if self.path is not None:
            out["path"] = self.path
        if self.seed is not None:
            out["seed"] = self.seed
        if self.label is not None:
            out["class"] = self.label
        if self.tokens:
            out["tokens"] = list(self.tokens)
        return out

    @classmethod
    def from_json(cls, obj):
        return cls(
            utterance_id=obj["id"],
            duration_s=float(obj["duration_s"]),
            split=obj["split"],
            path=obj.get("path"),
            seed=obj.get("seed"),
            label=obj.get("class"),
            tokens=list(obj.get("tokens", [])),
        )


@dataclass
class CorpusManifest:
    entries: list

    def __post_init__(self):
        ids = [e.utterance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate utterance ids in manifest")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ConfigError(f"unknown split tag {e.split!r} for {e.utterance_id}")

    def ids(self, *splits):
        return [e.utterance_id for e in self.entries if e.split in splits]

    def entry(self, utterance_id):
        for e in self.entries:
            if e.utterance_id == utterance_id:
                return e
        raise KeyError(utterance_id)

    def split_of(self, utterance_id):
        return self.entry(utterance_id).split

    def check_disjoint(self, *groups):
        """Raise LeakageError if any utterance id appears in two of ``groups``."""
        seen = {}
        for gi, group in enumerate(groups):
            for uid in group:
                if uid in seen and seen[uid] != gi:
                    raise LeakageError(f"utterance {uid} appears in two disjoint sets")
                seen[uid] = gi

    def write(self, path):
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls([ManifestEntry.from_json(json.loads(line)) for line in fh if line.strip()])


@dataclass
class Corpus:
    """A manifest plus the decoded audio for each entry."""

    manifest: CorpusManifest
    audio: dict

    def buffers(self, *splits):
        return [self.audio[uid] for uid in self.manifest.ids(*splits)]


def load_wav(path):
    try:
        with wave.open(os.fspath(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if channels != 1:
                raise UnsupportedFormatError(f"{path}: {channels} channels, expected mono")
            if width != 2:
                raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, expected 16-bit PCM")
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: malformed WAV header ({exc})") from None
    pcm = np.frombuffer(raw, dtype="<i2")
    uid = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return AudioBuffer(pcm / 32768.0, rate, uid)


def write_wav(path, audio):
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())


# -- synthetic corpus -------------------------------------------------------

def class_drone_f0(label):
    return 150.0 + 350.0 * label


def token_f0(token, n_tokens):
    return 220.0 * 2.0 ** (token / max(n_tokens / 2.0, 1.0))


def _harmonic_stack(f0, t, n_harm, sr):
    out = np.zeros_like(t)
    for h in range(1, n_harm + 1):
        if h * f0 >= sr / 2:
            break
        out += np.sin(2 * np.pi * h * f0 * t) / h
    return out


def synth_utterance(seed, label, duration_s, n_tokens=8, sample_rate=SAMPLE_RATE, follow_prob=0.8):
    """One synthetic utterance: a class drone under a sequence of token segments.

    Tokens follow a class-specific cycle with probability ``follow_prob`` and
    are otherwise drawn uniformly, so context carries information about a
    masked segment.  Returns ``(samples, tokens)``; ``tokens`` is the segment
    transcript with no immediate repeats.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    drone = _harmonic_stack(class_drone_f0(label), t, 3, sample_rate)

    body = np.zeros(n)
    tokens = []
    pos = 0
    ramp = int(0.01 * sample_rate)
    while pos < n:
        seg = int(rng.uniform(0.12, 0.32) * sample_rate)
        end = min(n, pos + seg)
        if tokens and n_tokens > 1 and rng.random() < follow_prob:
            tok = (tokens[-1] + 1 + label % (n_tokens - 1)) % n_tokens
        else:
            choices = [v for v in range(n_tokens) if not tokens or v != tokens[-1]] or [0]
            tok = int(rng.choice(choices))
        tokens.append(tok)
        env = np.ones(end - pos)
        r = min(ramp, (end - pos) // 2)
        if r > 0:
            win = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            env[:r] *= win
            env[-r:] *= win[::-1]
        phase = rng.uniform(0, 2 * np.pi)
        body[pos:end] = env * _harmonic_stack(token_f0(tok, n_tokens), t[pos:end] + phase, 4, sample_rate)
        pos = end

    x = 0.3 * drone / 1.84 + 0.45 * body / 2.08 + 0.01 * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0), tokens


def _split_counts(n, fractions):
    names = [s for s in SPLITS if fractions.get(s, 0) > 0]
    total = sum(fractions[s] for s in names)
    raw = [n * fractions[s] / total for s in names]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(names)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return list(zip(names, counts))


def synth_corpus(seed, n_utts, duration_s, n_classes, n_tokens=8, split_fractions=None,
                 sample_rate=SAMPLE_RATE, prefix="utt"):
    """Deterministic synthetic corpus; returns ``(manifest, {id: AudioBuffer})``.

    Utterance ``i`` belongs to class ``i % n_classes``.  Splits are assigned by
    a seeded, class-interleaved permutation so each split stays balanced.
    """
    if n_utts < 1 or duration_s <= 0 or n_classes < 1:
        raise ConfigError("synth_corpus needs n_utts >= 1, duration_s > 0, n_classes >= 1")
    fractions = dict(DEFAULT_SPLIT_FRACTIONS if split_fractions is None else split_fractions)
    unknown = set(fractions) - set(SPLITS)
    if unknown:
        raise ConfigError(f"unknown split names {sorted(unknown)}")

    rng = np.random.default_rng(seed)
    labels = [i % n_classes for i in range(n_utts)]
    rank = np.empty(n_utts, dtype=np.int64)
    for c in range(n_classes):
        members = [i for i in range(n_utts) if labels[i] == c]
        rank[members] = rng.permutation(len(members))
    order = sorted(range(n_utts), key=lambda i: (rank[i], labels[i]))
    split_of = {}
    pos = 0
    for name, count in _split_counts(n_utts, fractions):
        for i in order[pos : pos + count]:
            split_of[i] = name
        pos += count

    utt_seeds = rng.integers(0, 2**31 - 1, size=n_utts)
    entries, audio = [], {}
    width = max(4, len(str(n_utts - 1)))
    for i in range(n_utts):
        uid = f"{prefix}{i:0{width}d}"
        samples, tokens = synth_utterance(int(utt_seeds[i]), labels[i], duration_s, n_tokens, sample_rate)
        audio[uid] = AudioBuffer(samples, sample_rate, uid)
        entries.append(ManifestEntry(uid, len(samples) / sample_rate, split_of[i],
                                     seed=int(utt_seeds[i]), label=labels[i], tokens=tokens))
    return CorpusManifest(entries), audio


# -- augmentation -----------------------------------------------------------

def speed_perturb(audio, factor):
    """Resample by linear interpolation so playback is ``factor`` times faster."""
    if not 0.5 <= factor <= 2.0:
        raise ConfigError(f"speed factor {factor} outside [0.5, 2.0]")
    n = len(audio)
    if factor == 1.0:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate, audio.utterance_id)
    m = max(1, int(math.floor(n / factor + 0.5)))
    pos = np.minimum(np.arange(m) * factor, n - 1)
    y = np.interp(pos, np.arange(n), audio.samples)
    return AudioBuffer(y, audio.sample_rate, f"{audio.utterance_id}_sp{factor:g}")


def spec_augment(features, n_time_masks, max_t, n_freq_masks, max_f, rng):
    """Time and feature-dimension masking; masked cells get the per-dimension mean.

    Returns ``(masked FeatureMatrix, boolean cell mask)``.
    """
    x = np.asarray(features.data)
    T, D = x.shape
    if max_t > T or max_f > D:
        raise ConfigError("mask width exceeds feature matrix size")
    cells = np.zeros((T, D), dtype=bool)
    for _ in range(n_time_masks):
        w = int(rng.integers(0, max_t + 1))
        s = int(rng.integers(0, T - w + 1))
        cells[s : s + w, :] = True
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, max_f + 1))
        s = int(rng.integers(0, D - w + 1))
        cells[:, s : s + w] = True
    if not cells.any():
        return features, cells
    out = x.copy()
    fill = np.broadcast_to(x.mean(axis=0, keepdims=True), x.shape)
    out[cells] = fill[cells]
    return dataclasses.replace(features, data=out), cells


def load_corpus(manifest_path, n_tokens=8):
    """Read a JSONL manifest and decode (or regenerate) every utterance."""
    manifest = CorpusManifest.read(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    audio = {}
    for e in manifest.entries:
        if e.path is not None:
            buf = load_wav(os.path.join(root, e.path))
            audio[e.utterance_id] = AudioBuffer(buf.samples, buf.sample_rate, e.utterance_id)
        elif e.seed is not None:
            samples, _ = synth_utterance(e.seed, e.label or 0, e.duration_s, n_tokens)
            audio[e.utterance_id] = AudioBuffer(samples, SAMPLE_RATE, e.utterance_id)
        else:
            raise FormatError(f"manifest entry {e.utterance_id} has neither path nor seed")
    return Corpus(manifest, audio)
