"""Frozen-encoder probes: layer-averaged features, a CNN + attention-pooling
classifier, a CTC head with greedy decoding, and WER/accuracy metrics."""

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from . import container
from . import encoder as enc
from .autograd import Tensor
from .corpus import spec_augment
from .errors import ConfigError, FormatError, InfeasibleError, LeakageError, UndefinedMetricError
from .features import FeatureMatrix


@dataclass
class ProbeConfig:
    n_classes: int
    input_dim: int
    task: str = "classification"
    conv_layers: int = 3
    kernel: int = 5
    dropout: float = 0.4
    hidden: int = 80
    batch: int = 4
    steps: int = 10000
    lr: float = 1e-3
    ff_activation: str = "relu"
    eval_every: int = 500
    seed: int = 0
    spec_augment: Optional[dict] = None

    def validate(self):
        if self.task not in ("classification", "ctc"):
            raise ConfigError(f"unknown probe task {self.task!r}")
        if self.task == "classification" and self.n_classes < 2:
            raise ConfigError("classification probes need n_classes >= 2")
        if self.ff_activation not in ("relu", "none"):
            raise ConfigError(f"unknown ff_activation {self.ff_activation!r}")
        return self

    @property
    def n_outputs(self):
        # CTC adds a blank symbol at index n_classes.
        return self.n_classes + 1 if self.task == "ctc" else self.n_classes

    @property
    def receptive_field(self):
        return 1 + self.conv_layers * (self.kernel - 1)


@dataclass
class EvalRecord:
    task: str
    metric: str
    value: float
    split: str
    n_items: int
    step: int = 0

    def __post_init__(self):
        if self.metric == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        if self.metric == "wer" and self.value < 0:
            raise ValueError("wer must be >= 0")

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


# -- features ---------------------------------------------------------------------------

def extract_features(model, audio, include_input_state=True):
    """Mean over all hidden states (``depth + 1`` of them by default), float64."""
    out = enc.forward(model, audio, grad=False)
    states = out.hidden_states if include_input_state else out.hidden_states[1:]
    mean = np.mean([s.data[0].astype(np.float64) for s in states], axis=0)
    rate = audio.sample_rate / model.config.total_stride
    return FeatureMatrix(mean, rate, audio.utterance_id, "hidden")


# -- probe network ----------------------------------------------------------------------

def self_attention_pool(seq, w):
    """Softmax(seq @ w) over time, then the weighted sum of frames.

    ``seq`` is (T, H) or (B, T, H); ``w`` is an H-vector or (H, 1) column.
    """
    seq = seq if isinstance(seq, Tensor) else Tensor(np.asarray(seq, dtype=np.float64))
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=seq.data.dtype))
    squeeze = seq.ndim == 2
    if squeeze:
        seq = ag.reshape(seq, (1,) + seq.shape)
    if w.ndim == 1:
        w = ag.reshape(w, (w.shape[0], 1))
    alpha = ag.softmax(ag.matmul(seq, w), axis=1)  # (B, T, 1)
    out = ag.tsum(ag.mul(alpha, seq), axis=1)
    return ag.reshape(out, (out.shape[1],)) if squeeze else out


def probe_shapes(cfg):
    shapes = {}
    c_in = cfg.input_dim
    for i in range(cfg.conv_layers):
        shapes[f"conv.{i}.weight"] = (cfg.hidden, c_in, cfg.kernel)
        shapes[f"conv.{i}.bias"] = (cfg.hidden,)
        c_in = cfg.hidden
    if cfg.task == "classification":
        shapes["pool.weight"] = (cfg.hidden, 1)
        shapes["ff.weight"] = (cfg.hidden, cfg.hidden)
        shapes["ff.bias"] = (cfg.hidden,)
    shapes["out.weight"] = (cfg.hidden, cfg.n_outputs)
    shapes["out.bias"] = (cfg.n_outputs,)
    return shapes


class Probe:
    def __init__(self, config, params=None, dtype=np.float64):
        self.config = config.validate()
        self.dtype = np.dtype(dtype)
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = {}
            for name, shape in sorted(probe_shapes(config).items()):
                params[name] = enc._init_tensor(name, shape, rng, self.dtype)
        self.params = {n: p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=self.dtype), True)
                       for n, p in params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def arrays(self):
        return {n: t.data for n, t in self.params.items()}


def _pad_edges(x, min_len):
    t = x.shape[1]
    if t >= min_len:
        return x
    left = (min_len - t) // 2
    return np.pad(x, ((0, 0), (left, min_len - t - left), (0, 0)), mode="edge")


def probe_forward(probe, features, train=False, rng=None):
    """Logits from (B, T, D) or (T, D) features.

    Classification: conv x3 (valid, ReLU, dropout) -> attention pool -> FF -> output.
    CTC: conv stack with same-length padding -> per-frame output over classes + blank.
    """
    cfg = probe.config
    P = probe.params
    x = np.asarray(features.data if isinstance(features, FeatureMatrix) else features, dtype=probe.dtype)
    if x.ndim == 2:
        x = x[None]
    drop_rng = rng if train else None
    if cfg.task == "classification":
        h = Tensor(_pad_edges(x, cfg.receptive_field))
        pad = 0
    else:
        h = Tensor(x)
        pad = (cfg.kernel // 2, cfg.kernel - 1 - cfg.kernel // 2)
    for i in range(cfg.conv_layers):
        h = ag.relu(ag.conv1d(h, P[f"conv.{i}.weight"], P[f"conv.{i}.bias"], padding=pad))
        h = ag.dropout(h, cfg.dropout, drop_rng)
    if cfg.task == "ctc":
        return ag.add(ag.matmul(h, P["out.weight"]), P["out.bias"])
    pooled = self_attention_pool(h, P["pool.weight"])
    ff = ag.add(ag.matmul(pooled, P["ff.weight"]), P["ff.bias"])
    if cfg.ff_activation == "relu":
        ff = ag.relu(ff)
    ff = ag.dropout(ff, cfg.dropout, drop_rng)
    return ag.add(ag.matmul(ff, P["out.weight"]), P["out.bias"])


classifier_forward = probe_forward


# -- CTC -------------------------------------------------------------------------------

def _logsumexp(a, axis=None):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(s, axis=axis) if axis is not None else s.item()


def ctc_min_frames(target):
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_forward_backward(logits, target, blank=None):
    """Negative log-likelihood and its gradient w.r.t. the (T, V+1) logits."""
    z = np.asarray(logits, dtype=np.float64)
    T, C = z.shape
    blank = C - 1 if blank is None else blank
    target = [int(t) for t in target]
    if any(t == blank or not 0 <= t < C for t in target):
        raise ConfigError("target symbols must be non-blank class ids")
    if T < ctc_min_frames(target):
        raise InfeasibleError(f"{T} frames cannot emit a {len(target)}-symbol target")
    logp = z - _logsumexp(z, axis=1)[:, None]
    ext = [blank]
    for t in target:
        ext += [t, blank]
    S = len(ext)
    ext = np.array(ext)
    # s may skip from s-2 when ext[s] is a label differing from ext[s-2]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    neg = -np.inf
    alpha = np.full((T, S), neg)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + logp[t, ext]
    beta = np.full((T, S), neg)
    beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip_next[:-2], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b + logp[t, ext]
    ll = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    # sum_s alpha*beta counts the emission at t twice; remove one copy.
    ab = alpha + beta - logp[:, ext]
    occ = np.full((T, C), neg)
    for c in np.unique(ext):
        occ[:, c] = _logsumexp(ab[:, ext == c], axis=1)
    grad = np.exp(logp) - np.exp(occ - ll)
    return float(-ll), grad


def ctc_loss(logits, target, blank=None):
    """CTC negative log-likelihood; blank defaults to the last class (index V)."""
    if isinstance(logits, Tensor):
        loss, grad = ctc_forward_backward(logits.data, target, blank)
        return ag._make(np.asarray(loss, dtype=logits.data.dtype), (logits,),
                        lambda g: ((g * grad).astype(logits.data.dtype),))
    return ctc_forward_backward(logits, target, blank)[0]


def greedy_decode(logits, blank=None):
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    blank = z.shape[-1] - 1 if blank is None else blank
    best = z.argmax(axis=-1)
    out = []
    prev = None
    for s in best:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return out


def edit_distance(a, b):
    a, b = list(a), list(b)
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev, row[0] = row[0], i
        for j, y in enumerate(b, 1):
            cur = min(row[j] + 1, row[j - 1] + 1, prev + (x != y))
            prev, row[j] = row[j], cur
    return row[-1]


def wer(reference, hypothesis):
    if len(reference) == 0:
        raise UndefinedMetricError("WER is undefined for an empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


# -- training -----------------------------------------------------------------------------

def class_balanced_shuffle(labels, rng):
    """Permute labels so each true class receives the label multiset in equal shares.

    Used for the shuffled-label control: the resulting training labels carry
    no information about the true class.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    out = np.empty_like(labels)
    for c in classes:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        fake = np.resize(classes, idx.size)
        out[idx] = fake[rng.permutation(idx.size)]
    return out


def _batch_loss(probe, feats, targets, rng, train):
    cfg = probe.config
    total = None
    n = len(feats)
    by_len = {}
    for i, f in enumerate(feats):
        by_len.setdefault(f.shape[0], []).append(i)
    for t in sorted(by_len):
        ids = by_len[t]
        x = np.stack([feats[i] for i in ids])
        logits = probe_forward(probe, x, train=train, rng=rng)
        if cfg.task == "classification":
            y = np.array([targets[i] for i in ids])
            part = ag.weighted_cross_entropy(logits, y, np.full(len(ids), 1.0 / n))
        else:
            part = None
            for r, i in enumerate(ids):
                loss = ag.mul(ctc_loss(ag.index(logits, r), targets[i]), 1.0 / n)
                part = loss if part is None else ag.add(part, loss)
        total = part if total is None else ag.add(total, part)
    return total


def probe_predict(probe, feats):
    preds = []
    for f in feats:
        logits = probe_forward(probe, f, train=False).data[0]
        preds.append(int(logits.argmax()) if probe.config.task == "classification" else greedy_decode(logits))
    return preds


def evaluate_probe(probe, feats, targets, split, step=0):
    preds = probe_predict(probe, feats)
    if probe.config.task == "classification":
        acc = float(np.mean([p == t for p, t in zip(preds, targets)]))
        return EvalRecord("classification", "accuracy", acc, split, len(feats), step)
    edits = sum(edit_distance(t, p) for p, t in zip(preds, targets))
    words = sum(len(t) for t in targets)
    if words == 0:
        raise UndefinedMetricError("WER is undefined for empty references")
    return EvalRecord("ctc", "wer", edits / words, split, len(feats), step)


def train_probe(probe, model, corpus, train_split="probe-train", dev_split="probe-dev", targets=None,
                shuffled=False, feature_cache=None, on_record=None):
    """Train ``probe`` on features of the frozen ``model``.

    ``targets`` maps utterance id -> class id (classification) or token list
    (CTC); by default they come from the manifest.  Returns the probe and the
    EvalRecord stream.  Raises LeakageError if train and dev overlap.
    """
    cfg = probe.config
    train_ids = corpus.manifest.ids(train_split)
    dev_ids = corpus.manifest.ids(dev_split)
    if set(train_ids) & set(dev_ids) or train_split == dev_split:
        raise LeakageError("probe train and dev splits overlap")
    if not train_ids or not dev_ids:
        raise ConfigError("probe training needs non-empty train and dev splits")
    targets = targets or manifest_targets(corpus, cfg.task)
    before = model.checksum()
    cache = feature_cache if feature_cache is not None else {}
    for uid in train_ids + dev_ids:
        if uid not in cache:
            cache[uid] = extract_features(model, corpus.audio[uid]).data
    y_train = [targets[u] for u in train_ids]
    rng = np.random.default_rng([cfg.seed, 7])
    if shuffled:
        y_train = list(class_balanced_shuffle(np.array(y_train), rng))
    x_train = [cache[u] for u in train_ids]
    x_dev = [cache[u] for u in dev_ids]
    y_dev = [targets[u] for u in dev_ids]

    opt = enc.Adam(lr=cfg.lr, warmup=0)
    records = []
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(x_train), size=min(cfg.batch, len(x_train)), replace=False)
        batch = [x_train[i] for i in idx]
        if cfg.spec_augment:
            batch = [spec_augment(FeatureMatrix(b, 50.0, kind="hidden"), rng=rng, **cfg.spec_augment)[0].data
                     for b in batch]
        loss = _batch_loss(probe, batch, [y_train[i] for i in idx], rng, train=True)
        probe.zero_grad()
        loss.backward()
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in probe.params.items()}
        opt.update(probe, grads)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            rec = evaluate_probe(probe, x_dev, y_dev, dev_split, step)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    if model.checksum() != before:
        raise RuntimeError("encoder parameters changed during probe training")
    return probe, records


def manifest_targets(corpus, task):
    if task == "classification":
        return {e.utterance_id: e.label for e in corpus.manifest.entries}
    return {e.utterance_id: list(e.tokens) for e in corpus.manifest.entries}


def save_probe(path, probe, **extra):
    header = {"schema_version": enc.SCHEMA_VERSION, "kind": "probe",
              "config": dataclasses.asdict(probe.config), **extra}
    return container.save(path, header, {"tensors": probe.arrays()})


def load_probe(path):
    header, sections = container.load(path)
    if header.get("kind") != "probe":
        raise FormatError(f"{path}: not a probe checkpoint")
    cfg = ProbeConfig(**header["config"])
    tensors = sections["tensors"]
    return Probe(cfg, {n: tensors[n].astype(np.float64) for n in sorted(tensors)}), header
