"""CNN + transformer speech encoder trained by masked pseudo-label prediction."""

import dataclasses
import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from . import container
from .autograd import Tensor
from .errors import (AlignmentError, ConfigError, EmptyInputError, FormatError, LabelRangeError,
                     NumericError, UsageError)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    depth: int
    emb_dim: int
    ffn_dim: int
    attn_heads: int
    proj_dim: int = 768
    n_labels: int = 1000
    cnn_strides: tuple = (5, 2, 2, 2, 2, 2, 2)
    cnn_kernels: tuple = (10, 3, 3, 3, 3, 2, 2)
    cnn_channels: int = 512
    pos_conv_kernel: int = 128
    pos_conv_groups: int = 16
    head: str = "cosine"
    temperature: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "cnn_strides", tuple(int(s) for s in self.cnn_strides))
        object.__setattr__(self, "cnn_kernels", tuple(int(k) for k in self.cnn_kernels))

    def validate(self):
        if len(self.cnn_strides) != 7 or len(self.cnn_kernels) != 7:
            raise ConfigError("CNN stride and kernel lists must have 7 entries")
        for name in ("depth", "emb_dim", "ffn_dim", "attn_heads", "proj_dim", "n_labels",
                     "cnn_channels", "pos_conv_kernel", "pos_conv_groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.emb_dim % self.attn_heads:
            raise ConfigError(f"emb_dim {self.emb_dim} not divisible by attn_heads {self.attn_heads}")
        if self.emb_dim % self.pos_conv_groups:
            raise ConfigError(f"emb_dim {self.emb_dim} not divisible by pos_conv_groups {self.pos_conv_groups}")
        if self.head not in ("cosine", "linear"):
            raise ConfigError(f"unknown head {self.head!r}")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["cnn_strides"] = list(self.cnn_strides)
        d["cnn_kernels"] = list(self.cnn_kernels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def total_stride(self):
        return int(np.prod(self.cnn_strides))


_TINY = dict(proj_dim=16, n_labels=64, cnn_channels=16, pos_conv_kernel=16, pos_conv_groups=4)

PRESETS = {
    # Full-size architecture grid.
    "large": EncoderConfig(depth=24, emb_dim=1024, ffn_dim=4096, attn_heads=16),
    "shallow": EncoderConfig(depth=4, emb_dim=1024, ffn_dim=2048, attn_heads=16),
    "shallow_thin": EncoderConfig(depth=4, emb_dim=512, ffn_dim=2048, attn_heads=16),
    "shallow_few_heads": EncoderConfig(depth=4, emb_dim=1024, ffn_dim=2048, attn_heads=4),
    # Desk-scale analogues used by the bundled pipeline.
    "tiny_large": EncoderConfig(depth=4, emb_dim=32, ffn_dim=64, attn_heads=4, **_TINY),
    "tiny_shallow": EncoderConfig(depth=2, emb_dim=32, ffn_dim=64, attn_heads=4, **_TINY),
    "tiny_shallow_thin": EncoderConfig(depth=2, emb_dim=16, ffn_dim=64, attn_heads=4, **_TINY),
}


def preset(name, **overrides):
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown encoder preset {name!r}") from None
    return cfg.replace(**overrides).validate()


def count_parameters(config):
    """Closed-form parameter count (no tensors are allocated)."""
    c, d, f, p = config.cnn_channels, config.emb_dim, config.ffn_dim, config.proj_dim
    cnn = sum(c_in * c * k for c_in, k in zip([1] + [c] * 6, config.cnn_kernels)) + 7 * 2 * c
    front = 2 * c + c * d + d + d  # feature layer norm, projection, mask embedding
    pos = d * (d // config.pos_conv_groups) * config.pos_conv_kernel + d
    layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    head = 2 * d + d * p + p + config.n_labels * p
    return cnn + front + pos + config.depth * layer + head


def parameter_shapes(config):
    c, d, f, p = config.cnn_channels, config.emb_dim, config.ffn_dim, config.proj_dim
    shapes = {}
    c_in = 1
    for i, k in enumerate(config.cnn_kernels):
        shapes[f"cnn.{i}.weight"] = (c, c_in, k)
        shapes[f"cnn.{i}.ln.weight"] = (c,)
        shapes[f"cnn.{i}.ln.bias"] = (c,)
        c_in = c
    shapes["feature_ln.weight"] = (c,)
    shapes["feature_ln.bias"] = (c,)
    shapes["feature_proj.weight"] = (c, d)
    shapes["feature_proj.bias"] = (d,)
    shapes["mask_emb"] = (d,)
    shapes["pos_conv.weight"] = (d, d // config.pos_conv_groups, config.pos_conv_kernel)
    shapes["pos_conv.bias"] = (d,)
    for i in range(config.depth):
        pre = f"layers.{i:03d}."
        for n in ("q", "k", "v", "o"):
            shapes[pre + f"attn.{n}.weight"] = (d, d)
            shapes[pre + f"attn.{n}.bias"] = (d,)
        shapes[pre + "ffn.fc1.weight"] = (d, f)
        shapes[pre + "ffn.fc1.bias"] = (f,)
        shapes[pre + "ffn.fc2.weight"] = (f, d)
        shapes[pre + "ffn.fc2.bias"] = (d,)
        for n in ("ln1", "ln2"):
            shapes[pre + f"{n}.weight"] = (d,)
            shapes[pre + f"{n}.bias"] = (d,)
    shapes["final_ln.weight"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["final_proj.weight"] = (d, p)
    shapes["final_proj.bias"] = (p,)
    shapes["label_emb"] = (config.n_labels, p)
    return shapes


def layer_prefix(i):
    return f"layers.{i:03d}."


def _fans(name, shape):
    if name.endswith("weight") and len(shape) == 3:
        return shape[1] * shape[2], shape[0] * shape[2]
    if len(shape) == 2:
        return shape[0], shape[1]
    return 1, shape[0]


def _init_tensor(name, shape, rng, dtype):
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=dtype)
    parts = name.split(".")
    if len(parts) > 1 and "ln" in parts[-2] and parts[-1] == "weight":
        return np.ones(shape, dtype=dtype)
    fan_in, fan_out = _fans(name, shape)
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Model:
    """Parameters plus config; the forward pass lives in module-level functions."""

    def __init__(self, config, params, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {n: p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=self.dtype), True)
                       for n, p in params.items()}

    def __getitem__(self, name):
        return self.params[name]

    def arrays(self):
        return {n: t.data for n, t in self.params.items()}

    def num_parameters(self):
        return sum(t.data.size for t in self.params.values())

    def checksum(self):
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def copy(self):
        return Model(self.config, {n: t.data.copy() for n, t in self.params.items()}, self.dtype)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None


def build_model(config, init="random", seed=0, teacher=None, dtype=np.float32):
    """Instantiate parameters for ``config``.

    ``init="random"`` draws weight matrices from U(-a, a), a = sqrt(6/(fan_in+fan_out)),
    with zero biases and unit layer-norm gains.  ``init="from-teacher"`` copies
    every teacher tensor whose name and shape match and draws the rest.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    shapes = parameter_shapes(config)
    for name in sorted(shapes):
        params[name] = _init_tensor(name, shapes[name], rng, dtype)
    if init == "from-teacher":
        if teacher is None:
            raise ConfigError("from-teacher init needs a teacher model")
        for name, arr in teacher.arrays().items():
            if name in params and params[name].shape == arr.shape:
                params[name] = arr.astype(dtype, copy=True)
    elif init != "random":
        raise ConfigError(f"unknown init {init!r}")
    return Model(config, params, dtype)


# -- forward -------------------------------------------------------------------------

def cnn_lengths(n_samples, config):
    lengths = []
    n = n_samples
    for k, s in zip(config.cnn_kernels, config.cnn_strides):
        n = (n - k) // s + 1
        if n < 1:
            return lengths + [0]
        lengths.append(n)
    return lengths


def cnn_output_length(n_samples, config):
    return cnn_lengths(n_samples, config)[-1]


def _as_batch(audio, dtype):
    if hasattr(audio, "samples"):
        x = audio.samples[None, :]
    elif isinstance(audio, (list, tuple)):
        x = np.stack([a.samples if hasattr(a, "samples") else np.asarray(a) for a in audio])
    else:
        x = np.asarray(audio)
        x = x[None, :] if x.ndim == 1 else x
    return x.astype(dtype)


def _normalize_wave(x):
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(sd * sd + 1e-5)


def cnn_forward(model, audio, params=None):
    """Waveform(s) -> (B, T', cnn_channels) features at 1/320 of the sample rate."""
    P = model.params if params is None else params
    cfg = model.config
    x = _as_batch(audio, model.dtype)
    if cnn_output_length(x.shape[1], cfg) < 1:
        raise EmptyInputError(f"{x.shape[1]} samples is shorter than the CNN receptive field")
    h = Tensor(_normalize_wave(x)[..., None])
    for i, (k, s) in enumerate(zip(cfg.cnn_kernels, cfg.cnn_strides)):
        h = ag.conv1d(h, P[f"cnn.{i}.weight"], stride=s)
        h = ag.layer_norm(h, P[f"cnn.{i}.ln.weight"], P[f"cnn.{i}.ln.bias"])
        h = ag.gelu(h)
    return h


def _linear(x, P, name):
    return ag.add(ag.matmul(x, P[name + ".weight"]), P[name + ".bias"])


def attention(x, P, prefix, heads):
    """Multi-head self-attention over (B, T, D); returns output and weights (B, h, T, T)."""
    b, t, d = x.shape
    dh = d // heads

    def split(name):
        return ag.transpose(ag.reshape(_linear(x, P, prefix + name), (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = ag.softmax(scores, axis=-1)
    ctx = ag.reshape(ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
    return _linear(ctx, P, prefix + "o"), weights.data


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, T', k)
    hidden_states: list  # depth + 1 tensors of (B, T', emb_dim)
    projections: Tensor  # (B, T', proj_dim)
    attention: Optional[list] = None


def _check(t, layer):
    if not np.isfinite(t.data).all():
        raise NumericError("non-finite activation", layer)


def forward(model, audio, mask=None, return_attention=False, grad=True):
    """Full encoder pass.

    ``hidden_states[0]`` is the transformer input (projected CNN features
    plus positional convolution); ``hidden_states[j + 1]`` is the output of
    transformer layer ``j`` (0-indexed).  With ``grad=False`` the pass runs
    on detached parameters and builds no graph.
    """
    cfg = model.config
    P = model.params if grad else {n: Tensor(t.data) for n, t in model.params.items()}
    feats = cnn_forward(model, audio, P)
    _check(feats, "cnn")
    x = ag.layer_norm(feats, P["feature_ln.weight"], P["feature_ln.bias"])
    x = _linear(x, P, "feature_proj")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        m = m[None, :] if m.ndim == 1 else m
        if m.shape != x.shape[:2]:
            raise AlignmentError(f"mask shape {m.shape} does not match frames {x.shape[:2]}")
        x = ag.blend_rows(x, m, P["mask_emb"])
    kpos = cfg.pos_conv_kernel
    pad = (kpos // 2, kpos // 2 - (1 - kpos % 2))
    pos = ag.conv1d(x, P["pos_conv.weight"], P["pos_conv.bias"], padding=pad, groups=cfg.pos_conv_groups)
    x = ag.add(x, ag.gelu(pos))
    _check(x, 0)
    hidden = [x]
    attn_maps = []
    for i in range(cfg.depth):
        pre = layer_prefix(i)
        a, w = attention(ag.layer_norm(x, P[pre + "ln1.weight"], P[pre + "ln1.bias"]), P,
                         pre + "attn.", cfg.attn_heads)
        x = ag.add(x, a)
        h = ag.layer_norm(x, P[pre + "ln2.weight"], P[pre + "ln2.bias"])
        h = _linear(ag.gelu(_linear(h, P, pre + "ffn.fc1")), P, pre + "ffn.fc2")
        x = ag.add(x, h)
        _check(x, i + 1)
        hidden.append(x)
        if return_attention:
            attn_maps.append(w)
    y = ag.layer_norm(x, P["final_ln.weight"], P["final_ln.bias"])
    proj = _linear(y, P, "final_proj")
    emb = P["label_emb"]
    if cfg.head == "cosine":
        logits = ag.mul(ag.matmul(ag.l2_normalize(proj), ag.transpose(ag.l2_normalize(emb), (1, 0))),
                        1.0 / cfg.temperature)
    else:
        logits = ag.matmul(proj, ag.transpose(emb, (1, 0)))
    _check(logits, "head")
    return ForwardOutput(logits, hidden, proj, attn_maps if return_attention else None)


# -- masking and loss ------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    mask_prob: float = 0.08
    span_len: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must lie in [0, 1]")
        if self.span_len < 1:
            raise ConfigError("span_len must be >= 1")


def mask_spans(T, spec, rng=None):
    """Boolean mask of length T: random span starts with probability p, spans unioned."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    starts = rng.random(T) < spec.mask_prob
    mask = np.zeros(T, dtype=bool)
    for s in np.flatnonzero(starts):
        mask[s : s + spec.span_len] = True
    return mask


@dataclass
class LossResult:
    total: Tensor
    masked_ce: float
    unmasked_ce: float
    masked_acc: float
    n_masked: int
    n_unmasked: int


def _region_weights(mask, w_m, w_u):
    n_m = int(mask.sum())
    n_u = int(mask.size - n_m)
    weights = np.where(mask, w_m / max(n_m, 1), w_u / max(n_u, 1))
    return weights, n_m, n_u


def masked_pred_loss(logits, labels, mask, w_m=1.0, w_u=0.1, weights=None):
    """``w_m * mean CE(masked) + w_u * mean CE(unmasked)``; an empty region adds 0.

    ``logits`` is (..., T, k), ``labels`` and ``mask`` broadcast to (..., T).
    ``weights`` overrides the per-frame weights (used to share frame counts
    across several forward groups in one batch).
    """
    if w_m < 0 or w_u < 0 or w_m + w_u <= 0:
        raise ConfigError("loss weights must be >= 0 with a positive sum")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    k = logits.shape[-1]
    y = np.asarray(getattr(labels, "labels", labels), dtype=np.int64).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    flat = ag.reshape(logits, (-1, k))
    if y.shape[0] != flat.shape[0] or m.shape[0] != flat.shape[0]:
        raise AlignmentError(f"{flat.shape[0]} logit frames vs {y.shape[0]} labels / {m.shape[0]} mask")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise LabelRangeError(f"label outside [0, {k})")
    w, n_m, n_u = _region_weights(m, w_m, w_u)
    if weights is not None:
        w = np.asarray(weights).reshape(-1)
    total = ag.weighted_cross_entropy(flat, y, w)

    z = flat.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ce = np.log(np.exp(z).sum(axis=1)) - z[np.arange(y.size), y]
    pred = flat.data.argmax(axis=1)
    return LossResult(
        total,
        float(ce[m].mean()) if n_m else 0.0,
        float(ce[~m].mean()) if n_u else 0.0,
        float((pred[m] == y[m]).mean()) if n_m else 0.0,
        n_m,
        n_u,
    )


def backward(model, loss):
    """Exact gradients of scalar ``loss`` for every parameter, keyed by name."""
    t = loss.total if isinstance(loss, LossResult) else loss
    if not isinstance(t, Tensor) or not t.requires_grad:
        raise UsageError("loss carries no gradient graph; run forward with grad=True")
    model.zero_grad()
    t.backward()
    return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in model.params.items()}


# -- optimisation -----------------------------------------------------------------------

class Adam:
    """Adam with linear warmup then inverse-square-root decay."""

    def __init__(self, lr=2e-3, warmup=50, betas=(0.9, 0.98), eps=1e-8, clip_norm=None):
        self.lr = lr
        self.warmup = warmup
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step = 0
        self.m = {}
        self.v = {}

    def rate(self, step):
        if self.lr == 0:
            return 0.0
        if self.warmup <= 0:
            return self.lr
        if step <= self.warmup:
            return self.lr * step / self.warmup
        return self.lr * np.sqrt(self.warmup / step)

    def update(self, model, grads):
        self.step += 1
        lr = self.rate(self.step)
        b1, b2 = self.betas
        scale = 1.0
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name in sorted(grads):
            p = model.params[name]
            g = grads[name] * scale
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.step)
            vhat = v / (1 - b2**self.step)
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
        return lr

    def state(self):
        arrays = {}
        for n in self.m:
            arrays["m." + n] = self.m[n]
            arrays["v." + n] = self.v[n]
        meta = {"lr": self.lr, "warmup": self.warmup, "betas": list(self.betas), "eps": self.eps,
                "clip_norm": self.clip_norm, "step": self.step}
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        opt = cls(meta["lr"], meta["warmup"], tuple(meta["betas"]), meta["eps"], meta["clip_norm"])
        opt.step = meta["step"]
        for key, arr in arrays.items():
            kind, name = key.split(".", 1)
            (opt.m if kind == "m" else opt.v)[name] = arr
        return opt


def align(labels, n_frames, max_gap=2):
    """Trim labels to ``n_frames`` (or report how many logit frames to drop)."""
    y = np.asarray(getattr(labels, "labels", labels))
    gap = abs(y.size - n_frames)
    if gap > max_gap:
        raise AlignmentError(f"label length {y.size} vs {n_frames} encoder frames (gap {gap} > {max_gap})")
    return y[: min(y.size, n_frames)]


def train_step(model, batch, spec, optimizer, w_m=1.0, w_u=0.1):
    """One optimizer update on ``batch`` = [(AudioBuffer, labels), ...].

    Masks are drawn from a generator seeded by ``(spec.seed, step)`` so a run
    is reproducible.  Utterances of equal length share one forward pass.
    """
    step = optimizer.step + 1
    rng = np.random.default_rng([spec.seed, step])
    items = []
    for audio, labels in batch:
        n = len(audio.samples) if hasattr(audio, "samples") else len(audio)
        t = cnn_output_length(n, model.config)
        y = align(labels, t)
        items.append((audio, y, mask_spans(y.size, spec, rng)))
    all_mask = np.concatenate([m for _, _, m in items])
    n_m = int(all_mask.sum())
    n_u = all_mask.size - n_m

    groups = {}
    for i, (audio, y, m) in enumerate(items):
        n = len(audio.samples) if hasattr(audio, "samples") else len(audio)
        groups.setdefault(n, []).append(i)

    total = None
    ce_m = ce_u = correct = 0.0
    for n in sorted(groups):
        idx = groups[n]
        audios = [items[i][0] for i in idx]
        t = cnn_output_length(n, model.config)
        mask = np.zeros((len(idx), t), dtype=bool)
        ys = np.zeros((len(idx), t), dtype=np.int64)
        keep = np.zeros((len(idx), t), dtype=bool)
        for r, i in enumerate(idx):
            _, y, m = items[i]
            mask[r, : y.size] = m
            ys[r, : y.size] = y
            keep[r, : y.size] = True
        out = forward(model, audios, mask=mask)
        w = np.where(mask, w_m / max(n_m, 1), w_u / max(n_u, 1)) * keep
        res = masked_pred_loss(out.logits, ys, mask, w_m, w_u, weights=w)
        total = res.total if total is None else ag.add(total, res.total)
        m_flat, k_flat = mask.reshape(-1), keep.reshape(-1)
        z = out.logits.data.reshape(-1, out.logits.shape[-1]).astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        ce = np.log(np.exp(z).sum(axis=1)) - z[np.arange(z.shape[0]), ys.reshape(-1)]
        ce_m += ce[m_flat & k_flat].sum()
        ce_u += ce[~m_flat & k_flat].sum()
        correct += (z.argmax(axis=1) == ys.reshape(-1))[m_flat & k_flat].sum()

    grads = backward(model, total)
    lr = optimizer.update(model, grads)
    return {
        "step": step,
        "loss_total": float(total.data),
        "loss_masked": float(ce_m / n_m) if n_m else 0.0,
        "loss_unmasked": float(ce_u / n_u) if n_u else 0.0,
        "masked_acc": float(correct / n_m) if n_m else 0.0,
        "lr": float(lr),
    }


def evaluate_masked(model, items, spec, w_m=1.0, w_u=0.1):
    """Masked-prediction metrics without updating ``model`` (held-out check)."""
    rng = np.random.default_rng([spec.seed, 0])
    ce_m = ce_u = correct = 0.0
    n_m = n_u = 0
    for audio, labels in items:
        t = cnn_output_length(len(audio.samples), model.config)
        y = align(labels, t)
        m = mask_spans(y.size, spec, rng)
        mask = np.zeros(t, dtype=bool)
        mask[: y.size] = m
        out = forward(model, audio, mask=mask, grad=False)
        z = out.logits.data[0, : y.size].astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        ce = np.log(np.exp(z).sum(axis=1)) - z[np.arange(y.size), y]
        ce_m += ce[m].sum()
        ce_u += ce[~m].sum()
        correct += (z.argmax(axis=1) == y)[m].sum()
        n_m += int(m.sum())
        n_u += int((~m).sum())
    lm = ce_m / n_m if n_m else 0.0
    lu = ce_u / n_u if n_u else 0.0
    return {"loss_total": float(w_m * lm + w_u * lu), "loss_masked": float(lm), "loss_unmasked": float(lu),
            "masked_acc": float(correct / n_m) if n_m else 0.0, "n_masked": n_m}


# -- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, model, optimizer=None, **extra):
    header = {"schema_version": SCHEMA_VERSION, "kind": "encoder", "config": model.config.to_dict(), **extra}
    sections = {"tensors": model.arrays()}
    if optimizer is not None:
        meta, arrays = optimizer.state()
        header["optimizer"] = meta
        sections["optimizer"] = arrays
    return container.save(path, header, sections)


def load_checkpoint(path, dtype=np.float32):
    header, sections = container.load(path)
    if header.get("schema_version") != SCHEMA_VERSION or header.get("kind") != "encoder":
        raise FormatError(f"{path}: not an encoder checkpoint of schema {SCHEMA_VERSION}")
    config = EncoderConfig.from_dict(header["config"]).validate()
    expected = parameter_shapes(config)
    tensors = sections.get("tensors", {})
    if set(tensors) != set(expected):
        raise FormatError(f"{path}: tensor set does not match config")
    model = Model(config, {n: tensors[n].astype(dtype) for n in sorted(tensors)}, dtype)
    opt = None
    if "optimizer" in header:
        opt = Adam.from_state(header["optimizer"], sections.get("optimizer", {}))
    return model, opt, header
