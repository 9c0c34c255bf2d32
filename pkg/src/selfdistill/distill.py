"""Iteration orchestration: targets from a teacher, student construction, ΔS accounting."""

import hashlib
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import encoder as enc
from .errors import ConfigError, LeakageError, PlanError
from .features import FeatureMatrix, mfcc39
from .quantizer import assign_labels, fit_kmeans, fit_pca, project, save_codebook, save_labels

log = logging.getLogger(__name__)

TARGET_SOURCES = ("mfcc", "teacher_layer", "teacher_layer_pca")
TRAIN_SPLITS = ("pretrain", "cluster-fit")
FIT_SPLITS = ("cluster-fit",)
HELDOUT_SPLITS = ("probe-dev", "probe-test")


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 3e-3
    warmup: int = 40
    clip_norm: Optional[float] = 10.0
    mask_prob: float = 0.08
    span_len: int = 10
    w_masked: float = 1.0
    w_unmasked: float = 0.1


@dataclass
class IterationPlan:
    index: int
    target_source: str = "mfcc"
    layer: Union[int, str] = "last"
    pca_rank: Optional[int] = None
    k: int = 64
    student: Optional[enc.EncoderConfig] = None
    init: str = "random"
    steps: int = 200
    seed: int = 0
    kmeans_iters: int = 100

    def __post_init__(self):
        if self.target_source not in TARGET_SOURCES:
            raise PlanError(f"unknown target_source {self.target_source!r}")
        if self.target_source == "teacher_layer_pca" and not self.pca_rank:
            raise PlanError("teacher_layer_pca needs pca_rank")
        if self.init not in ("random", "blocked_average"):
            raise PlanError(f"unknown init {self.init!r}")
        if self.index >= 1 and self.student is None:
            raise PlanError(f"iteration {self.index} trains a model and needs a student config")

    @property
    def trains(self):
        return self.index >= 1


@dataclass
class CompressionReport:
    teacher_params: int
    student_params: int
    delta_s: float
    axes: dict = field(default_factory=dict)

    @property
    def delta_s_percent(self):
        return 100.0 * self.delta_s

    @property
    def axis_deltas(self):
        return tuple(a - b for a, b in (self.axes["depth"], self.axes["width"], self.axes["heads"]))

    def to_dict(self):
        return {"teacher_params": self.teacher_params, "student_params": self.student_params,
                "delta_s": self.delta_s, "delta_s_percent": self.delta_s_percent,
                "axes": {k: list(v) for k, v in self.axes.items()},
                "axis_deltas": list(self.axis_deltas)}


def compression_ratio(teacher_params, student_params):
    """Structural compression ΔS = 1 - student/teacher, in percent."""
    if teacher_params <= 0 or student_params <= 0:
        raise ConfigError("parameter counts must be positive")
    return 100.0 * (1.0 - student_params / teacher_params)


def compression_report(teacher_config, student_config):
    t, s = enc.count_parameters(teacher_config), enc.count_parameters(student_config)
    return CompressionReport(t, s, compression_ratio(t, s) / 100.0, {
        "depth": (teacher_config.depth, student_config.depth),
        "width": (teacher_config.emb_dim, student_config.emb_dim),
        "heads": (teacher_config.attn_heads, student_config.attn_heads),
    })


# -- targets ----------------------------------------------------------------------------

def resolve_layer(layer, depth):
    """0-indexed transformer layer id -> hidden-state index (``layer + 1``)."""
    j = depth - 1 if layer == "last" else layer
    if not isinstance(j, (int, np.integer)) or not 0 <= j < depth:
        raise ConfigError(f"layer {layer!r} out of range for a depth-{depth} teacher")
    return int(j) + 1


def layer_features(model, audios, layer):
    """Hidden states of ``layer`` for each buffer, as float64 ``FeatureMatrix`` objects."""
    idx = resolve_layer(layer, model.config.depth)
    out = []
    groups = {}
    for i, a in enumerate(audios):
        groups.setdefault(len(a.samples), []).append(i)
    result = [None] * len(audios)
    rate = 16000 / model.config.total_stride
    for n in sorted(groups):
        ids = groups[n]
        for s in range(0, len(ids), 16):
            chunk = ids[s : s + 16]
            fwd = enc.forward(model, [audios[i] for i in chunk], grad=False)
            h = fwd.hidden_states[idx].data.astype(np.float64)
            for r, i in enumerate(chunk):
                result[i] = FeatureMatrix(h[r], rate, audios[i].utterance_id, "hidden")
    out.extend(result)
    return out


def _fit_and_assign(feats_by_id, fit_ids, k, pca_rank, seed, kmeans_iters):
    pooled = np.concatenate([feats_by_id[u].data for u in fit_ids])
    pca = None
    if pca_rank:
        pca = fit_pca(pooled, pca_rank)
        pooled = project(pca, pooled)
    codebook = fit_kmeans(pooled, k, max_iters=kmeans_iters, seed=seed, pca=pca)
    labels = {u: assign_labels(codebook, f) for u, f in feats_by_id.items()}
    return codebook, labels


def _fit_ids(corpus, fit_splits):
    ids = corpus.manifest.ids(*fit_splits)
    for u in ids:
        if corpus.manifest.split_of(u) not in FIT_SPLITS:
            raise LeakageError(f"utterance {u} from split {corpus.manifest.split_of(u)} would enter k-means fitting")
    if not ids:
        raise ConfigError("no utterances in the cluster-fit split")
    return ids


def mfcc_targets(corpus, k, seed=0, pca_rank=None, label_splits=None, kmeans_iters=100):
    """Iteration-0 codebook and labels from 39-d MFCCs."""
    fit_ids = _fit_ids(corpus, FIT_SPLITS)
    ids = corpus.manifest.ids(*(label_splits or TRAIN_SPLITS + HELDOUT_SPLITS))
    feats = {u: mfcc39(corpus.audio[u]) for u in sorted(set(ids) | set(fit_ids))}
    return _fit_and_assign(feats, fit_ids, k, pca_rank, seed, kmeans_iters)


def generate_targets(teacher, corpus, layer="last", pca_rank=None, k=64, seed=0, label_splits=None,
                     kmeans_iters=100):
    """Cluster a teacher layer (optionally PCA-compressed) into pseudo-labels.

    The codebook is fitted on cluster-fit frames only and then applied to
    every utterance of ``label_splits`` (training plus held-out by default).
    """
    resolve_layer(layer, teacher.config.depth)
    fit_ids = _fit_ids(corpus, FIT_SPLITS)
    ids = sorted(set(corpus.manifest.ids(*(label_splits or TRAIN_SPLITS + HELDOUT_SPLITS))) | set(fit_ids))
    feats = dict(zip(ids, layer_features(teacher, [corpus.audio[u] for u in ids], layer)))
    return _fit_and_assign(feats, fit_ids, k, pca_rank, seed, kmeans_iters)


def label_cache_key(teacher_checksum, layer, pca_rank, k, seed):
    blob = json.dumps([teacher_checksum, layer, pca_rank, k, seed]).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def write_targets(directory, codebook, labels, **provenance):
    """Write codebook + one label file per utterance; refuses to overwrite (write-once)."""
    os.makedirs(os.path.join(directory, "labels"), exist_ok=True)
    path = os.path.join(directory, "codebook.bin")
    if os.path.exists(path):
        raise FileExistsError(f"{path} already written")
    save_codebook(path, codebook, **provenance)
    for uid in sorted(labels):
        save_labels(os.path.join(directory, "labels", uid + ".lab"), labels[uid], **provenance)


# -- student construction ----------------------------------------------------------------

def blocked_avg_init(teacher, student_config, seed=0):
    """Student layer s = element-wise mean of teacher layers in contiguous block s.

    Non-layer tensors are copied when shapes match.  Width mismatch (emb or
    FFN dim) falls back to random init with a warning.
    """
    tcfg = teacher.config
    if tcfg.depth % student_config.depth:
        raise ConfigError(f"student depth {student_config.depth} does not divide teacher depth {tcfg.depth}")
    if tcfg.emb_dim != student_config.emb_dim or tcfg.ffn_dim != student_config.ffn_dim:
        warnings.warn("student width differs from teacher; using random init", RuntimeWarning, stacklevel=2)
        log.warning("blocked averaging needs equal widths; falling back to random init")
        return enc.build_model(student_config, seed=seed, dtype=teacher.dtype)
    student = enc.build_model(student_config, seed=seed, dtype=teacher.dtype)
    block = tcfg.depth // student_config.depth
    t = teacher.arrays()
    for name, param in student.params.items():
        if name.startswith("layers."):
            s = int(name.split(".")[1])
            suffix = name[len(enc.layer_prefix(s)):]
            members = [t[enc.layer_prefix(j) + suffix].astype(np.float64)
                       for j in range(s * block, (s + 1) * block)]
            param.data = (np.sum(members, axis=0) / block).astype(teacher.dtype)
        elif name in t and t[name].shape == param.data.shape:
            param.data = t[name].copy()
    return student


def build_student(plan, teacher):
    if plan.init == "blocked_average":
        if teacher is None:
            raise PlanError(f"iteration {plan.index}: blocked_average init needs a teacher")
        return blocked_avg_init(teacher, plan.student, seed=plan.seed)
    return enc.build_model(plan.student, seed=plan.seed)


# -- training loop ------------------------------------------------------------------------

@dataclass
class IterationResult:
    plan: IterationPlan
    model: Optional[enc.Model]
    codebook: object
    labels: dict
    metrics: list
    report: Optional[CompressionReport]
    heldout: Optional[dict] = None

    @property
    def initial_loss(self):
        return self.metrics[0]["loss_total"]

    @property
    def final_loss(self):
        """Mean total loss over the last 10 steps."""
        return float(np.mean([m["loss_total"] for m in self.metrics[-10:]]))


def train_model(model, items, steps, train, seed, on_step=None):
    """Run ``steps`` seeded updates on ``items`` = [(AudioBuffer, labels)]; returns metrics."""
    spec = enc.MaskSpec(train.mask_prob, train.span_len, seed)
    opt = enc.Adam(lr=train.lr, warmup=train.warmup, clip_norm=train.clip_norm)
    rng = np.random.default_rng([seed, 1])
    metrics = []
    for _ in range(steps):
        idx = rng.choice(len(items), size=min(train.batch_size, len(items)), replace=False)
        rec = enc.train_step(model, [items[i] for i in sorted(idx)], spec, opt,
                             train.w_masked, train.w_unmasked)
        metrics.append(rec)
        if on_step is not None:
            on_step(rec)
    return metrics, opt


def asdict_shallow(obj):
    return {f: getattr(obj, f) for f in obj.__dataclass_fields__}


def run_iteration(plan, teacher, corpus, train=None, labels=None, codebook=None, teacher_iteration=None):
    """Targets (unless given) then training; returns an ``IterationResult``.

    Iteration 0 only produces MFCC labels.  ``teacher_iteration``, when known,
    must be ``plan.index - 1``.
    """
    train = train or TrainConfig()
    if teacher_iteration is not None and teacher_iteration != plan.index - 1:
        raise PlanError(f"iteration {plan.index} targets must come from iteration {plan.index - 1}, "
                        f"got a teacher from iteration {teacher_iteration}")
    if labels is None:
        if plan.target_source == "mfcc":
            codebook, labels = mfcc_targets(corpus, plan.k, plan.seed, plan.pca_rank,
                                            kmeans_iters=plan.kmeans_iters)
        else:
            if teacher is None:
                raise PlanError(f"iteration {plan.index}: {plan.target_source} targets need a teacher")
            rank = plan.pca_rank if plan.target_source == "teacher_layer_pca" else None
            codebook, labels = generate_targets(teacher, corpus, plan.layer, rank, plan.k, plan.seed,
                                                kmeans_iters=plan.kmeans_iters)
    if not plan.trains:
        return IterationResult(plan, None, codebook, labels, [], None)

    student_cfg = plan.student.replace(n_labels=plan.k) if plan.student.n_labels != plan.k else plan.student
    plan_eff = IterationPlan(**{**asdict_shallow(plan), "student": student_cfg})
    model = build_student(plan_eff, teacher)
    train_ids = corpus.manifest.ids(*TRAIN_SPLITS)
    heldout_ids = corpus.manifest.ids(*HELDOUT_SPLITS)
    corpus.manifest.check_disjoint(train_ids, heldout_ids)
    items = [(corpus.audio[u], labels[u]) for u in train_ids]
    metrics, _ = train_model(model, items, plan.steps, train, plan.seed)
    heldout = None
    held_items = [(corpus.audio[u], labels[u]) for u in heldout_ids if u in labels]
    if held_items:
        spec = enc.MaskSpec(train.mask_prob, train.span_len, plan.seed + 1)
        heldout = enc.evaluate_masked(model, held_items, spec, train.w_masked, train.w_unmasked)
    tcfg = teacher.config if teacher is not None else student_cfg
    report = compression_report(tcfg, student_cfg)
    return IterationResult(plan, model, codebook, labels, metrics, report, heldout)


def run_schedule(plans, corpus, train=None):
    """Run plans in order, each iteration's model becoming the next teacher."""
    results = []
    teacher, teacher_iter = None, None
    for plan in plans:
        res = run_iteration(plan, teacher, corpus, train, teacher_iteration=teacher_iter)
        results.append(res)
        if res.model is not None:
            teacher, teacher_iter = res.model, plan.index
    return results


def pca_ablation(plan, teacher, corpus, train=None):
    """Train ``plan`` twice: with PCA on the supervision features and without.

    Returns ``{"pca": IterationResult, "no_pca": IterationResult}``.
    """
    if not plan.pca_rank:
        raise PlanError("the PCA ablation needs a plan with pca_rank")
    with_pca = IterationPlan(**{**asdict_shallow(plan), "target_source": "teacher_layer_pca"})
    without = IterationPlan(**{**asdict_shallow(plan), "target_source": "teacher_layer", "pca_rank": None})
    return {"pca": run_iteration(with_pca, teacher, corpus, train),
            "no_pca": run_iteration(without, teacher, corpus, train)}


def plan_to_dict(plan):
    d = asdict_shallow(plan)
    d["student"] = plan.student.to_dict() if plan.student is not None else None
    return d


def report_to_json(report):
    return json.dumps(report.to_dict(), sort_keys=True)

