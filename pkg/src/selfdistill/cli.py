"""Experiment runner: ``python -m selfdistill <command> --config PATH [--seed N] [--out DIR] [--iteration K]``.

Every stage writes into ``<out>/<stage>/<iteration>/`` together with a
``provenance.json`` holding the stage config hash, the seed and the
checksums of its inputs and outputs.  A stage whose provenance matches is
reused; one whose config hash differs raises a stale-cache error unless
``--force`` is given.
"""

import argparse
import copy
import hashlib
import json
import logging
import os
import shutil
import sys
import warnings

import numpy as np
import yaml

from . import distill as ds
from . import encoder as enc
from . import probes as pr
from .corpus import load_corpus, synth_corpus, write_wav
from .errors import ConfigError, DependencyError, PipelineError, PlanError, StaleCacheError
from .features import load_features, mfcc39, save_features
from .quantizer import load_codebook, load_labels

log = logging.getLogger("selfdistill")

COMMANDS = ("synth", "features", "quantize", "targets", "pretrain", "distill", "probe", "eval", "report", "run-all")

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs/synthetic",
    "corpus": {"n_utts": 64, "duration_s": 2.0, "n_classes": 4, "n_tokens": 16, "split_fractions": None},
    "features": {"win": 400, "hop": 320, "n_mels": 26, "n_fft": 512},
    "quantizer": {"k": 64, "kmeans_iters": 100, "mfcc_pca_rank": None},
    "train": {"batch_size": 8, "lr": 3e-3, "warmup": 40, "clip_norm": 10.0, "mask_prob": 0.08,
              "span_len": 10, "w_masked": 1.0, "w_unmasked": 0.1},
    "iterations": [
        {"target_source": "mfcc", "student": "tiny_large", "steps": 200},
        {"target_source": "teacher_layer", "layer": 1, "student": "tiny_large", "steps": 200},
        {"target_source": "teacher_layer_pca", "layer": "last", "pca_rank": 16, "student": "tiny_shallow",
         "init": "blocked_average", "steps": 200},
    ],
    "distill": {"pca_ablation": True},
    "probe": {"tasks": ["classification"], "steps": 300, "eval_every": 100, "batch": 4, "lr": 1e-3,
              "hidden": 80, "dropout": 0.4, "shuffled_control": True, "spec_augment": None},
}


# -- config -------------------------------------------------------------------------------

def deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, seed=None, out=None):
    """Defaults, then the YAML file, then command-line flags."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
    unknown = set(raw) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg = deep_merge(DEFAULT_CONFIG, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = out
    plans(cfg)  # validates presets and target sources
    return cfg


def student_config(spec, k):
    if isinstance(spec, str):
        spec = {"preset": spec}
    spec = dict(spec)
    name = spec.pop("preset", None)
    if name is None:
        raise ConfigError("student needs a preset name")
    try:
        return enc.preset(name, n_labels=k, **spec)
    except TypeError as exc:
        raise ConfigError(f"bad student override: {exc}") from None


def plans(cfg):
    """Iteration plans 1..n from the config (iteration 0 is the MFCC quantize stage)."""
    k = cfg["quantizer"]["k"]
    out = []
    for i, raw in enumerate(cfg["iterations"], start=1):
        raw = dict(raw)
        if raw.pop("index", i) != i:
            raise PlanError("iterations must be listed in order starting at 1")
        raw.setdefault("k", k)
        raw.setdefault("seed", cfg["seed"])
        raw.setdefault("kmeans_iters", cfg["quantizer"]["kmeans_iters"])
        raw["student"] = student_config(raw.get("student", "tiny_shallow"), raw["k"])
        try:
            plan = ds.IterationPlan(index=i, **raw)
        except TypeError as exc:
            raise ConfigError(f"iteration {i}: {exc}") from None
        if i == 1 and plan.target_source != "mfcc":
            raise PlanError("iteration 1 has no teacher, so its targets must be mfcc")
        if i > 1 and plan.target_source == "mfcc":
            raise PlanError(f"iteration {i}: mfcc targets are only used by iteration 1")
        out.append(plan)
    if not out:
        raise PlanError("config lists no iterations")
    return out


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


# -- stage bookkeeping ----------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_dir(cfg, stage, iteration):
    return os.path.join(cfg["out"], stage, str(iteration))


def _listing(directory):
    files = {}
    for root, _, names in os.walk(directory):
        for name in names:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, directory).replace(os.sep, "/")
            if rel != "provenance.json":
                files[rel] = sha256_file(path)
    return dict(sorted(files.items()))


def require(cfg, stage, iteration):
    """Directory of a finished upstream stage, or DependencyError naming it."""
    d = stage_dir(cfg, stage, iteration)
    if not os.path.exists(os.path.join(d, "provenance.json")):
        raise DependencyError(f"missing upstream artifact: run the {stage!r} stage for iteration {iteration} first "
                              f"(expected {d})")
    return d


def run_stage(cfg, stage, iteration, sections, upstream, produce, force=False):
    """Run ``produce(dir)`` unless a matching cached result exists.

    ``sections`` is the config slice the stage depends on; ``upstream`` lists
    (stage, iteration) pairs whose provenance files are the inputs.
    """
    d = stage_dir(cfg, stage, iteration)
    inputs = {f"{s}/{i}": sha256_file(os.path.join(require(cfg, s, i), "provenance.json")) for s, i in upstream}
    chash = config_hash({"stage": stage, "iteration": iteration, "seed": cfg["seed"], "config": sections})
    prov_path = os.path.join(d, "provenance.json")
    if os.path.exists(prov_path):
        with open(prov_path) as fh:
            prov = json.load(fh)
        if prov.get("config_hash") != chash and not force:
            raise StaleCacheError(f"{d} was built with config hash {prov.get('config_hash', '?')[:12]}, "
                                  f"current is {chash[:12]}; rerun with --force or use a fresh --out")
        if prov.get("config_hash") == chash and prov.get("inputs") == inputs and _listing(d) == prov.get("outputs"):
            log.info("%s/%s: cached", stage, iteration)
            return d
    if os.path.exists(d):
        shutil.rmtree(d)
    os.makedirs(d)
    produce(d)
    prov = {"stage": stage, "iteration": iteration, "seed": cfg["seed"], "config_hash": chash,
            "config": sections, "inputs": inputs, "outputs": _listing(d)}
    with open(prov_path, "w") as fh:
        json.dump(prov, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")
    log.info("%s/%s: done", stage, iteration)
    return d


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _corpus(cfg):
    return load_corpus(os.path.join(require(cfg, "synth", 0), "manifest.jsonl"), cfg["corpus"]["n_tokens"])


def _read_labels(directory):
    labels = {}
    label_dir = os.path.join(directory, "labels")
    for name in sorted(os.listdir(label_dir)):
        seq, _ = load_labels(os.path.join(label_dir, name))
        labels[seq.utterance_id] = seq
    codebook, _ = load_codebook(os.path.join(directory, "codebook.bin"))
    return codebook, labels


def _train_stage(index):
    return "pretrain" if index == 1 else "distill"


def model_path(cfg, index):
    return os.path.join(require(cfg, _train_stage(index), index), "model.ckpt")


def _load_model(cfg, index):
    model, _, _ = enc.load_checkpoint(model_path(cfg, index))
    return model


def _plan(cfg, index):
    ps = plans(cfg)
    if not 1 <= index <= len(ps):
        raise ConfigError(f"iteration {index} is not in the config (1..{len(ps)})")
    return ps[index - 1]


def _iterations(cfg, args, lo):
    n = len(cfg["iterations"])
    if args.iteration is not None:
        if not lo <= args.iteration <= n:
            raise ConfigError(f"--iteration must lie in {lo}..{n} for this command")
        return [args.iteration]
    return list(range(lo, n + 1))


# -- commands ---------------------------------------------------------------------------------

def cmd_synth(cfg, args):
    c = cfg["corpus"]

    def produce(d):
        manifest, audio = synth_corpus(cfg["seed"], c["n_utts"], c["duration_s"], c["n_classes"],
                                       n_tokens=c["n_tokens"], split_fractions=c["split_fractions"])
        os.makedirs(os.path.join(d, "wav"))
        for e in manifest.entries:
            e.path = f"wav/{e.utterance_id}.wav"
            write_wav(os.path.join(d, e.path), audio[e.utterance_id])
        manifest.write(os.path.join(d, "manifest.jsonl"))

    run_stage(cfg, "synth", 0, {"corpus": c}, [], produce, args.force)


def cmd_features(cfg, args):
    f = cfg["features"]

    def produce(d):
        corpus = _corpus(cfg)
        os.makedirs(os.path.join(d, "feats"))
        for uid in sorted(corpus.audio):
            fm = mfcc39(corpus.audio[uid], win=f["win"], hop=f["hop"], n_mels=f["n_mels"], n_fft=f["n_fft"])
            save_features(os.path.join(d, "feats", uid + ".feat"), fm)

    run_stage(cfg, "features", 0, {"features": f}, [("synth", 0)], produce, args.force)


def cmd_quantize(cfg, args):
    q = cfg["quantizer"]

    def produce(d):
        corpus = _corpus(cfg)
        feat_dir = os.path.join(require(cfg, "features", 0), "feats")
        feats = {u: load_features(os.path.join(feat_dir, u + ".feat")) for u in sorted(corpus.audio)}
        fit_ids = ds._fit_ids(corpus, ds.FIT_SPLITS)
        codebook, labels = ds._fit_and_assign(feats, fit_ids, q["k"], q["mfcc_pca_rank"], cfg["seed"],
                                              q["kmeans_iters"])
        ds.write_targets(d, codebook, labels, source="mfcc", iteration=0)
        _write_jsonl(os.path.join(d, "inertia.jsonl"),
                     [{"iter": i, "inertia": v} for i, v in enumerate(codebook.inertia_history)])

    run_stage(cfg, "quantize", 0, {"quantizer": q}, [("synth", 0), ("features", 0)], produce, args.force)


def target_fields(plan):
    """The plan fields that determine an iteration's pseudo-labels."""
    return {f: getattr(plan, f) for f in ("target_source", "layer", "pca_rank", "k", "seed", "kmeans_iters")}


def cmd_targets(cfg, args):
    for index in _iterations(cfg, args, 2):
        plan = _plan(cfg, index)

        def produce(d, plan=plan):
            teacher = _load_model(cfg, plan.index - 1)
            rank = plan.pca_rank if plan.target_source == "teacher_layer_pca" else None
            codebook, labels = ds.generate_targets(teacher, _corpus(cfg), plan.layer, rank, plan.k,
                                                   plan.seed, kmeans_iters=plan.kmeans_iters)
            key = ds.label_cache_key(teacher.checksum(), plan.layer, rank, plan.k, plan.seed)
            ds.write_targets(d, codebook, labels, source=plan.target_source, iteration=plan.index,
                             teacher_iteration=plan.index - 1, cache_key=key)

        run_stage(cfg, "targets", index, {"targets": target_fields(plan)},
                  [("synth", 0), (_train_stage(index - 1), index - 1)], produce, args.force)


def _iteration_summary(res, plan):
    initial, final = res.initial_loss, res.final_loss
    out = {"iteration": plan.index, "initial_loss": initial, "final_loss": final, "loss_ratio": final / initial,
           "heldout": res.heldout, "k": plan.k, "chance": 1.0 / plan.k,
           "parameters": res.model.num_parameters(), "compression": res.report.to_dict()}
    return out


def _train(cfg, args, index, stage):
    plan = _plan(cfg, index)
    train = ds.TrainConfig(**cfg["train"])
    ablate = stage == "distill" and cfg["distill"]["pca_ablation"] and plan.target_source == "teacher_layer_pca"

    def produce(d):
        corpus = _corpus(cfg)
        label_dir = require(cfg, "quantize", 0) if index == 1 else require(cfg, "targets", index)
        codebook, labels = _read_labels(label_dir)
        teacher = _load_model(cfg, index - 1) if index > 1 else None
        res = ds.run_iteration(plan, teacher, corpus, train, labels=labels, codebook=codebook,
                               teacher_iteration=index - 1 if teacher is not None else None)
        enc.save_checkpoint(os.path.join(d, "model.ckpt"), res.model, iteration=index,
                            target_source=plan.target_source, teacher_iteration=index - 1 if teacher else None)
        _write_jsonl(os.path.join(d, "metrics.jsonl"), res.metrics)
        with open(os.path.join(d, "summary.json"), "w") as fh:
            json.dump(_iteration_summary(res, plan), fh, indent=1, sort_keys=True)
        if ablate:
            variant = ds.IterationPlan(**{**ds.asdict_shallow(plan), "target_source": "teacher_layer",
                                          "pca_rank": None})
            other = ds.run_iteration(variant, teacher, corpus, train)
            rows = [{"variant": "pca", **m} for m in res.metrics]
            rows += [{"variant": "no_pca", **m} for m in other.metrics]
            _write_jsonl(os.path.join(d, "ablation.jsonl"), rows)

    upstream = [("synth", 0), ("quantize", 0)] if index == 1 else [("synth", 0), ("targets", index),
                                                                  (_train_stage(index - 1), index - 1)]
    sections = {"plan": ds.plan_to_dict(plan), "train": cfg["train"], "ablation": bool(ablate)}
    run_stage(cfg, stage, index, sections, upstream, produce, args.force)


def cmd_pretrain(cfg, args):
    if args.iteration not in (None, 1):
        raise ConfigError("pretrain only trains iteration 1")
    _train(cfg, args, 1, "pretrain")


def cmd_distill(cfg, args):
    for index in _iterations(cfg, args, 2):
        _train(cfg, args, index, "distill")


def _probe_config(cfg, task, n_classes, input_dim):
    p = cfg["probe"]
    return pr.ProbeConfig(n_classes=n_classes, input_dim=input_dim, task=task, steps=p["steps"],
                          eval_every=p["eval_every"], batch=p["batch"], lr=p["lr"], hidden=p["hidden"],
                          dropout=p["dropout"], seed=cfg["seed"], spec_augment=p["spec_augment"])


def _n_outputs(cfg, task):
    return cfg["corpus"]["n_classes"] if task == "classification" else cfg["corpus"]["n_tokens"]


def cmd_probe(cfg, args):
    index = _iterations(cfg, args, 1)[-1]

    def produce(d):
        model = _load_model(cfg, index)
        corpus = _corpus(cfg)
        cache = {}
        for task in cfg["probe"]["tasks"]:
            pcfg = _probe_config(cfg, task, _n_outputs(cfg, task), model.config.emb_dim)
            probe, records = pr.train_probe(pr.Probe(pcfg), model, corpus, feature_cache=cache)
            pr.save_probe(os.path.join(d, f"probe_{task}.bin"), probe, iteration=index)
            _write_jsonl(os.path.join(d, f"records_{task}.jsonl"), [dataclass_row(r) for r in records])
            if cfg["probe"]["shuffled_control"] and task == "classification":
                _, control = pr.train_probe(pr.Probe(pcfg), model, corpus, feature_cache=cache, shuffled=True)
                _write_jsonl(os.path.join(d, f"records_{task}_shuffled.jsonl"), [dataclass_row(r) for r in control])

    run_stage(cfg, "probe", index, {"probe": cfg["probe"], "corpus": cfg["corpus"]},
              [("synth", 0), (_train_stage(index), index)], produce, args.force)


def dataclass_row(rec):
    return json.loads(rec.to_json())


def _eval_records(cfg, index, model, probes_by_task):
    corpus = _corpus(cfg)
    test_ids = corpus.manifest.ids("probe-test")
    feats = [pr.extract_features(model, corpus.audio[u]).data for u in test_ids]
    teacher_params = enc.count_parameters(_load_model(cfg, 1).config)
    rows = []
    for task, probe in probes_by_task.items():
        targets = pr.manifest_targets(corpus, task)
        rec = pr.evaluate_probe(probe, feats, [targets[u] for u in test_ids], "probe-test")
        rows.append({**dataclass_row(rec), "iteration": index, "model": f"iteration-{index}",
                     "parameters": model.num_parameters(), "teacher_parameters": teacher_params})
    return rows


def cmd_eval(cfg, args):
    index = _iterations(cfg, args, 1)[-1]
    if args.untrained:
        def produce(d):
            model = _load_model(cfg, index)
            probes = {t: pr.Probe(_probe_config(cfg, t, _n_outputs(cfg, t), model.config.emb_dim))
                      for t in cfg["probe"]["tasks"]}
            rows = _eval_records(cfg, index, model, probes)
            for r in rows:
                r["model"] += " (untrained probe)"
            _write_jsonl(os.path.join(d, "records.jsonl"), rows)

        run_stage(cfg, "eval-untrained", index, {"probe": cfg["probe"]},
                  [("synth", 0), (_train_stage(index), index)], produce, args.force)
        return

    def produce(d):
        model = _load_model(cfg, index)
        pdir = require(cfg, "probe", index)
        probes = {t: pr.load_probe(os.path.join(pdir, f"probe_{t}.bin"))[0] for t in cfg["probe"]["tasks"]}
        _write_jsonl(os.path.join(d, "records.jsonl"), _eval_records(cfg, index, model, probes))

    run_stage(cfg, "eval", index, {"probe": cfg["probe"]},
              [("synth", 0), (_train_stage(index), index), ("probe", index)], produce, args.force)


def collect_rows(out):
    rows = []
    for stage in ("eval", "eval-untrained"):
        base = os.path.join(out, stage)
        if not os.path.isdir(base):
            continue
        for it in sorted(os.listdir(base), key=lambda s: (len(s), s)):
            path = os.path.join(base, it, "records.jsonl")
            if os.path.exists(path):
                rows.extend(_read_jsonl(path))
    table = []
    for r in rows:
        table.append({"model": r["model"], "task": r["task"], "metric": r["metric"], "value": r["value"],
                      "parameters": r["parameters"],
                      "delta_s_percent": ds.compression_ratio(r["teacher_parameters"], r["parameters"])})
    return table


def format_table(table):
    header = f"{'model':<34} {'task':<15} {'metric':<9} {'value':>8} {'params':>10} {'dS %':>7}"
    lines = [header, "-" * len(header)]
    for r in table:
        lines.append(f"{r['model']:<34} {r['task']:<15} {r['metric']:<9} {r['value']:>8.4f} "
                     f"{r['parameters']:>10d} {r['delta_s_percent']:>7.2f}")
    return "\n".join(lines) + "\n"


def _training_rows(out):
    rows = []
    for stage in ("pretrain", "distill"):
        base = os.path.join(out, stage)
        if not os.path.isdir(base):
            continue
        for it in sorted(os.listdir(base), key=int):
            path = os.path.join(base, it, "summary.json")
            if os.path.exists(path):
                with open(path) as fh:
                    rows.append(json.load(fh))
    return rows


def _ablation_curves(out):
    curves = {}
    base = os.path.join(out, "distill")
    if os.path.isdir(base):
        for it in sorted(os.listdir(base), key=int):
            path = os.path.join(base, it, "ablation.jsonl")
            if os.path.exists(path):
                rows = _read_jsonl(path)
                curves[it] = {v: [r["loss_total"] for r in rows if r["variant"] == v] for v in ("pca", "no_pca")}
    return curves


def cmd_report(cfg, args):
    out = cfg["out"]
    table = collect_rows(out)
    d = os.path.join(out, "report")
    os.makedirs(d, exist_ok=True)
    if not table:
        warnings.warn("no evaluation records found; writing an empty report", RuntimeWarning, stacklevel=2)
        log.warning("no evaluation records under %s", out)
    text = format_table(table)
    training = _training_rows(out)
    if training:
        text += "\niteration  loss[1] -> loss[end]  ratio  held-out masked acc\n"
        for r in training:
            acc = r["heldout"]["masked_acc"] if r.get("heldout") else float("nan")
            text += (f"{r['iteration']:>9}  {r['initial_loss']:7.3f} -> {r['final_loss']:7.3f}  "
                     f"{r['loss_ratio']:.3f}  {acc:.3f} (chance {r['chance']:.4f})\n")
    ablation = _ablation_curves(out)
    for it, curves in ablation.items():
        text += f"\nPCA ablation, iteration {it} (mean loss over steps 1-20 / last 10)\n"
        for variant, losses in curves.items():
            text += f"  {variant:<7} {np.mean(losses[:20]):7.3f} / {np.mean(losses[-10:]):7.3f}  ({len(losses)} steps)\n"
    with open(os.path.join(d, "report.txt"), "w") as fh:
        fh.write(text)
    with open(os.path.join(d, "report.json"), "w") as fh:
        json.dump({"rows": table, "iterations": training, "pca_ablation": ablation}, fh, indent=1, sort_keys=True)
    print(text, end="")


def cmd_run_all(cfg, args):
    n = len(cfg["iterations"])
    args.iteration = None
    cmd_synth(cfg, args)
    cmd_features(cfg, args)
    cmd_quantize(cfg, args)
    cmd_pretrain(cfg, args)
    for index in range(2, n + 1):
        args.iteration = index
        cmd_targets(cfg, args)
        cmd_distill(cfg, args)
    args.iteration = n
    cmd_probe(cfg, args)
    cmd_eval(cfg, args)
    args.untrained = True
    cmd_eval(cfg, args)
    cmd_report(cfg, args)


HANDLERS = {"synth": cmd_synth, "features": cmd_features, "quantize": cmd_quantize, "targets": cmd_targets,
            "pretrain": cmd_pretrain, "distill": cmd_distill, "probe": cmd_probe, "eval": cmd_eval,
            "report": cmd_report, "run-all": cmd_run_all}


def build_parser():
    parser = argparse.ArgumentParser(prog="selfdistill", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML experiment config")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--iteration", type=int, help="restrict to one iteration")
    parser.add_argument("--untrained", action="store_true", help="eval: score a freshly initialised probe")
    parser.add_argument("--force", action="store_true", help="rebuild stages whose config changed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        HANDLERS[args.command](cfg, args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
