"""One test per acceptance criterion; a PASS/FAIL line for each is printed in the
terminal summary."""

import itertools
import json
import os
import shutil
import time

import numpy as np
import pytest

from conftest import tiny_config
from gradcheck import max_rel_error
from selfdistill import cli
from selfdistill import distill as ds
from selfdistill import encoder as enc
from selfdistill import probes as pr
from selfdistill.corpus import AudioBuffer, Corpus, synth_corpus
from selfdistill.features import mfcc39
from selfdistill.quantizer import assign_labels, fit_kmeans, fit_pca, project, reconstruct

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
BUNDLED = os.path.join(ROOT, "configs", "synthetic.yaml")


def note(request, text):
    request.node.user_properties.append(("detail", text))


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("e2e") / "run")
    t0 = time.perf_counter()
    code = cli.main(["run-all", "--config", BUNDLED, "--out", out])
    return {"out": out, "code": code, "seconds": time.perf_counter() - t0}


@pytest.mark.criterion(1, "gradients match central finite differences (encoder + probe head)")
def test_c01_gradients(request):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    m = enc.build_model(tiny_config(proj_dim=8), seed=1, dtype=np.float64)
    for t in m.params.values():
        t.data += 0.1 * rng.normal(size=t.shape)
    audio = np.clip(0.3 * rng.normal(size=400 + 320 * 4), -1, 1)
    labels = rng.integers(0, 4, 5)
    mask = np.array([False, True, True, False, False])

    def loss():
        return enc.masked_pred_loss(enc.forward(m, audio, mask=mask).logits, labels[None], mask[None], 1.0, 0.3)

    enc_err, _ = max_rel_error(lambda: float(loss().total.data), m.params, enc.backward(m, loss()))

    probe_err = 0.0
    for task, targets in (("classification", [0, 2]), ("ctc", [[0, 1], [2]])):
        probe = pr.Probe(pr.ProbeConfig(n_classes=3, input_dim=8, task=task, hidden=6))
        for t in probe.params.values():
            t.data += 0.1 * rng.normal(size=t.shape)
        feats = [rng.normal(size=(9, 8)), rng.normal(size=(9, 8))]

        def ploss():
            return pr._batch_loss(probe, feats, targets, None, train=False)

        probe.zero_grad()
        ploss().backward()
        grads = {n: p.grad for n, p in probe.params.items()}
        err, _ = max_rel_error(lambda: float(ploss().data), probe.params, grads, eps=1e-6)
        probe_err = max(probe_err, err)
    seconds = time.perf_counter() - t0
    note(request, f"encoder {m.num_parameters()} params max rel err {enc_err:.1e}, probe {probe_err:.1e}, "
                  f"{seconds:.1f}s")
    assert enc_err < 1e-4 and probe_err < 1e-4 and seconds < 60


@pytest.mark.criterion(2, "parameter accounting and structural compression")
def test_c02_accounting(request):
    rng = np.random.default_rng(2)
    for _ in range(20):
        heads, groups = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        cfg = enc.EncoderConfig(int(rng.integers(1, 8)), heads * groups * int(rng.integers(1, 9)),
                                int(rng.integers(1, 100)), heads, int(rng.integers(1, 40)), int(rng.integers(1, 80)),
                                cnn_channels=int(rng.integers(1, 16)), pos_conv_kernel=int(rng.integers(1, 9)),
                                pos_conv_groups=groups).validate()
        assert enc.count_parameters(cfg) == sum(int(np.prod(s)) for s in enc.parameter_shapes(cfg).values())
    large = enc.count_parameters(enc.preset("large"))
    shallow = enc.count_parameters(enc.preset("shallow"))
    thin = enc.count_parameters(enc.preset("shallow_thin"))
    ds_quoted = ds.compression_ratio(316e6, 65e6)
    note(request, f"H-L {large / 1e6:.2f}M, dS(65M,316M) {ds_quoted:.2f}%; reported only: H-S {shallow / 1e6:.2f}M "
                  f"(dS {ds.compression_ratio(large, shallow):.1f}%), H-ST {thin / 1e6:.2f}M "
                  f"(dS {ds.compression_ratio(large, thin):.1f}%)")
    assert abs(large / 316e6 - 1) <= 0.05
    assert abs(ds_quoted - 79.4) <= 0.1


@pytest.mark.criterion(3, "CNN output length equals the layer formula and the MFCC frame count")
def test_c03_lengths(request):
    rng = np.random.default_rng(3)
    cfg = tiny_config()
    lengths = rng.integers(400, 48000, 50)
    for n in lengths:
        t = int(n)
        for k, s in zip((10, 3, 3, 3, 3, 2, 2), (5, 2, 2, 2, 2, 2, 2)):
            t = (t - k) // s + 1
        assert enc.cnn_output_length(int(n), cfg) == t == mfcc39(AudioBuffer(np.zeros(int(n)))).shape[0]
    note(request, f"50 lengths in [{lengths.min()}, {lengths.max()}]")


@pytest.mark.criterion(4, "k-means: monotone inertia, blob recovery, exact assignment")
def test_c04_clustering(request):
    t0 = time.perf_counter()
    for seed in range(100):
        r = np.random.default_rng(seed)
        x = r.normal(size=(int(r.integers(20, 120)), int(r.integers(1, 6))))
        h = np.array(fit_kmeans(x, int(r.integers(1, 9)), seed=seed).inertia_history)
        assert np.all(np.diff(h) <= 1e-12 * h[:-1])
    r = np.random.default_rng(4)
    centers = np.array([[0, 0], [6, 0], [0, 6], [6, 6]], dtype=float)
    x = np.concatenate([c + 0.1 * r.normal(size=(200, 2)) for c in centers])
    cb = fit_kmeans(x, 4, seed=0)
    err = min(np.abs(cb.centroids[list(p)] - centers).max() for p in itertools.permutations(range(4)))
    assert err < 0.05
    for seed in range(10):
        r = np.random.default_rng(100 + seed)
        x = r.normal(size=(80, 4))
        cb = fit_kmeans(x, 6, seed=seed)
        brute = [int(np.argmin([np.sum((p - c) ** 2) for c in cb.centroids])) for p in x]
        assert assign_labels(cb, x).tolist() == brute
    seconds = time.perf_counter() - t0
    note(request, f"blob error {err:.3f}, {seconds:.1f}s")
    assert seconds < 30


@pytest.mark.criterion(5, "PCA reconstruction error equals the discarded eigenvalues")
def test_c05_pca(request):
    worst = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        x = r.normal(size=(500, 8)) @ r.normal(size=(8, 8))
        xc = x - x.mean(axis=0)
        eig = np.linalg.eigh(xc.T @ xc / len(x))[0][::-1]
        for rank in range(1, 8):
            pca = fit_pca(x, rank)
            mse = np.mean(np.sum((reconstruct(pca, project(pca, x)) - x) ** 2, axis=1))
            worst = max(worst, abs(mse - eig[rank:].sum()))
        q, _ = np.linalg.qr(r.normal(size=(8, 8)))
        full = fit_pca(np.vstack([x, x @ q]), 8)
        worst = max(worst, np.abs(reconstruct(full, project(full, x)) - x).max())
    note(request, f"max deviation {worst:.1e}")
    assert worst < 1e-6


@pytest.mark.criterion(6, "dual cross-entropy analytics")
def test_c06_loss(request):
    for k in (4, 64, 1000):
        mask = np.arange(40) % 4 == 0
        res = enc.masked_pred_loss(np.zeros((40, k)), np.arange(40) % k, mask)
        assert abs(res.masked_ce - np.log(k)) < 1e-6 and abs(res.unmasked_ce - np.log(k)) < 1e-6
        assert abs(float(res.total.data) - 1.1 * np.log(k)) < 1e-6
    r = np.random.default_rng(6)
    z, y, m = r.normal(size=(50, 7)), r.integers(0, 7, 50), r.random(50) < 0.3

    def total(wm, wu, z=z, y=y):
        return float(enc.masked_pred_loss(z, y, m, wm, wu).total.data)

    lin = abs(total(0.8, 0.3) - 0.8 * total(1, 0) - 0.3 * total(0, 1))
    perm = r.permutation(7)
    zp = np.empty_like(z)
    zp[:, perm] = z
    inv = abs(total(1, 0.1) - total(1, 0.1, zp, perm[y]))
    note(request, f"linearity {lin:.1e}, permutation {inv:.1e}")
    assert lin < 1e-8 and inv < 1e-8


@pytest.mark.criterion(7, "CTC loss matches path enumeration; greedy collapse")
def test_c07_ctc(request):
    r = np.random.default_rng(7)
    worst, n = 0.0, 0
    for T in range(1, 5):
        for V in range(1, 4):
            for L in range(3):
                for target in itertools.product(range(V), repeat=L):
                    if T < pr.ctc_min_frames(list(target)):
                        continue
                    z = r.normal(size=(T, V + 1))
                    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
                    brute = -np.inf
                    for path in itertools.product(range(V + 1), repeat=T):
                        if [s for s, _ in itertools.groupby(path) if s != V] == list(target):
                            brute = np.logaddexp(brute, sum(logp[t, s] for t, s in enumerate(path)))
                    worst = max(worst, abs(pr.ctc_loss(z, target) + brute))
                    n += 1
    for _ in range(50):
        path = r.integers(0, 4, r.integers(1, 15))
        z = np.full((path.size, 4), -3.0)
        z[np.arange(path.size), path] = 3.0
        assert pr.greedy_decode(z) == [int(s) for s, _ in itertools.groupby(path) if s != 3]
    note(request, f"{n} instances, max |diff| {worst:.1e}; 50 greedy cases")
    assert worst < 1e-6


@pytest.mark.criterion(8, "three-iteration pipeline on the synthetic corpus")
def test_c08_end_to_end(request, pipeline):
    assert pipeline["code"] == 0
    out = pipeline["out"]
    summaries = [json.load(open(os.path.join(out, stage, str(i), "summary.json")))
                 for stage, i in (("pretrain", 1), ("distill", 2), ("distill", 3))]
    ratios = [s["loss_ratio"] for s in summaries]
    acc, k = summaries[-1]["heldout"]["masked_acc"], summaries[-1]["k"]
    note(request, f"{pipeline['seconds']:.0f}s; loss ratios {', '.join(f'{x:.3f}' for x in ratios)}; "
                  f"iteration-3 held-out masked acc {acc:.3f} vs 10/k = {10 / k:.3f}")
    assert pipeline["seconds"] < 15 * 60
    assert all(x <= 0.5 for x in ratios)
    assert acc > 10 / k


@pytest.mark.criterion(9, "blocked-averaging initialisation")
def test_c09_blocked_average(request):
    teacher = enc.build_model(enc.preset("tiny_large"), seed=9)
    assert ds.blocked_avg_init(teacher, teacher.config).checksum() == teacher.checksum()
    cfg = tiny_config(depth=24, ffn_dim=8)
    deep = enc.build_model(cfg, seed=0, dtype=np.float64)
    for name, p in deep.params.items():
        if name.startswith("layers."):
            level = int(name.split(".")[1]) + 1
            p.data[...] = level * (np.eye(8) if p.data.shape == (8, 8) else 1.0)
    student = ds.blocked_avg_init(deep, cfg.replace(depth=4))
    for suffix in ("attn.q.weight", "attn.o.weight", "ffn.fc1.weight", "ffn.fc2.weight"):
        assert np.array_equal(student.params[enc.layer_prefix(0) + suffix].data, 3.5 * np.eye(8))
    note(request, "equal depth bit-exact; 24->4 layer 0 == 3.5 I")


@pytest.mark.criterion(10, "PCA-supervision ablation emits both loss curves")
def test_c10_ablation(request, pipeline):
    out = pipeline["out"]
    rows = cli._read_jsonl(os.path.join(out, "distill", "3", "ablation.jsonl"))
    curves = {v: [r["loss_total"] for r in rows if r["variant"] == v] for v in ("pca", "no_pca")}
    report = json.load(open(os.path.join(out, "report", "report.json")))
    assert report["pca_ablation"]["3"] == curves
    assert len(curves["pca"]) == len(curves["no_pca"]) > 0
    early = {v: np.mean(c[:20]) for v, c in curves.items()}
    late = {v: np.mean(c[-10:]) for v, c in curves.items()}
    note(request, f"observation only: first-20 mean pca {early['pca']:.3f} vs no_pca {early['no_pca']:.3f}; "
                  f"last-10 mean pca {late['pca']:.3f} vs no_pca {late['no_pca']:.3f}")


@pytest.mark.criterion(11, "frozen-encoder probe on a separable 2-class corpus")
def test_c11_probe(request, pipeline):
    model, _, _ = enc.load_checkpoint(os.path.join(pipeline["out"], "distill", "3", "model.ckpt"))
    fractions = {"pretrain": 0.1, "cluster-fit": 0.1, "probe-train": 0.4, "probe-dev": 0.3, "probe-test": 0.1}
    corpus = Corpus(*synth_corpus(11, 160, 1.0, 2, n_tokens=16, split_fractions=fractions))
    before = model.checksum()
    cfg = pr.ProbeConfig(n_classes=2, input_dim=model.config.emb_dim, steps=2000, eval_every=100)
    cache = {}
    _, records = pr.train_probe(pr.Probe(cfg), model, corpus, feature_cache=cache)
    _, control = pr.train_probe(pr.Probe(cfg), model, corpus, feature_cache=cache, shuffled=True)
    first = next((r.step for r in records if r.value >= 0.9), None)
    note(request, f"dev n={records[-1].n_items}; acc >= 0.9 first at step {first}, final {records[-1].value:.3f}; "
                  f"shuffled control final {control[-1].value:.3f}")
    assert first is not None and first <= 2000
    assert model.checksum() == before
    assert 0.3 <= control[-1].value <= 0.7


@pytest.mark.criterion(12, "re-running a stage reproduces byte-identical artifacts")
def test_c12_determinism(request, pipeline):
    out = pipeline["out"]
    checked = []
    for stage, it in (("features", 0), ("quantize", 0), ("targets", 3), ("pretrain", 1), ("eval", 3)):
        d = os.path.join(out, stage, str(it))
        before = cli._listing(d)
        prov = open(os.path.join(d, "provenance.json"), "rb").read()
        shutil.rmtree(d)
        args = [stage, "--config", BUNDLED, "--out", out]
        if it:
            args += ["--iteration", str(it)]
        assert cli.main(args) == 0
        assert cli._listing(d) == before
        assert open(os.path.join(d, "provenance.json"), "rb").read() == prov
        checked.append(f"{stage}/{it} ({len(before)} files)")
    note(request, "identical: " + ", ".join(checked))
