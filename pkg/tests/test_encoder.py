import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from conftest import tiny_config
from gradcheck import max_rel_error
from selfdistill import encoder as enc
from selfdistill.autograd import Tensor
from selfdistill.corpus import AudioBuffer
from selfdistill.errors import (AlignmentError, ConfigError, EmptyInputError, LabelRangeError, NumericError,
                                UsageError)
from selfdistill.features import mfcc39


def enumerate_shapes(cfg):
    return sum(int(np.prod(s)) for s in enc.parameter_shapes(cfg).values())


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 64), st.integers(1, 4), st.integers(1, 32),
       st.integers(1, 50), st.integers(1, 8), st.integers(1, 4))
def test_count_matches_enumeration(depth, d_mult, ffn, heads, proj, k, ch, groups):
    cfg = enc.EncoderConfig(depth, heads * groups * d_mult, ffn, heads, proj, k, cnn_channels=ch,
                            pos_conv_kernel=3, pos_conv_groups=groups).validate()
    assert enc.count_parameters(cfg) == enumerate_shapes(cfg) == enc.build_model(cfg).num_parameters()


def test_preset_sizes():
    assert abs(enc.count_parameters(enc.preset("large")) / 316e6 - 1) < 0.05
    for name in ("shallow", "shallow_thin", "tiny_large", "tiny_shallow"):
        cfg = enc.preset(name)
        assert enc.count_parameters(cfg) == enumerate_shapes(cfg)
    with pytest.raises(ConfigError):
        enc.preset("huge")


def test_config_validation():
    with pytest.raises(ConfigError):
        enc.EncoderConfig(2, 10, 16, 3).validate()
    with pytest.raises(ConfigError):
        enc.EncoderConfig(2, 8, 16, 2, cnn_strides=(5, 2)).validate()
    with pytest.raises(ConfigError):
        enc.EncoderConfig(2, 8, 16, 2, pos_conv_groups=16, pos_conv_kernel=4).validate()
    cfg = tiny_config()
    assert enc.EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_init_is_seeded():
    a = enc.build_model(tiny_config(), seed=3)
    b = enc.build_model(tiny_config(), seed=3)
    c = enc.build_model(tiny_config(), seed=4)
    assert a.checksum() == b.checksum() != c.checksum()


def test_cnn_length_example():
    assert enc.cnn_lengths(16000, tiny_config()) == [3199, 1599, 799, 399, 199, 99, 49]
    assert tiny_config().total_stride == 320


@settings(max_examples=40, deadline=None)
@given(st.integers(400, 24000))
def test_cnn_length_equals_mfcc_frames(n):
    assert enc.cnn_output_length(n, tiny_config()) == mfcc39(AudioBuffer(np.zeros(n))).shape[0]


def test_forward_shapes_and_attention_rows(rng):
    cfg = tiny_config()
    m = enc.build_model(cfg, seed=0, dtype=np.float64)
    audio = rng.uniform(-0.5, 0.5, (2, 3600))
    out = enc.forward(m, audio, return_attention=True)
    t = enc.cnn_output_length(3600, cfg)
    assert out.logits.shape == (2, t, cfg.n_labels)
    assert len(out.hidden_states) == cfg.depth + 1
    assert all(h.shape == (2, t, cfg.emb_dim) for h in out.hidden_states)
    for w in out.attention:
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
    with pytest.raises(EmptyInputError):
        enc.forward(m, np.zeros(300))


def test_zero_query_key_gives_uniform_attention(rng):
    m = enc.build_model(tiny_config(), seed=0, dtype=np.float64)
    for i in range(2):
        for n in ("q", "k"):
            for part in ("weight", "bias"):
                m.params[f"{enc.layer_prefix(i)}attn.{n}.{part}"].data[...] = 0
    out = enc.forward(m, rng.uniform(-0.5, 0.5, 2000), return_attention=True)
    t = out.logits.shape[1]
    for w in out.attention:
        assert np.array_equal(w, np.full_like(w, 1.0 / t))


def _ln(x, g, b):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + 1e-5) * g + b


def _gelu(x):
    return 0.5 * x * (1 + erf(x / math.sqrt(2)))


def hand_forward_single_frame(model, x):
    """Straight-line evaluation for audio that yields exactly one frame."""
    P = {n: t.data for n, t in model.params.items()}
    cfg = model.config
    x = (x - x.mean()) / math.sqrt(x.var() + 1e-5)
    h = x[:, None]  # (samples, channels)
    for i, (k, s) in enumerate(zip(cfg.cnn_kernels, cfg.cnn_strides)):
        w = P[f"cnn.{i}.weight"]
        n_out = (h.shape[0] - k) // s + 1
        out = np.zeros((n_out, w.shape[0]))
        for t in range(n_out):
            for o in range(w.shape[0]):
                out[t, o] = sum(w[o, c, j] * h[t * s + j, c] for c in range(w.shape[1]) for j in range(k))
        h = np.array([_gelu(_ln(row, P[f"cnn.{i}.ln.weight"], P[f"cnn.{i}.ln.bias"])) for row in out])
    assert h.shape[0] == 1
    v = _ln(h[0], P["feature_ln.weight"], P["feature_ln.bias"]) @ P["feature_proj.weight"] + P["feature_proj.bias"]
    # only the centre tap of the padded positional conv sees the single frame
    centre = cfg.pos_conv_kernel // 2
    groups = cfg.pos_conv_groups
    per = cfg.emb_dim // groups
    pos = np.array([sum(P["pos_conv.weight"][o, c, centre] * v[(o // per) * per + c] for c in range(per))
                    for o in range(cfg.emb_dim)]) + P["pos_conv.bias"]
    v = v + _gelu(pos)
    for i in range(cfg.depth):
        pre = enc.layer_prefix(i)
        a = _ln(v, P[pre + "ln1.weight"], P[pre + "ln1.bias"])
        val = a @ P[pre + "attn.v.weight"] + P[pre + "attn.v.bias"]  # one key: softmax weight is 1
        v = v + val @ P[pre + "attn.o.weight"] + P[pre + "attn.o.bias"]
        f = _ln(v, P[pre + "ln2.weight"], P[pre + "ln2.bias"])
        v = v + _gelu(f @ P[pre + "ffn.fc1.weight"] + P[pre + "ffn.fc1.bias"]) @ P[pre + "ffn.fc2.weight"] \
            + P[pre + "ffn.fc2.bias"]
    p = _ln(v, P["final_ln.weight"], P["final_ln.bias"]) @ P["final_proj.weight"] + P["final_proj.bias"]
    e = P["label_emb"]
    cos = (e @ p) / (np.linalg.norm(e, axis=1) * np.linalg.norm(p))
    return cos / cfg.temperature


def test_single_frame_forward_matches_hand_evaluation(rng):
    m = enc.build_model(tiny_config(proj_dim=8), seed=2, dtype=np.float64)
    for t in m.params.values():
        t.data += 0.05 * rng.normal(size=t.shape)
    x = rng.uniform(-0.5, 0.5, 400)
    got = enc.forward(m, x).logits.data[0, 0]
    np.testing.assert_allclose(got, hand_forward_single_frame(m, x), atol=1e-5)


def test_nonfinite_parameter_raises_numeric_error(rng):
    m = enc.build_model(tiny_config(), seed=0)
    m.params[enc.layer_prefix(1) + "ffn.fc2.bias"].data[0] = np.inf
    with pytest.raises(NumericError) as err:
        enc.forward(m, rng.uniform(-0.5, 0.5, 1000))
    assert err.value.layer == 2


def test_mask_spans():
    assert not enc.mask_spans(100, enc.MaskSpec(0.0, 10)).any()
    assert enc.mask_spans(100, enc.MaskSpec(1.0, 100)).all()
    frac = np.mean([enc.mask_spans(1000, enc.MaskSpec(0.08, 10, seed=s)).mean() for s in range(100)])
    assert 0.35 <= frac <= 0.75
    a = enc.mask_spans(50, enc.MaskSpec(0.2, 3, seed=9))
    assert np.array_equal(a, enc.mask_spans(50, enc.MaskSpec(0.2, 3, seed=9)))
    with pytest.raises(ConfigError):
        enc.MaskSpec(1.5)


@pytest.mark.parametrize("k", [4, 64, 1000])
def test_uniform_logits_give_ln_k(k):
    mask = np.arange(20) % 3 == 0
    res = enc.masked_pred_loss(np.zeros((20, k)), np.arange(20) % k, mask, 1.0, 1.0)
    assert abs(res.masked_ce - math.log(k)) < 1e-6 and abs(res.unmasked_ce - math.log(k)) < 1e-6
    assert abs(float(res.total.data) - 2 * math.log(k)) < 1e-6


def test_loss_linearity_and_permutation(rng):
    z = rng.normal(size=(30, 6))
    y = rng.integers(0, 6, 30)
    m = rng.random(30) < 0.4

    def total(wm, wu, z=z, y=y):
        return float(enc.masked_pred_loss(z, y, m, wm, wu).total.data)

    assert abs(total(0.7, 0.2) - (0.7 * total(1, 0) + 0.2 * total(0, 1))) < 1e-8
    perm = rng.permutation(6)
    zp = np.empty_like(z)
    zp[:, perm] = z
    assert abs(total(1, 0.1) - total(1, 0.1, zp, perm[y])) < 1e-8


def test_masked_only_matches_direct_ce(rng):
    z = rng.normal(size=(12, 5))
    y = rng.integers(0, 5, 12)
    m = np.arange(12) < 5
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    want = -logp[np.arange(12), y][m].mean()
    assert abs(float(enc.masked_pred_loss(z, y, m, 1.0, 0.0).total.data) - want) < 1e-12


def test_sharp_correct_logits_give_zero_loss():
    y = np.array([0, 2, 1])
    z = np.full((3, 3), -1e3)
    z[np.arange(3), y] = 1e3
    assert float(enc.masked_pred_loss(z, y, np.array([1, 0, 1], bool)).total.data) < 1e-12


def test_loss_errors():
    with pytest.raises(LabelRangeError):
        enc.masked_pred_loss(np.zeros((2, 3)), np.array([0, 3]), np.array([True, False]))
    with pytest.raises(AlignmentError):
        enc.masked_pred_loss(np.zeros((2, 3)), np.array([0]), np.array([True, False]))
    with pytest.raises(ConfigError):
        enc.masked_pred_loss(np.zeros((2, 3)), np.array([0, 1]), np.array([True, False]), 0.0, 0.0)


def _perturbed_tiny(rng):
    m = enc.build_model(tiny_config(proj_dim=8), seed=1, dtype=np.float64)
    for t in m.params.values():
        t.data += 0.1 * rng.normal(size=t.shape)
    return m


def test_full_gradient_check(rng):
    m = _perturbed_tiny(rng)
    audio = np.clip(0.3 * rng.normal(size=400 + 320 * 4), -1, 1)
    labels = rng.integers(0, 4, 5)
    mask = np.array([False, True, True, False, False])

    def loss():
        return enc.masked_pred_loss(enc.forward(m, audio, mask=mask).logits, labels[None], mask[None], 1.0, 0.3)

    grads = enc.backward(m, loss())
    worst, where = max_rel_error(lambda: float(loss().total.data), m.params, grads)
    assert worst < 1e-4, where


def test_gradient_scaling_and_dead_label_rows(rng):
    m = _perturbed_tiny(rng)
    audio = rng.uniform(-0.5, 0.5, 2000)
    t = enc.cnn_output_length(2000, m.config)
    labels = np.zeros(t, dtype=int)
    mask = np.zeros(t, bool)
    mask[:2] = True
    out = enc.forward(m, audio, mask=mask)
    g1 = enc.backward(m, enc.masked_pred_loss(out.logits, labels, mask, 1.0, 0.1))
    out = enc.forward(m, audio, mask=mask)
    g2 = enc.backward(m, enc.masked_pred_loss(out.logits, labels, mask, 2.0, 0.2))
    for n in g1:
        np.testing.assert_allclose(g2[n], 2 * g1[n], rtol=0, atol=1e-10)
    # no masked frames and w_u = 0: the label embeddings have no path to the loss
    out = enc.forward(m, audio, mask=np.zeros(t, bool))
    g = enc.backward(m, enc.masked_pred_loss(out.logits, labels, np.zeros(t, bool), 1.0, 0.0))
    assert not g["label_emb"].any()


def test_backward_without_graph():
    m = enc.build_model(tiny_config(), seed=0)
    out = enc.forward(m, np.zeros(1000), grad=False)
    with pytest.raises(UsageError):
        enc.backward(m, enc.masked_pred_loss(out.logits, np.zeros(2, int), np.array([True, False])))


def test_zero_lr_leaves_parameters(rng):
    m = enc.build_model(tiny_config(), seed=0)
    before = m.checksum()
    audio = AudioBuffer(rng.uniform(-0.5, 0.5, 2000))
    rec = enc.train_step(m, [(audio, np.zeros(5, int))], enc.MaskSpec(0.5, 2), enc.Adam(lr=0.0))
    assert m.checksum() == before and rec["lr"] == 0.0


def test_alignment_gap():
    assert enc.align(np.arange(7), 5).tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(AlignmentError):
        enc.align(np.arange(8), 5)


def test_adam_schedule():
    opt = enc.Adam(lr=1.0, warmup=10)
    assert opt.rate(5) == 0.5 and opt.rate(10) == 1.0 and abs(opt.rate(40) - 0.5) < 1e-12


def test_chance_accuracy_at_init():
    cfg = tiny_config(n_labels=64, proj_dim=16)
    accs = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        m = enc.build_model(cfg, seed=seed)
        items = [(AudioBuffer(r.uniform(-0.5, 0.5, 16000)), r.integers(0, 64, 49)) for _ in range(2)]
        accs.append(enc.evaluate_masked(m, items, enc.MaskSpec(0.3, 5, seed))["masked_acc"])
    assert 0.5 / 64 <= np.mean(accs) <= 4 / 64


def test_smoke_training_halves_loss(small_corpus):
    cfg = enc.preset("tiny_shallow_thin", n_labels=8)
    m = enc.build_model(cfg, seed=0)
    ids = small_corpus.manifest.ids("pretrain")[:4]
    r = np.random.default_rng(0)
    batch = [(small_corpus.audio[u], r.integers(0, 8, 49)) for u in ids]
    spec = enc.MaskSpec(0.08, 10, 0)
    opt = enc.Adam(lr=3e-3, warmup=20, clip_norm=10.0)
    losses = [enc.train_step(m, batch, spec, opt)["loss_total"] for _ in range(200)]
    assert np.mean(losses[-10:]) <= 0.5 * losses[0]


def test_checkpoint_roundtrip(tmp_path, rng):
    m = enc.build_model(tiny_config(), seed=5)
    opt = enc.Adam()
    enc.train_step(m, [(AudioBuffer(rng.uniform(-0.5, 0.5, 2000)), np.zeros(5, int))], enc.MaskSpec(0.5, 2), opt)
    enc.save_checkpoint(tmp_path / "m.ckpt", m, opt, iteration=1)
    back, opt2, header = enc.load_checkpoint(tmp_path / "m.ckpt")
    assert back.checksum() == m.checksum() and header["iteration"] == 1
    assert opt2.step == 1 and set(opt2.m) == set(opt.m)
