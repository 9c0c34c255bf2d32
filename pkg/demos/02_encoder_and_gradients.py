"""The encoder, its parameter accounting and a finite-difference spot check."""

# %%
import numpy as np

from selfdistill import encoder as enc
from selfdistill.distill import compression_report

for name in ("large", "shallow", "shallow_thin", "shallow_few_heads"):
    cfg = enc.preset(name)
    print(f"{name:<18} depth {cfg.depth:2d} width {cfg.emb_dim:4d} heads {cfg.attn_heads:2d} "
          f"{enc.count_parameters(cfg) / 1e6:7.2f} M")

# %% structural compression of the full-size students against the large teacher
for student in ("shallow", "shallow_thin"):
    rep = compression_report(enc.preset("large"), enc.preset(student))
    print(f"{student:<13} dS = {rep.delta_s_percent:.1f}%  axis deltas (depth, width, heads) {rep.axis_deltas}")

# %% the tiny presets used on a laptop
model = enc.build_model(enc.preset("tiny_large"), seed=0)
audio = np.random.default_rng(0).uniform(-0.5, 0.5, 32000)
out = enc.forward(model, audio, return_attention=True, grad=False)
print("logits", out.logits.shape, "hidden states", len(out.hidden_states), "x", out.hidden_states[0].shape)
print("attention rows sum to", out.attention[0].sum(-1).min().round(6), "..", out.attention[0].sum(-1).max().round(6))

# %% masked-prediction loss: uniform logits give ln k in both regions
k = 64
res = enc.masked_pred_loss(np.zeros((100, k)), np.arange(100) % k, np.arange(100) < 30)
print(f"masked CE {res.masked_ce:.4f} unmasked CE {res.unmasked_ce:.4f} ln k {np.log(k):.4f}")

# %% analytic gradients against central differences on a few random entries
small = enc.build_model(enc.EncoderConfig(2, 8, 16, 2, 8, 4, cnn_channels=4, pos_conv_kernel=4,
                                          pos_conv_groups=2), seed=1, dtype=np.float64)
rng = np.random.default_rng(1)
x = rng.uniform(-0.5, 0.5, 1680)
labels, mask = rng.integers(0, 4, 5), np.array([0, 1, 1, 0, 0], bool)


def loss():
    return enc.masked_pred_loss(enc.forward(small, x, mask=mask).logits, labels, mask, 1.0, 0.3)


grads = enc.backward(small, loss())
for name in ("cnn.0.weight", "layers.001.attn.q.weight", "label_emb"):
    p = small.params[name].data.reshape(-1)
    i = int(rng.integers(p.size))
    old = p[i]
    p[i] = old + 1e-5
    up = float(loss().total.data)
    p[i] = old - 1e-5
    down = float(loss().total.data)
    p[i] = old
    print(f"{name:<26} analytic {grads[name].reshape(-1)[i]: .6e} numeric {(up - down) / 2e-5: .6e}")
