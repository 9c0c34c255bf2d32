"""Probing a frozen encoder: utterance classification and CTC token decoding."""

# %%
import numpy as np

from selfdistill import encoder as enc
from selfdistill import probes as pr
from selfdistill.corpus import Corpus, synth_corpus

fractions = {"pretrain": 0.1, "cluster-fit": 0.1, "probe-train": 0.4, "probe-dev": 0.3, "probe-test": 0.1}
corpus = Corpus(*synth_corpus(11, 80, 1.0, 2, n_tokens=8, split_fractions=fractions))
model = enc.build_model(enc.preset("tiny_shallow"), seed=0)
checksum = model.checksum()

# %% features are the mean over every hidden state
fm = pr.extract_features(model, corpus.audio[corpus.manifest.ids("probe-train")[0]])
print("probe input", fm.shape)

# %% classification probe and the shuffled-label control
cfg = pr.ProbeConfig(n_classes=2, input_dim=model.config.emb_dim, steps=400, eval_every=100)
cache = {}
_, records = pr.train_probe(pr.Probe(cfg), model, corpus, feature_cache=cache)
_, control = pr.train_probe(pr.Probe(cfg), model, corpus, feature_cache=cache, shuffled=True)
print("dev accuracy ", [round(r.value, 3) for r in records])
print("shuffled     ", [round(r.value, 3) for r in control])
print("encoder untouched:", model.checksum() == checksum)

# %% CTC: alignment-free decoding of the token sequence
ctc = pr.ProbeConfig(n_classes=8, input_dim=model.config.emb_dim, task="ctc", steps=300, eval_every=100)
probe, records = pr.train_probe(pr.Probe(ctc), model, corpus, feature_cache=cache)
print("dev WER", [round(r.value, 3) for r in records])
uid = corpus.manifest.ids("probe-dev")[0]
hyp = pr.greedy_decode(pr.probe_forward(probe, cache[uid]).data[0])
print("reference ", corpus.manifest.entry(uid).tokens)
print("hypothesis", hyp)

# %% the loss itself, on a toy example with two frames and one symbol
z = np.log(np.array([[0.6, 0.4], [0.3, 0.7]]))  # columns: symbol 0, blank
print("CTC NLL", round(pr.ctc_loss(z, [0]), 4), "=", round(-np.log(0.6 * 0.7 + 0.6 * 0.3 + 0.4 * 0.3), 4))
