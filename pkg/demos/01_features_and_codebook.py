"""Synthetic speech, MFCC39 frames and a k-means codebook.

Run with ``python demos/01_features_and_codebook.py``.  Each ``# %%`` block is
a cell if you open the file in an editor that understands them.
"""

# %%
import numpy as np

from selfdistill.corpus import Corpus, synth_corpus
from selfdistill.features import mfcc39
from selfdistill.quantizer import assign_labels, fit_kmeans, fit_pca, project

manifest, audio = synth_corpus(seed=0, n_utts=32, duration_s=2.0, n_classes=4, n_tokens=16)
corpus = Corpus(manifest, audio)
for split in ("pretrain", "cluster-fit", "probe-train", "probe-dev", "probe-test"):
    print(f"{split:<12} {len(manifest.ids(split)):3d} utterances")

# %% every utterance is a class drone under a Markov chain of tonal tokens
first = manifest.entries[0]
print(first.utterance_id, "class", first.label, "tokens", first.tokens)

# %% 13 cepstra + deltas + delta-deltas at 50 frames per second
feats = {u: mfcc39(corpus.audio[u]) for u in manifest.ids("pretrain", "cluster-fit")}
fm = feats[first.utterance_id]
print("mfcc39", fm.shape, "frame rate", fm.frame_rate)

# %% PCA on the cluster-fit frames; most of the variance sits in a few axes
fit_frames = np.concatenate([feats[u].data for u in manifest.ids("cluster-fit")])
pca = fit_pca(fit_frames, 12)
share = np.cumsum(pca.eigenvalues) / np.trace(np.cov(fit_frames.T, bias=True))
print("variance kept by 1, 4, 12 axes:", np.round(share[[0, 3, 11]], 3))

# %% k-means codebook; full-batch inertia never goes up
codebook = fit_kmeans(project(pca, fit_frames), k=32, seed=0, pca=pca)
print("inertia", [round(v) for v in codebook.inertia_history[:6]], "...", round(codebook.inertia_history[-1]))

# %% pseudo-labels for one utterance: long runs mean the clusters track the tokens
labels = assign_labels(codebook, fm).labels
runs = np.flatnonzero(np.diff(labels)) + 1
print(labels[:40])
print(f"{len(runs) + 1} runs over {labels.size} frames")
