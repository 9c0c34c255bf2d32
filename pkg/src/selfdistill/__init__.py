"""Desk-scale iterative self-distillation for masked-prediction speech encoders.

Modules: ``corpus`` (audio, manifests, synthetic data), ``features`` (MFCC39),
``quantizer`` (PCA + k-means pseudo-labels), ``encoder`` (CNN + transformer
with a numpy autograd), ``distill`` (iteration plans, students, ΔS),
``probes`` (frozen-encoder classification and CTC heads) and ``cli``.
"""

__version__ = "0.1.0"
