"""PCA compression and k-means codebooks: the pseudo-label factory.

Both fitters work in float64 regardless of the input precision.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import container
from .errors import FormatError, InsufficientDataError, LabelRangeError, ShapeError
from .features import FeatureMatrix

FULL_SCALE_K = 1000
DEFAULT_K = 64
DEFAULT_PCA_RANK = 128


def jacobi_eigh(a, tol=1e-14, max_sweeps=60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors in columns,
    unsorted.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError("jacobi_eigh needs a square matrix")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


@dataclass
class PcaTransform:
    mean: np.ndarray
    basis: np.ndarray  # R x D, orthonormal rows
    eigenvalues: np.ndarray

    @property
    def rank(self):
        return self.basis.shape[0]

    @property
    def dim(self):
        return self.basis.shape[1]


def fit_pca(features, rank):
    """Top-``rank`` principal axes of the pooled frames (population covariance)."""
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if not 1 <= rank <= d or n <= rank:
        raise InsufficientDataError(f"fit_pca needs N > R >= 1 and R <= D (N={n}, D={d}, R={rank})")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    vals, vecs = jacobi_eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    vals = np.maximum(vals, 0.0)
    numerical_rank = int(np.sum(vals > vals[0] * d * np.finfo(float).eps)) if vals[0] > 0 else 0
    if rank > numerical_rank:
        warnings.warn(f"PCA rank {rank} exceeds numerical rank {numerical_rank}; padding eigenvalues with 0",
                      RuntimeWarning, stacklevel=2)
        vals[numerical_rank:] = 0.0
    basis = vecs[:, :rank].T.copy()
    pivot = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(rank), pivot])
    basis *= signs[:, None]
    return PcaTransform(mean, basis, vals[:rank].copy())


def project(pca, features):
    x = features.data if isinstance(features, FeatureMatrix) else features
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != pca.dim:
        raise ShapeError(f"features have shape {x.shape}, PCA expects D={pca.dim}")
    y = (x - pca.mean) @ pca.basis.T
    if isinstance(features, FeatureMatrix):
        return features.replace(data=y, kind="projected")
    return y


def reconstruct(pca, projected):
    return pca.mean + np.asarray(projected) @ pca.basis


@dataclass
class Codebook:
    centroids: np.ndarray
    pca: Optional[PcaTransform] = None
    inertia_history: list = field(default_factory=list)
    seed: int = 0

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def input_dim(self):
        return self.pca.dim if self.pca is not None else self.centroids.shape[1]

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"features have shape {x.shape}, codebook expects D={self.input_dim}")
        return project(self.pca, x) if self.pca is not None else x


@dataclass
class PseudoLabelSequence:
    utterance_id: str
    labels: np.ndarray
    frame_rate: float
    k: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise LabelRangeError(f"labels of {self.utterance_id} outside [0, {self.k})")

    def __len__(self):
        return self.labels.size


def _nearest(x, centroids, chunk_elems=1 << 22):
    """Index and squared distance of the nearest centroid; ties go to the lowest index."""
    n = x.shape[0]
    k, d = centroids.shape
    step = max(1, chunk_elems // max(1, k * d))
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for s in range(0, n, step):
        diff = x[s : s + step, None, :] - centroids[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        labels[s : s + step] = np.argmin(d2, axis=1)
        dist[s : s + step] = d2[np.arange(d2.shape[0]), labels[s : s + step]]
    return labels, dist


def _kmeans_pp(x, k, rng):
    """Greedy k-means++: each step draws 2 + ln k candidates by D^2 sampling
    and keeps the one that lowers the potential most."""
    n = x.shape[0]
    trials = 2 + int(np.log(k))
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.einsum("nd,nd->n", x - centroids[0], x - centroids[0])
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            cand = np.searchsorted(np.cumsum(d2), rng.random(trials) * total, side="right")
            cand = np.minimum(cand, n - 1)
        else:
            cand = rng.integers(n, size=trials)
        best, best_d2 = None, None
        for idx in cand:
            diff = x - x[idx]
            nd2 = np.minimum(d2, np.einsum("nd,nd->n", diff, diff))
            if best_d2 is None or nd2.sum() < best_d2.sum():
                best, best_d2 = int(idx), nd2
        centroids[j] = x[best]
        d2 = best_d2
    return centroids


def fit_kmeans(features, k, max_iters=100, seed=0, batch=None, tol=1e-6, pca=None):
    """k-means++ then Lloyd iterations (or mini-batch updates when ``batch`` is set).

    ``features`` are the (already projected, if ``pca`` is given) pooled
    frames; ``pca`` is only attached to the returned codebook.  In full-batch
    mode ``inertia_history[i]`` is the inertia of the i-th assignment and is
    nonincreasing.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise InsufficientDataError(f"k-means needs N >= k >= 1 (N={n}, k={k})")
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    history = []
    if batch is None:
        converged = False
        for it in range(max_iters):
            labels, d2 = _nearest(x, c)
            inertia = float(d2.sum())
            history.append(inertia)
            if it > 0 and history[-2] - inertia <= tol * history[-2]:
                converged = True
                break
            counts = np.bincount(labels, minlength=k)
            sums = np.zeros_like(c)
            np.add.at(sums, labels, x)
            new = c.copy()
            filled = counts > 0
            new[filled] = sums[filled] / counts[filled, None]
            far = d2.copy()
            for j in np.flatnonzero(~filled):
                i = int(np.argmax(far))
                new[j] = x[i]
                far[i] = -1.0
            c = new
        if not converged and max_iters > 0:
            _, d2 = _nearest(x, c)
            history.append(float(d2.sum()))
    else:
        seen = np.zeros(k)
        order = rng.permutation(n)
        pos = 0
        for _ in range(max_iters):
            if pos + batch > n:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos : pos + batch]
            pos += batch
            xb = x[idx]
            labels, _ = _nearest(xb, c)
            for i, j in enumerate(labels):
                seen[j] += 1
                c[j] += (xb[i] - c[j]) / seen[j]
            _, d2 = _nearest(x, c)
            history.append(float(d2.sum()))
            if len(history) > 1 and abs(history[-2] - history[-1]) <= tol * history[-2]:
                break
    return Codebook(c, pca, history, seed)


def assign_labels(codebook, features):
    """Nearest-centroid label per frame, projecting through the codebook PCA if any."""
    if isinstance(features, FeatureMatrix):
        data, rate, uid = features.data, features.frame_rate, features.utterance_id
    else:
        data, rate, uid = features, 0.0, ""
    labels, _ = _nearest(codebook.transform(data), codebook.centroids)
    if not isinstance(features, FeatureMatrix):
        return labels
    return PseudoLabelSequence(uid, labels, rate, codebook.k)


# -- files ----------------------------------------------------------------------

def save_codebook(path, codebook, **extra):
    header = {"k": codebook.k, "dim": int(codebook.centroids.shape[1]), "seed": codebook.seed,
              "pca": codebook.pca is not None, "inertia_history": codebook.inertia_history, **extra}
    sections = {"centroids": {"centroids": codebook.centroids}}
    if codebook.pca is not None:
        sections["pca"] = {"mean": codebook.pca.mean, "basis": codebook.pca.basis,
                           "eigenvalues": codebook.pca.eigenvalues}
    return container.save(path, header, sections)


def load_codebook(path):
    header, sections = container.load(path)
    try:
        pca = None
        if header["pca"]:
            p = sections["pca"]
            pca = PcaTransform(p["mean"].astype(np.float64), p["basis"].astype(np.float64),
                               p["eigenvalues"].astype(np.float64))
        cents = sections["centroids"]["centroids"].astype(np.float64)
    except KeyError as exc:
        raise FormatError(f"{path}: missing {exc}") from None
    return Codebook(cents, pca, list(header.get("inertia_history", [])), header.get("seed", 0)), header


def save_labels(path, seq, **provenance):
    header = {"utterance_id": seq.utterance_id, "K": seq.k, "frame_rate": seq.frame_rate, **provenance}
    return container.save(path, header, {"labels": {"labels": seq.labels.astype(np.uint32)}})


def load_labels(path):
    header, sections = container.load(path)
    try:
        seq = PseudoLabelSequence(header["utterance_id"], sections["labels"]["labels"].astype(np.int64),
                                  header["frame_rate"], header["K"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing {exc}") from None
    return seq, header
