import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfdistill.errors import InsufficientDataError, LabelRangeError, ShapeError
from selfdistill.features import FeatureMatrix
from selfdistill.quantizer import (PseudoLabelSequence, assign_labels, fit_kmeans, fit_pca, jacobi_eigh,
                                   load_codebook, load_labels, project, reconstruct, save_codebook, save_labels)


def blobs(rng, n_per=60, spread=0.3):
    centers = np.array([[0, 0], [5, 0], [0, 5], [5, 5]], dtype=float)
    x = np.concatenate([c + spread * rng.normal(size=(n_per, 2)) for c in centers])
    return x, centers


def test_jacobi_matches_lapack(rng):
    for n in (1, 2, 5, 12):
        a = rng.normal(size=(n, n))
        a = a + a.T
        vals, vecs = jacobi_eigh(a)
        np.testing.assert_allclose(np.sort(vals), np.linalg.eigh(a)[0], atol=1e-10)
        np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, a, atol=1e-10)
        np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-12)


def test_pca_matches_eigh_oracle(rng):
    x = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6))
    pca = fit_pca(x, 3)
    xc = x - x.mean(axis=0)
    w, v = np.linalg.eigh(xc.T @ xc / len(x))
    np.testing.assert_allclose(pca.eigenvalues, w[::-1][:3], rtol=1e-10)
    for r in range(3):
        assert abs(abs(pca.basis[r] @ v[:, -1 - r]) - 1) < 1e-9
        assert pca.basis[r][np.argmax(np.abs(pca.basis[r]))] > 0


def test_pca_reconstruction_error_is_discarded_variance(rng):
    x = rng.normal(size=(500, 8)) * np.arange(1, 9)
    full = fit_pca(x, 7)
    xc = x - x.mean(axis=0)
    total = np.linalg.eigh(xc.T @ xc / len(x))[0][::-1]
    for r in (1, 4, 7):
        pca = fit_pca(x, r)
        mse = np.mean(np.sum((reconstruct(pca, project(pca, x)) - x) ** 2, axis=1))
        assert abs(mse - total[r:].sum()) < 1e-6
    assert full.rank == 7


def test_pca_project_featurematrix_and_errors(rng):
    x = rng.normal(size=(50, 4))
    pca = fit_pca(x, 2)
    fm = project(pca, FeatureMatrix(x, 50.0, "u"))
    assert fm.kind == "projected" and fm.shape == (50, 2)
    with pytest.raises(ShapeError):
        project(pca, x[:, :3])
    with pytest.raises(InsufficientDataError):
        fit_pca(x[:2], 2)
    with pytest.raises(InsufficientDataError):
        fit_pca(x, 5)


def test_pca_rank_deficient_warns(rng):
    x = np.repeat(rng.normal(size=(40, 1)), 3, axis=1)
    with pytest.warns(RuntimeWarning):
        pca = fit_pca(x, 2)
    assert pca.eigenvalues[1] == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_lloyd_inertia_nonincreasing(seed, k):
    x = np.random.default_rng(seed).normal(size=(40, 3))
    cb = fit_kmeans(x, k, seed=seed)
    h = np.array(cb.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * h[:-1])


def test_blob_recovery(rng):
    x, centers = blobs(rng)
    cb = fit_kmeans(x, 4, seed=0)
    best = min(np.abs(cb.centroids[list(p)] - centers).max() for p in itertools.permutations(range(4)))
    assert best < 0.15


def test_assign_matches_brute_force(rng):
    x = rng.normal(size=(120, 5))
    cb = fit_kmeans(x, 7, seed=3)
    brute = np.array([np.argmin([np.sum((p - c) ** 2) for c in cb.centroids]) for p in x])
    np.testing.assert_array_equal(assign_labels(cb, x), brute)
    seq = assign_labels(cb, FeatureMatrix(x, 50.0, "u"))
    assert isinstance(seq, PseudoLabelSequence) and seq.k == 7 and len(seq) == 120


def test_ties_go_to_lowest_index():
    cb = fit_kmeans(np.array([[0.0], [2.0]]), 2, seed=0)
    cb.centroids = np.array([[2.0], [0.0]])
    assert assign_labels(cb, np.array([[1.0]]))[0] == 0


def test_kmeans_edge_cases(rng):
    with pytest.raises(InsufficientDataError):
        fit_kmeans(rng.normal(size=(3, 2)), 4)
    same = np.ones((10, 2))
    cb = fit_kmeans(same, 3, seed=0)
    assert cb.inertia_history[-1] == 0.0
    k1 = fit_kmeans(rng.normal(size=(30, 2)), 1)
    assert np.allclose(assign_labels(k1, rng.normal(size=(5, 2))), 0)


def test_minibatch_runs_and_is_seeded(rng):
    x, _ = blobs(rng)
    a = fit_kmeans(x, 4, seed=2, batch=32, max_iters=50)
    b = fit_kmeans(x, 4, seed=2, batch=32, max_iters=50)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert a.inertia_history[-1] < a.inertia_history[0] * 1.5


def test_codebook_with_pca_roundtrip(tmp_path, rng):
    x = rng.normal(size=(200, 6))
    pca = fit_pca(x, 3)
    cb = fit_kmeans(project(pca, x), 5, seed=1, pca=pca)
    save_codebook(tmp_path / "cb.bin", cb)
    back, header = load_codebook(tmp_path / "cb.bin")
    assert header["k"] == 5 and back.input_dim == 6
    np.testing.assert_array_equal(assign_labels(back, x[:50]), assign_labels(cb, x[:50]))


def test_labels_roundtrip_and_range(tmp_path):
    seq = PseudoLabelSequence("u", np.array([0, 3, 2]), 50.0, 4)
    save_labels(tmp_path / "u.lab", seq, iteration=1)
    back, header = load_labels(tmp_path / "u.lab")
    assert header["iteration"] == 1
    np.testing.assert_array_equal(back.labels, seq.labels)
    with pytest.raises(LabelRangeError):
        PseudoLabelSequence("u", np.array([4]), 50.0, 4)
