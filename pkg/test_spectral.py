import numpy as np
import pytest
from scipy.linalg import eigh

from data_model import ConvergenceError, Parcellation, ValidationError
from metrics import nmi
from spatial_graph import SimilarityGraph
from spectral import ClusterParams, normalized_laplacian, smallest_eigenvectors, spectral_cluster


def graph_from_dense(W):
    i, j = np.nonzero(np.triu(W, 1))
    return SimilarityGraph(W.shape[0], i, j, W[i, j], 1)


def random_graph(n, density, seed):
    rng = np.random.default_rng(seed)
    W = np.triu(rng.random((n, n)) * (rng.random((n, n)) < density), 1)
    return graph_from_dense(W + W.T)


def two_cliques(size=5):
    n = 2 * size
    W = np.zeros((n, n))
    W[:size, :size] = 1
    W[size:, size:] = 1
    np.fill_diagonal(W, 0)
    return graph_from_dense(W)


def test_normalized_laplacian_matches_formula():
    g = random_graph(12, 0.8, seed=0)
    W = g.to_sparse().toarray()
    d = W.sum(axis=1)
    expected = np.eye(12) - W / np.sqrt(np.outer(d, d))
    assert np.allclose(normalized_laplacian(g).matrix.toarray(), expected, atol=1e-14)


def test_isolated_vertex_gets_zero_row():
    W = np.zeros((4, 4))
    W[0, 1] = W[1, 0] = 1.0
    W[1, 2] = W[2, 1] = 2.0
    op = normalized_laplacian(graph_from_dense(W))
    assert list(op.isolated) == [3]
    assert not op.matrix.toarray()[3].any()
    assert not op.matrix.toarray()[:, 3].any()


@pytest.mark.parametrize("dense_limit", [10_000, 0])
def test_eigenpairs_match_dense_oracle(dense_limit):
    rng = np.random.default_rng(42)
    for trial in range(20):
        n = int(rng.integers(30, 120))
        k = int(rng.integers(2, 6))
        g = random_graph(n, 0.2, seed=trial)
        op = normalized_laplacian(g)
        emb = smallest_eigenvectors(op, k, tol=1e-8, seed=trial, dense_limit=dense_limit)
        oracle = eigh(op.matrix.toarray(), eigvals_only=True)[:k]
        assert np.allclose(emb.eigenvalues, oracle, atol=1e-8, rtol=0)
        assert (emb.residuals <= 1e-8).all()
        assert np.allclose(emb.vectors.T @ emb.vectors, np.eye(k), atol=1e-8)


def test_eigenvalues_lie_in_zero_two():
    op = normalized_laplacian(random_graph(50, 0.3, seed=9))
    emb = smallest_eigenvectors(op, 5)
    assert (emb.eigenvalues >= 0).all() and (emb.eigenvalues <= 2).all()


@pytest.mark.parametrize("dense_limit", [10_000, 0])
def test_two_disconnected_cliques(dense_limit):
    parc = spectral_cluster(two_cliques(), 2, ClusterParams(dense_limit=dense_limit))
    assert parc.labels.tolist() == [1] * 5 + [2] * 5


def test_k_one_is_a_single_region():
    parc = spectral_cluster(random_graph(20, 0.3, seed=1), 1)
    assert parc.k == 1
    assert (parc.labels == 1).all()


def test_zero_weight_graph_is_degenerate():
    g = SimilarityGraph(4, np.array([0, 1]), np.array([1, 2]), np.zeros(2), 1)
    parc = spectral_cluster(g, 2)
    assert parc.degenerate
    assert (parc.labels == 1).all()


def test_clustering_is_seed_deterministic():
    g = random_graph(60, 0.2, seed=3)
    a = spectral_cluster(g, 4, ClusterParams(seed=5))
    b = spectral_cluster(g, 4, ClusterParams(seed=5))
    c = spectral_cluster(g, 4, ClusterParams(seed=5, n_jobs=2))
    assert a == b == c
    # first-appearance order
    _, first = np.unique(a.labels, return_index=True)
    assert a.labels[np.sort(first)].tolist() == list(range(1, np.unique(a.labels).size + 1))


def test_bad_k():
    g = random_graph(5, 0.5, seed=0)
    with pytest.raises(ValidationError):
        spectral_cluster(g, 0)
    with pytest.raises(ValidationError):
        smallest_eigenvectors(normalized_laplacian(g), 6)


def planted_blocks(sizes, across=0.0, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = labels.size
    same = labels[:, None] == labels[None, :]
    W = np.where(same, 0.5 + 0.5 * rng.random((n, n)), across * (rng.random((n, n)) < 0.1))
    W = np.triu(W, 1)
    return graph_from_dense(W + W.T), labels + 1


@pytest.mark.parametrize("dense_limit", [10_000, 0])
def test_planted_blocks_are_recovered_exactly(dense_limit):
    g, truth = planted_blocks([20, 20, 20])
    parc = spectral_cluster(g, 3, ClusterParams(dense_limit=dense_limit))
    assert nmi(parc, Parcellation(truth, 3)) == 1.0


def test_node_order_does_not_change_the_partition():
    g, truth = planted_blocks([25, 15, 20], across=0.05, seed=2)
    W = g.to_sparse().toarray()
    perm = np.random.default_rng(8).permutation(W.shape[0])
    shuffled = graph_from_dense(W[np.ix_(perm, perm)])
    a = spectral_cluster(g, 3, ClusterParams(seed=1))
    b = spectral_cluster(shuffled, 3, ClusterParams(seed=1))
    back = np.empty_like(b.labels)
    back[perm] = b.labels
    assert nmi(a, Parcellation(back, 3)) == 1.0
    assert nmi(a, Parcellation(truth, 3)) == 1.0


def test_laplacian_quadratic_form_is_psd():
    op = normalized_laplacian(random_graph(80, 0.2, seed=4))
    L = op.matrix
    x = np.random.default_rng(0).standard_normal((80, 50))
    quad = np.einsum("ij,ij->j", x, L @ x)
    norms = np.einsum("ij,ij->j", x, x)
    assert (quad >= -1e-12 * norms).all()
    assert (quad <= 2 * norms * (1 + 1e-12)).all()


def test_exhausted_solver_budget_raises():
    op = normalized_laplacian(random_graph(300, 0.1, seed=6))
    with pytest.raises(ConvergenceError):
        smallest_eigenvectors(op, 6, tol=1e-14, max_iter=1, dense_limit=0)
