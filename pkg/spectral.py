"""Normalized spectral clustering on a similarity graph.

The embedding is the k eigenvectors of D^{-1/2}(D - W)D^{-1/2} with the
smallest eigenvalues; rows are scaled to unit length and clustered with
k-means++ restarts.
"""
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from data_model import (
    ConvergenceError,
    NumericalError,
    Parcellation,
    ValidationError,
    as_generator,
    derive_seed,
)
from kmeans import DEFAULT_MAX_ITER, DEFAULT_RESTARTS, DEFAULT_TOL, kmeans_multi

log = logging.getLogger(__name__)

DEFAULT_EIG_TOL = 1e-8
# At or below this many nodes the embedding comes from a dense eigensolver.
DENSE_LIMIT = 1500


@dataclass(frozen=True)
class ClusterParams:
    restarts: int = DEFAULT_RESTARTS
    seed: object = 0
    tol: float = DEFAULT_EIG_TOL
    max_iter: int = None
    kmeans_max_iter: int = DEFAULT_MAX_ITER
    kmeans_tol: float = DEFAULT_TOL
    dense_limit: int = DENSE_LIMIT
    n_jobs: int = 1


@dataclass(frozen=True, eq=False)
class NormalizedLaplacian:
    matrix: sp.csr_matrix
    degrees: np.ndarray
    laplacian: sp.csr_matrix

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def isolated(self):
        return np.flatnonzero(self.degrees <= 0)

    def __matmul__(self, v):
        return self.matrix @ v


@dataclass(frozen=True, eq=False)
class SpectralEmbedding:
    vectors: np.ndarray
    eigenvalues: np.ndarray
    residuals: np.ndarray

    @property
    def k(self):
        return self.eigenvalues.size


def normalized_laplacian(g):
    """D^{-1/2}(D - W)D^{-1/2}; an isolated vertex (D_ii = 0) gets a zero row and column."""
    W = g.to_sparse()
    if W.nnz and W.data.min() < 0:
        raise NumericalError("negative edge weight in similarity graph")
    degrees = np.asarray(W.sum(axis=1)).ravel()
    connected = degrees > 0
    inv_sqrt = np.zeros_like(degrees)
    inv_sqrt[connected] = 1.0 / np.sqrt(degrees[connected])
    scale = sp.diags(inv_sqrt)
    matrix = (sp.diags(connected.astype(np.float64)) - scale @ W @ scale).tocsr()
    matrix.eliminate_zeros()
    laplacian = (sp.diags(degrees) - W).tocsr()
    isolated = int((~connected).sum())
    if isolated:
        log.warning("%d isolated vertices in similarity graph", isolated)
    return NormalizedLaplacian(matrix, degrees, laplacian)


def _null_space(op):
    """Orthonormal kernel basis: one sqrt(D)-weighted vector per component."""
    n_comp, comp = connected_components(op.matrix, directed=False)
    weight = np.sqrt(np.maximum(op.degrees, 0))
    basis = np.zeros((op.n, n_comp))
    for c in range(n_comp):
        members = comp == c
        v = weight * members
        if not v.any():
            v = members.astype(np.float64)
        basis[:, c] = v / np.linalg.norm(v)
    return basis


def _residuals(A, vectors, values):
    return np.linalg.norm(A @ vectors - vectors * values, axis=0)


def smallest_eigenvectors(op, k, tol=DEFAULT_EIG_TOL, max_iter=None, seed=0, dense_limit=DENSE_LIMIT):
    """The k smallest eigenpairs of the normalized Laplacian, eigenvalues ascending.

    Large graphs go through ARPACK on the shifted operator 2I - L with the
    known kernel (one vector per connected component) deflated out.
    """
    n = op.n
    if not 1 <= k <= n:
        raise ValidationError(f"need 1 <= k <= n, got k={k}, n={n}")
    A = op.matrix
    if A.nnz == 0:
        vectors = np.eye(n, k)
        return SpectralEmbedding(vectors, np.zeros(k), np.zeros(k))

    if n <= dense_limit or k >= n - 1:
        values, vectors = eigh(A.toarray(), subset_by_index=[0, k - 1])
    else:
        kernel = _null_space(op)
        c = kernel.shape[1]
        if c >= k:
            values, vectors = np.zeros(k), kernel[:, :k]
        else:
            values, vectors = _arpack(A, kernel, k - c, tol, max_iter or 10 * n, seed)
            values = np.concatenate([np.zeros(c), values])
            vectors = np.hstack([kernel, vectors])

    order = np.argsort(values, kind="stable")
    values, vectors = values[order], vectors[:, order]
    residuals = _residuals(A, vectors, values)
    log.debug("eigenvalues %s, max residual %.3e", np.array2string(values, precision=4), residuals.max())
    if residuals.max() > tol:
        raise ConvergenceError("eigen-residual above tolerance", residuals)
    return SpectralEmbedding(vectors, np.clip(values, 0.0, 2.0), residuals)


def _arpack(A, kernel, count, tol, max_iter, seed):
    n = A.shape[0]

    def deflate(v):
        return v - kernel @ (kernel.T @ v)

    shifted = LinearOperator((n, n), matvec=lambda v: deflate(2.0 * v - A @ deflate(v)), dtype=np.float64)
    v0 = deflate(as_generator(seed).standard_normal(n))
    ncv = min(n - 1, max(2 * count + 1, 20))
    try:
        mu, vectors = eigsh(shifted, k=count, which="LA", tol=tol / 4, maxiter=max_iter, v0=v0, ncv=ncv)
    except ArpackNoConvergence as err:
        partial = err.eigenvectors
        residuals = _residuals(A, partial, 2.0 - err.eigenvalues) if partial.size else None
        raise ConvergenceError("eigensolver did not converge", residuals)
    # Rayleigh-Ritz on the returned subspace
    basis, _ = np.linalg.qr(deflate(vectors))
    H = basis.T @ (A @ basis)
    values, rotation = eigh((H + H.T) / 2)
    return values, basis @ rotation


def spectral_cluster(g, k, params=None):
    """Parcellate the similarity graph into k regions; labels in first-appearance order."""
    params = params or ClusterParams()
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k == 1:
        return Parcellation(np.ones(g.n, dtype=np.int64), 1)
    op = normalized_laplacian(g)
    if op.matrix.nnz == 0:
        log.warning("similarity graph carries no weight; returning a single region")
        return Parcellation(np.ones(g.n, dtype=np.int64), k)
    embedding = smallest_eigenvectors(
        op, k, tol=params.tol, max_iter=params.max_iter,
        seed=derive_seed(params.seed, 0), dense_limit=params.dense_limit,
    )
    rows = embedding.vectors.copy()
    norms = np.linalg.norm(rows, axis=1)
    live = norms > 0
    rows[live] /= norms[live][:, None]
    result = kmeans_multi(
        rows, k, restarts=params.restarts, seed=derive_seed(params.seed, 1),
        max_iter=params.kmeans_max_iter, tol=params.kmeans_tol, n_jobs=params.n_jobs,
    )
    parc = Parcellation(result.labels, k).canonical()
    if parc.degenerate:
        log.warning("spectral clustering used %d of %d labels", int((parc.sizes > 0).sum()), k)
    return parc
