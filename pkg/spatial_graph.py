"""Sparse spatially constrained similarity graph.

Voxels are nodes; two voxels share an edge when their squared grid
distance is at most r^2, and the edge carries the similarity of the two
connectivity profiles.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse as sp

from data_model import FLOAT_FMT, ValidationError

log = logging.getLogger(__name__)

MEASURES = ("correlation", "cosine")
# Rows whose variance (correlation) or norm (cosine) falls below this
# fraction of their squared norm count as flat and get weight 0.
FLAT_RTOL = 1e-12
DENSE_LIMIT = 20_000_000
EDGE_CHUNK = 1 << 16


@dataclass(frozen=True, eq=False)
class EdgeList:
    """Undirected spatial edges, i < j, sorted by (i, j)."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    radius: int

    def __len__(self):
        return self.rows.size

    def degrees(self):
        return np.bincount(self.rows, minlength=self.n) + np.bincount(self.cols, minlength=self.n)


@dataclass(frozen=True, eq=False)
class SimilarityGraph:
    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    radius: int

    @property
    def n_edges(self):
        return self.rows.size

    def to_sparse(self):
        """Symmetric n x n weight matrix W."""
        upper = sp.coo_matrix((self.weights, (self.rows, self.cols)), shape=(self.n, self.n))
        return (upper + upper.T).tocsr()

    def degrees(self):
        return np.bincount(self.rows, weights=self.weights, minlength=self.n) + np.bincount(
            self.cols, weights=self.weights, minlength=self.n
        )


def neighbor_offsets(r):
    """All nonzero integer offsets with squared norm <= r^2, lexicographically sorted."""
    r = int(r)
    if r < 1:
        raise ValidationError("radius must be >= 1")
    span = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(span, span, span, indexing="ij"), axis=-1).reshape(-1, 3)
    norm2 = (grid ** 2).sum(axis=1)
    return grid[(norm2 <= r * r) & (norm2 > 0)]


def _forward(offsets):
    dx, dy, dz = offsets.T
    return offsets[(dx > 0) | ((dx == 0) & (dy > 0)) | ((dx == 0) & (dy == 0) & (dz > 0))]


def build_spatial_edges(mask, r):
    """One edge per voxel pair within radius r; neighbours outside the mask are skipped."""
    volume = mask.index_volume
    dims = np.array(mask.dims)
    source = np.arange(mask.n)
    rows, cols = [], []
    # each unordered pair is reached through exactly one forward offset
    for offset in _forward(neighbor_offsets(r)):
        target = mask.coords + offset
        inside = ((target >= 0) & (target < dims)).all(axis=1)
        idx = volume[tuple(target[inside].T)]
        hit = idx >= 0
        rows.append(source[inside][hit])
        cols.append(idx[hit])
    a = np.concatenate(rows)
    b = np.concatenate(cols)
    i, j = np.minimum(a, b), np.maximum(a, b)
    order = np.lexsort((j, i))
    log.debug("radius %d: %d spatial edges over %d voxels", r, i.size, mask.n)
    return EdgeList(mask.n, i[order], j[order], int(r))


def _row_dots(values, rows, cols):
    out = np.empty(rows.size)
    n, m = values.shape
    dense = values.toarray() if n * m <= DENSE_LIMIT else None
    for start in range(0, rows.size, EDGE_CHUNK):
        stop = start + EDGE_CHUNK
        r, c = rows[start:stop], cols[start:stop]
        if dense is not None:
            out[start:stop] = np.einsum("ij,ij->i", dense[r], dense[c])
        else:
            out[start:stop] = np.asarray(values[r].multiply(values[c]).sum(axis=1)).ravel()
    return out


def weight_edges(edges, profiles, measure="correlation"):
    """Weight every spatial edge by the similarity of its endpoints' profiles.

    Negative similarities are clamped to 0 so the Laplacian stays PSD; a flat
    row (zero variance or zero norm) gives weight 0 on all incident edges.
    """
    if measure not in MEASURES:
        raise ValidationError(f"unknown similarity measure {measure!r}")
    if profiles.n != edges.n:
        raise ValidationError(
            f"dimension mismatch: {profiles.n} profile rows for {edges.n} voxels"
        )
    values = profiles.values.tocsr()
    m = values.shape[1]
    sums = np.asarray(values.sum(axis=1)).ravel()
    squares = np.asarray(values.multiply(values).sum(axis=1)).ravel()
    i, j = edges.rows, edges.cols
    dots = _row_dots(values, i, j)
    if measure == "correlation":
        scale = squares - sums * sums / m
        numerator = dots - sums[i] * sums[j] / m
    else:
        scale = squares
        numerator = dots
    flat = scale <= FLAT_RTOL * squares
    live = ~(flat[i] | flat[j])
    weights = np.zeros(i.size)
    weights[live] = numerator[live] / np.sqrt(scale[i][live] * scale[j][live])
    np.clip(weights, 0.0, 1.0, out=weights)
    if flat.any():
        log.debug("%d voxels have flat profiles", int(flat.sum()))
    return SimilarityGraph(edges.n, edges.rows, edges.cols, weights, edges.radius)


def uniform_weights(edges):
    """All-ones weighting: a purely spatial, connectivity-blind graph."""
    return SimilarityGraph(edges.n, edges.rows, edges.cols, np.ones(len(edges)), edges.radius)


def write_graph(graph, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("SIMGRAPH %d %d %d\n" % (graph.n, graph.n_edges, graph.radius))
        pd.DataFrame({"i": graph.rows, "j": graph.cols, "w": graph.weights}).to_csv(
            fh, sep=" ", header=False, index=False, float_format=FLOAT_FMT
        )
