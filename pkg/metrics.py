"""Clustering comparison: normalized mutual information and Dice's coefficient.

Both work from the sparse contingency table of the two label vectors; the
n x n co-membership matrices behind Dice are never materialized.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse as sp
from sklearn.metrics.cluster import contingency_matrix, entropy, mutual_info_score

from data_model import FLOAT_FMT, ValidationError, derive_seed
from synth import random_parcellation

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ContingencyTable:
    """Counts over the labels actually used; row_labels/col_labels name the axes."""

    counts: sp.csr_matrix
    row_labels: np.ndarray
    col_labels: np.ndarray

    @property
    def row_totals(self):
        return np.asarray(self.counts.sum(axis=1)).ravel().astype(np.int64)

    @property
    def col_totals(self):
        return np.asarray(self.counts.sum(axis=0)).ravel().astype(np.int64)

    @property
    def n(self):
        return int(self.counts.sum())


def contingency(A, B):
    if A.n != B.n:
        raise ValidationError(f"length mismatch: {A.n} vs {B.n} voxels")
    counts = contingency_matrix(A.labels, B.labels, sparse=True, dtype=np.int64).tocsr()
    counts.sort_indices()
    return ContingencyTable(counts, np.unique(A.labels), np.unique(B.labels))


def nmi(A, B):
    """MI / mean entropy, natural log, 0 log 0 = 0; two single-region labelings give 1."""
    table = contingency(A, B)
    ha = float(entropy(A.labels))
    hb = float(entropy(B.labels))
    if ha + hb == 0:
        return 1.0
    # one-to-one correspondence between used labels
    if table.counts.nnz == table.row_labels.size == table.col_labels.size:
        return 1.0
    mi = float(mutual_info_score(None, None, contingency=table.counts))
    return float(min(1.0, max(0.0, mi / ((ha + hb) / 2))))


def dice(A, B):
    """2 sum n_ij^2 / (sum a_i^2 + sum b_j^2), diagonal of the co-membership matrices included."""
    table = contingency(A, B)
    common = int((table.counts.data ** 2).sum())
    total = int((table.row_totals ** 2).sum() + (table.col_totals ** 2).sum())
    return 2.0 * common / total


METRICS = {"nmi": nmi, "dice": dice}


def get_metric(name):
    try:
        return METRICS[name]
    except KeyError:
        raise ValidationError(f"unknown metric {name!r}; choose from {sorted(METRICS)}")


def pairwise_similarity(parcs, metric="nmi"):
    score = get_metric(metric) if isinstance(metric, str) else metric
    count = len(parcs)
    matrix = np.eye(count)
    for s in range(count):
        for t in range(s + 1, count):
            matrix[s, t] = matrix[t, s] = score(parcs[s], parcs[t])
    return matrix


def mean_offdiagonal(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    count = matrix.shape[0]
    if count < 2:
        raise ValidationError("need at least two parcellations")
    return float(matrix[~np.eye(count, dtype=bool)].mean())


def random_baseline(parcs, k=None, trials=100, metric="nmi", seed=0):
    """Mean similarity between each parcellation and `trials` uniform random ones of the same k."""
    score = get_metric(metric)
    values = []
    for p, parc in enumerate(parcs):
        for t in range(trials):
            rand = random_parcellation(parc.n, k or parc.k, derive_seed(seed, p, t))
            values.append(score(parc, rand))
    return float(np.mean(values))


def write_similarity(matrix, names, path):
    pd.DataFrame(matrix, index=list(names), columns=list(names)).to_csv(
        path, sep="\t", float_format=FLOAT_FMT
    )
