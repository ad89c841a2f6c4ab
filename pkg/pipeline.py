"""Iterative connectivity-based parcellation and the initial segmentations.

Each iteration computes connectivity profiles against the current
segmentation, reweights the fixed spatial edge list by profile similarity,
and cuts the graph into k regions; the loop stops once consecutive
parcellations agree to the NMI threshold.
"""
import logging
from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np
import pandas as pd

from data_model import FLOAT_FMT, Parcellation, ValidationError, derive_seed, read_segmentation
from kmeans import DEFAULT_MAX_ITER, DEFAULT_RESTARTS, DEFAULT_TOL, kmeans_multi
from metrics import dice, nmi
from profiles import aggregate_profiles
from spatial_graph import MEASURES, build_spatial_edges, uniform_weights, weight_edges
from spectral import DEFAULT_EIG_TOL, DENSE_LIMIT, ClusterParams, spectral_cluster

log = logging.getLogger(__name__)

# derive_seed keys for the independent random streams of one run
_ITERATION_STREAM, _RANDOM_INIT_STREAM, _SYNTHETIC_INIT_STREAM = 1, 2, 3


@dataclass(frozen=True)
class PipelineParams:
    k: int
    radius: int = 2
    measure: str = "correlation"
    restarts: int = DEFAULT_RESTARTS
    stop_threshold: float = 0.95
    max_iterations: int = 10
    seed: int = 0
    early_stop: bool = True
    tol: float = DEFAULT_EIG_TOL
    max_solver_iter: int = None
    kmeans_max_iter: int = DEFAULT_MAX_ITER
    kmeans_tol: float = DEFAULT_TOL
    dense_limit: int = DENSE_LIMIT
    n_jobs: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be ≥ 1")
        if not 0 < self.stop_threshold <= 1:
            raise ValidationError("stop_threshold must lie in (0, 1]")
        if self.radius < 1:
            raise ValidationError("radius must be ≥ 1")
        if self.measure not in MEASURES:
            raise ValidationError(f"measure must be one of {', '.join(MEASURES)}")
        if self.restarts < 1:
            raise ValidationError("restarts must be ≥ 1")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be ≥ 1")
        if self.n_jobs == 0:
            raise ValidationError("threads must be nonzero")

    def cluster_params(self, *keys):
        return ClusterParams(
            restarts=self.restarts,
            seed=derive_seed(self.seed, *keys),
            tol=self.tol,
            max_iter=self.max_solver_iter,
            kmeans_max_iter=self.kmeans_max_iter,
            kmeans_tol=self.kmeans_tol,
            dense_limit=self.dense_limit,
            n_jobs=self.n_jobs,
        )


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    parcellation: Parcellation
    nmi_prev: float
    dice_prev: float
    profile_columns: int
    converged: bool


@dataclass(frozen=True, eq=False)
class PipelineTrace:
    records: tuple
    converged: bool

    def __len__(self):
        return len(self.records)

    @property
    def degenerate(self):
        return any(r.parcellation.degenerate for r in self.records)

    def parcellation(self, iteration):
        """Parcellation after `iteration` (1-based); later iterations repeat the last one."""
        return self.records[min(iteration, len(self.records)) - 1].parcellation

    def to_frame(self):
        return pd.DataFrame(
            {
                "iter": [r.iteration for r in self.records],
                "nmi_prev": [r.nmi_prev for r in self.records],
                "dice_prev": [r.dice_prev for r in self.records],
                "converged": [r.converged for r in self.records],
            }
        )


# --- 1. INITIAL SEGMENTATIONS ---
def random_spatial_segmentation(mask, m, seed=0, n_jobs=1):
    """Spatially compact regions from k-means++ on voxel coordinates alone."""
    if not 1 <= m <= mask.n:
        raise ValidationError(f"need 1 <= m <= {mask.n}, got m={m}")
    if m == 1:
        return Parcellation(np.ones(mask.n, dtype=np.int64), 1)
    result = kmeans_multi(mask.coords.astype(np.float64), m, restarts=1, seed=seed, n_jobs=n_jobs)
    seg = Parcellation(result.labels, m).canonical()
    if seg.degenerate:
        log.warning("random segmentation left %d of %d regions empty", int((seg.sizes == 0).sum()), m)
    return seg


def grid_segmentation(mask, cube):
    """Label each voxel by its cube; only cubes holding mask voxels get labels."""
    if cube < 1:
        raise ValidationError("cube must be ≥ 1")
    cells = mask.coords // int(cube)
    shape = tuple(-(-d // int(cube)) for d in mask.dims)
    keys = np.ravel_multi_index(cells.T, shape)
    used, inverse = np.unique(keys, return_inverse=True)
    return Parcellation(inverse.ravel() + 1, used.size)


def synthetic_segmentation(mask, k, params, edges=None):
    """Spectral cut of the spatial graph with every edge weight set to 1."""
    edges = edges if edges is not None else build_spatial_edges(mask, params.radius)
    return spectral_cluster(uniform_weights(edges), k, params.cluster_params(_SYNTHETIC_INIT_STREAM))


def split_init_mode(text):
    """(mode, argument) of `file:<path>`, `random:<m>`, `grid:<cube>` or `synthetic`; reads nothing."""
    mode, _, arg = text.partition(":")
    if mode == "file" and arg:
        return mode, arg
    if mode == "synthetic" and not arg:
        return mode, None
    if mode in ("random", "grid"):
        try:
            value = int(arg)
        except ValueError:
            raise ValidationError(f"init mode {text!r} needs an integer argument")
        if value < 1:
            raise ValidationError(f"init mode {text!r} needs a positive argument")
        return mode, value
    raise ValidationError(f"unknown init mode {text!r}")


def parse_init_mode(text, mask, params, edges=None):
    """Segmentation for an init mode string."""
    mode, arg = split_init_mode(text)
    if mode == "file":
        return read_segmentation(arg, mask)
    if mode == "synthetic":
        return synthetic_segmentation(mask, params.k, params, edges)
    if mode == "random":
        return random_spatial_segmentation(
            mask, arg, derive_seed(params.seed, _RANDOM_INIT_STREAM), params.n_jobs
        )
    return grid_segmentation(mask, arg)


# --- 2. ITERATION ---
def iterate_parcellation(conn, mask, init, params, edges=None):
    """Refine `init` until consecutive parcellations reach the NMI threshold.

    The first iteration is compared against the initial segmentation, later
    ones against the previous parcellation.
    """
    if not conn.n == mask.n == init.n:
        raise ValidationError(
            f"inconsistent inputs: mask {mask.n}, connectivity {conn.n}, init {init.n} voxels"
        )
    edges = edges if edges is not None else build_spatial_edges(mask, params.radius)
    current = init
    records = []
    for t in range(1, params.max_iterations + 1):
        profiles = aggregate_profiles(conn, current)
        graph = weight_edges(edges, profiles, params.measure)
        parc = spectral_cluster(graph, params.k, params.cluster_params(_ITERATION_STREAM, t))
        score_nmi = nmi(parc, current)
        score_dice = dice(parc, current)
        hit = score_nmi >= params.stop_threshold
        records.append(IterationRecord(t, parc, score_nmi, score_dice, profiles.m, hit))
        log.info("iteration %d: nmi=%.4f dice=%.4f (%d profile columns)", t, score_nmi, score_dice, profiles.m)
        current = parc
        if hit and params.early_stop:
            break
    converged = records[-1].converged
    if not converged:
        log.warning("no convergence after %d iterations", len(records))
    return current, PipelineTrace(tuple(records), converged)


def compare_initializations(conn, mask, inits, params):
    """Run a fixed number of iterations from every named initial segmentation.

    Returns the traces, a per-iteration table of pairwise NMI/Dice between
    runs, and the per-iteration mean over pairs.
    """
    if len(inits) < 2:
        raise ValidationError("need at least two initial segmentations")
    fixed = replace(params, early_stop=False)
    edges = build_spatial_edges(mask, params.radius)
    traces = {}
    for name, seg in inits.items():
        log.info("running from initialization %s", name)
        traces[name] = iterate_parcellation(conn, mask, seg, fixed, edges)[1]
    rows = []
    for t in range(1, fixed.max_iterations + 1):
        for a, b in combinations(inits, 2):
            pa, pb = traces[a].parcellation(t), traces[b].parcellation(t)
            rows.append({"iteration": t, "init_a": a, "init_b": b, "nmi": nmi(pa, pb), "dice": dice(pa, pb)})
    pairs = pd.DataFrame(rows)
    curve = pairs.groupby("iteration", as_index=False)[["nmi", "dice"]].mean()
    return traces, pairs, curve


def write_trace(trace, path):
    trace.to_frame().to_csv(path, sep="\t", index=False, float_format=FLOAT_FMT)
